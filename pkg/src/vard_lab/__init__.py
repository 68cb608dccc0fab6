"""Value-guided fine-tuning of small diffusion and flow models."""

__version__ = "0.1.0"
