"""Configuration, runs, metrics and reproduction recipes."""
