"""Terminal reward functions.

Every reward is evaluated on a batch of terminal samples and returns one
value per sample. Batch-level rewards (grid occupancy) hand the same value to
every member of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DimensionError

DIFFERENTIABLE = {"mode_distance": True, "grid_occupancy": False, "weighted_entropy": False}

# secondary-structure weights (helix, sheet, coil)
STRUCTURE_WEIGHTS = (1.0, 5.0, 0.5)

# KL weights for the named eta presets
ETA_PRESETS = {
    "paper-eta-aesthetic": 100.0,
    "paper-eta-pickscore": 0.5,
    "paper-eta-imagereward": 20.0,
    "paper-eta-protein": 0.1,
    "paper-eta-compressibility": 1.0,
}

_CUSTOM = {}


def mode_distance_reward(x0, target, scale=1.0):
    """-scale * ||x0 - target||^2 per row; accepts arrays or tensors."""
    target = np.asarray(target, dtype=np.float64)
    shape = x0.shape if isinstance(x0, Tensor) else np.shape(x0)
    if shape[-1] != target.shape[-1]:
        raise DimensionError("sample and target dimensions differ")
    if isinstance(x0, Tensor):
        return ((x0 - target) ** 2).sum(axis=-1) * (-scale)
    return -scale * np.sum((np.asarray(x0, dtype=np.float64) - target) ** 2, axis=-1)


def grid_cells(x, resolution, bbox):
    """Integer cell coordinates; points outside the box fall into the edge cells."""
    lo, hi = np.asarray(bbox[0], dtype=np.float64), np.asarray(bbox[1], dtype=np.float64)
    if resolution < 1 or np.any(hi <= lo):
        raise ContractError(f"invalid grid: resolution={resolution}, bbox={bbox}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx = np.floor((x - lo) / (hi - lo) * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def grid_occupancy_reward(x0, resolution, bbox):
    """Negative number of distinct occupied cells (fewer cells = more compressible)."""
    cells = grid_cells(x0, resolution, bbox)
    return -float(len(np.unique(cells, axis=0)))


def weighted_entropy_reward(p, w):
    """(sum p_d w_d) * (1 + sum p_d ln p_d) with 0 ln 0 = 0; vectorised over leading axes."""
    p, w = np.asarray(p, dtype=np.float64), np.asarray(w, dtype=np.float64)
    if p.shape[-1] != w.shape[-1]:
        raise DimensionError("proportions and weights differ in length")
    if not np.isfinite(w).all():
        raise ContractError("weights must be finite")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ContractError("proportions must lie on the simplex")
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return (p @ w) * (1.0 + plogp.sum(axis=-1))


def soft_proportions(x0, anchors, temperature=0.5):
    """Soft assignment of samples to anchor points (softmax of -d^2 / temperature)."""
    d2 = np.sum((np.atleast_2d(x0)[:, None, :] - np.asarray(anchors)[None]) ** 2, axis=-1)
    logits = -d2 / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def register_custom(name, fn, tensor_fn=None):
    _CUSTOM[name] = (fn, tensor_fn)


@dataclass
class RewardSpec:
    kind: str
    params: dict = field(default_factory=dict)
    differentiable: bool | None = None

    def __post_init__(self):
        if self.kind == "custom":
            name = self.params.get("name")
            if name not in _CUSTOM:
                raise ContractError(f"unknown custom reward {name!r}")
            expected = _CUSTOM[name][1] is not None
        elif self.kind in DIFFERENTIABLE:
            expected = DIFFERENTIABLE[self.kind]
        else:
            raise ContractError(f"unknown reward kind {self.kind!r}")
        if self.differentiable is None:
            self.differentiable = expected
        elif self.differentiable != expected:
            raise ContractError(f"{self.kind} reward has differentiable={expected}")
        if self.kind == "grid_occupancy" and int(self.params.get("resolution", 1)) < 1:
            raise ContractError("grid resolution must be >= 1")
        if self.kind == "grid_occupancy" and int(self.params.get("group") or 1) < 1:
            raise ContractError("grid group size must be >= 1")
        if self.kind == "weighted_entropy" and not np.isfinite(self.params.get("weights", [0])).all():
            raise ContractError("weights must be finite")

    def to_dict(self):
        return {"kind": self.kind, "params": self.params, "differentiable": self.differentiable}


class Reward:
    """Callable batch reward built from a :class:`RewardSpec`."""

    def __init__(self, spec):
        self.spec = spec
        self.kind = spec.kind
        self.params = spec.params

    @property
    def differentiable(self):
        return self.spec.differentiable

    def __call__(self, x0, c=None):
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        p = self.params
        if self.kind == "mode_distance":
            return mode_distance_reward(x0, p["target"], p.get("scale", 1.0))
        if self.kind == "grid_occupancy":
            # consecutive groups of ``group`` samples are scored together
            g = int(p.get("group") or len(x0))
            out = np.empty(len(x0))
            for i in range(0, len(x0), g):
                out[i:i + g] = grid_occupancy_reward(x0[i:i + g], int(p["resolution"]), p["bbox"])
            return out
        if self.kind == "weighted_entropy":
            probs = soft_proportions(x0, p["anchors"], p.get("temperature", 0.5))
            return weighted_entropy_reward(probs, p["weights"])
        return np.asarray(_CUSTOM[p["name"]][0](x0, c), dtype=np.float64).reshape(len(x0))

    def tensor(self, x0, c=None):
        """Differentiable evaluation on a tensor batch; refuses non-differentiable kinds."""
        if not self.differentiable:
            raise ContractError(
                f"{self.kind} reward is not differentiable; reward backpropagation cannot use it")
        if self.kind == "mode_distance":
            return mode_distance_reward(x0, self.params["target"], self.params.get("scale", 1.0))
        return _CUSTOM[self.params["name"]][1](x0, c)


def make_reward(spec):
    if isinstance(spec, dict):
        spec = RewardSpec(**spec)
    return Reward(spec)


def three_mode_anchors():
    angles = np.deg2rad([90.0, 210.0, 330.0])
    return [[2.0 * np.cos(a), 2.0 * np.sin(a)] for a in angles]


REWARD_PRESETS = {
    "mode-distance": lambda: RewardSpec("mode_distance", {"target": [0.0, 2.0]}),
    "grid-occupancy": lambda: RewardSpec("grid_occupancy",
                                         {"resolution": 4, "bbox": [[-3.0, -3.0], [3.0, 3.0]]}),
    "weighted-entropy": lambda: RewardSpec("weighted_entropy",
                                           {"anchors": three_mode_anchors(),
                                            "weights": list(STRUCTURE_WEIGHTS),
                                            "temperature": 0.5}),
}


def reward_preset(name):
    try:
        return REWARD_PRESETS[name]()
    except KeyError:
        raise ContractError(f"unknown reward preset {name!r}") from None
