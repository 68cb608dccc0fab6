"""Conditional flow matching on the rotation group.

Rotations are plain (..., 3, 3) float64 arrays and tangent vectors are
(..., 3) axis-angle coordinates in the body frame, so exp_{R}(w) = R exp(w)
and log_{R}(Q) = log(R^T Q). Every geometry op is vectorised over leading
axes.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BranchError, ContractError, DimensionError

SMALL_ANGLE = 1e-4
PI_MARGIN = 1e-6
EPS_T = 1e-3
CONVENTIONS = ("derivative", "paper")


# ---------------------------------------------------------------- geometry

def hat(w):
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


def vee(m):
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def check_rotation(r, tol=1e-9):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        raise DimensionError(f"expected (..., 3, 3) rotations, got {r.shape}")
    if not np.isfinite(r).all():
        raise ContractError("rotation has non-finite entries")
    eye = np.eye(3)
    if np.abs(np.swapaxes(r, -1, -2) @ r - eye).max() > tol or np.abs(np.linalg.det(r) - 1).max() > tol:
        raise ContractError("matrix is not a rotation (orthonormal with det +1)")
    return r


def exp_map(w):
    """Rodrigues' formula; Taylor coefficients below the small-angle cutoff."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != 3:
        raise DimensionError(f"expected (..., 3) tangent vectors, got {w.shape}")
    if not np.isfinite(w).all():
        raise ContractError("tangent vector has non-finite entries")
    th2 = np.sum(w * w, axis=-1)
    th = np.sqrt(th2)
    small = th < SMALL_ANGLE
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    k = hat(w)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotation_angle(r):
    """Angle in [0, pi] via atan2, well conditioned at both ends."""
    r = np.asarray(r, dtype=np.float64)
    s = np.linalg.norm(vee(r - np.swapaxes(r, -1, -2)), axis=-1) / 2.0
    c = (np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arctan2(s, c)


def log_map(r):
    """Principal-branch logarithm; refuses angles within 1e-6 of pi."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        raise DimensionError(f"expected (..., 3, 3) rotations, got {r.shape}")
    th = rotation_angle(r)
    if (th > math.pi - PI_MARGIN).any():
        raise BranchError(f"rotation angle {float(th.max()):.9f} within {PI_MARGIN} of pi")
    v = vee(r - np.swapaxes(r, -1, -2)) / 2.0  # sin(th) * axis
    small = th < SMALL_ANGLE
    safe = np.where(small, 1.0, th)
    scale = np.where(small, 1.0 + th ** 2 / 6.0, safe / np.sin(safe))
    out = scale[..., None] * v
    # near pi the antisymmetric part vanishes; take the axis from the symmetric part
    wide = th > 2.5
    if wide.any():
        out[wide] = _log_wide(r[wide], th[wide])
    return out


def _log_wide(r, th):
    c = np.cos(th)
    b = (r + np.swapaxes(r, -1, -2)) / 2.0 - c[:, None, None] * np.eye(3)  # (1-c) n n^T
    i = np.argmax(np.diagonal(b, axis1=-2, axis2=-1), axis=-1)
    col = b[np.arange(len(b)), :, i]
    n = col / np.linalg.norm(col, axis=-1, keepdims=True)
    sign = np.sign(np.sum(n * vee(r - np.swapaxes(r, -1, -2)), axis=-1))
    sign[sign == 0] = 1.0
    return (sign * th)[:, None] * n


def geodesic_distance(r0, r1):
    return rotation_angle(np.swapaxes(r0, -1, -2) @ r1)


def geodesic(r0, r1, t):
    """R_t = R_0 exp(t log(R_0^T R_1)); t broadcasts over the batch."""
    t = np.asarray(t, dtype=np.float64)
    if (t < 0).any() or (t > 1).any():
        raise ContractError("geodesic time outside [0, 1]")
    w = log_map(np.swapaxes(r0, -1, -2) @ r1)
    return r0 @ exp_map(t[..., None] * w)


def target_vector_field(r_t, r1, t, convention="derivative"):
    """log_{R_t}(R_1) scaled by 1/(1-t) (derivative) or 1/t (paper)."""
    if convention not in CONVENTIONS:
        raise ContractError(f"unknown convention {convention!r}; use one of {CONVENTIONS}")
    t = np.asarray(t, dtype=np.float64)
    denom = 1.0 - t if convention == "derivative" else t
    if (denom <= 0).any():
        raise ContractError(f"{convention} convention is singular at t={'1' if convention == 'derivative' else '0'}")
    return log_map(np.swapaxes(r_t, -1, -2) @ r1) / denom[..., None]


def geodesic_velocity_fd(r0, r1, t, h=1e-6):
    """Body-frame time derivative of the geodesic by central differences."""
    t = np.asarray(t, dtype=np.float64)
    lo, hi = np.clip(t - h, 0, 1), np.clip(t + h, 0, 1)
    d = (geodesic(r0, r1, hi) - geodesic(r0, r1, lo)) / (hi - lo)[..., None, None]
    return vee(np.swapaxes(geodesic(r0, r1, t), -1, -2) @ d)


def orthonormalize(r):
    """Nearest rotation in Frobenius norm (polar factor)."""
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def sample_uniform_so3(rng, n=None):
    """Haar-uniform rotations from normalised Gaussian quaternions."""
    shape = () if n is None else (int(n),)
    q = rng.standard_normal(shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def haar_angle_cdf(theta):
    """CDF of the rotation angle under Haar measure, density (1 - cos th) / pi."""
    theta = np.asarray(theta, dtype=np.float64)
    return (theta - np.sin(theta)) / math.pi


# ---------------------------------------------------------------- model

class VectorFieldNet:
    """v_theta(t, R): flattened rotation plus a time embedding -> 3 tangent coords."""

    def __init__(self, hidden=(128, 128), time_dim=16, activation="tanh", time_scale=100.0,
                 seed=0):
        self.hidden, self.time_dim = tuple(int(h) for h in hidden), int(time_dim)
        self.activation, self.time_scale, self.seed = activation, float(time_scale), seed
        self.net = ad.Mlp([9 + self.time_dim, *self.hidden, 3], activation,
                          rng=np.random.default_rng(seed), name="field")

    def parameters(self):
        return self.net.parameters()

    def config(self):
        return {"hidden": list(self.hidden), "time_dim": self.time_dim,
                "activation": self.activation, "time_scale": self.time_scale, "seed": self.seed}

    def __call__(self, r, t, frozen=False):
        r = np.asarray(r, dtype=np.float64).reshape(-1, 9)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(r),))
        temb = ad.sinusoidal_time_embedding(t * self.time_scale, self.time_dim)
        return self.net(Tensor(np.concatenate([r, temb], axis=1)), frozen=frozen)

    def predict(self, r, t):
        return self(r, t, frozen=True).data


def draw_pairs(rng, n, source, target, eps_t=EPS_T):
    """Independent coupling; pairs on the cut locus are redrawn."""
    r0, r1 = source(rng, n), target(rng, n)
    for _ in range(100):
        bad = geodesic_distance(r0, r1) > math.pi - PI_MARGIN
        if not bad.any():
            break
        r0[bad] = source(rng, int(bad.sum()))
    t = rng.uniform(eps_t, 1.0 - eps_t, n)
    return r0, r1, t


def cfm_loss(vnet, r0, r1, t, convention="derivative"):
    """Mean squared Euclidean distance of tangent coordinates to the target field."""
    r0, r1 = np.asarray(r0, dtype=np.float64), np.asarray(r1, dtype=np.float64)
    if r0.ndim != 3 or len(r0) == 0:
        raise ContractError("cfm_loss needs a non-empty batch of rotations")
    r_t = geodesic(r0, r1, t)
    u = target_vector_field(r_t, r1, t, convention)
    diff = vnet(r_t, t) - Tensor(u)
    return (diff * diff).sum(axis=1).mean()


def integrate_flow(field, r0, steps=100, convention="derivative", eps_t=EPS_T):
    """Manifold Euler R <- R exp(dt v(t, R)) with polar re-orthonormalisation.

    ``field`` is a VectorFieldNet or any callable (r, t) -> (n, 3) array. The
    paper convention starts at eps_t to avoid its 1/t singularity.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    predict = field.predict if isinstance(field, VectorFieldNet) else field
    r = np.array(r0, dtype=np.float64)
    single = r.ndim == 2
    r = r.reshape(-1, 3, 3)
    t0 = eps_t if convention == "paper" else 0.0
    ts = np.linspace(t0, 1.0, steps + 1)
    for k in range(steps):
        v = np.asarray(predict(r, np.full(len(r), ts[k])), dtype=np.float64)
        r = orthonormalize(r @ exp_map((ts[k + 1] - ts[k]) * v))
    return r[0] if single else r


def point_mass(r):
    r = check_rotation(r)
    return lambda rng, n: np.broadcast_to(r, (n, 3, 3)).copy()


def train_cfm(vnet, source, target, steps, rng, batch_size=256, lr=3e-3, convention="derivative",
              log=None, lr_floor=0.05):
    """Adam on the CFM loss with cosine decay; returns per-step losses."""
    opt = ad.Adam(vnet.parameters(), lr=lr, weight_decay=0.0)
    losses = []
    for step in range(steps):
        opt.lr = lr * (lr_floor + (1 - lr_floor) * 0.5 * (1 + math.cos(math.pi * step / steps)))
        r0, r1, t = draw_pairs(rng, batch_size, source, target)
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = cfm_loss(vnet, r0, r1, t, convention)
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    return losses


def convention_report(rng, n_pairs=20, ts=(0.1, 0.25, 0.5, 0.75, 0.9)):
    """Max deviation of each convention's field from the geodesic's velocity."""
    r0, r1 = sample_uniform_so3(rng, n_pairs), sample_uniform_so3(rng, n_pairs)
    keep = geodesic_distance(r0, r1) < math.pi - 1e-3
    r0, r1 = r0[keep], r1[keep]
    out = {}
    for conv in CONVENTIONS:
        err = 0.0
        for t in ts:
            tt = np.full(len(r0), t)
            fd = geodesic_velocity_fd(r0, r1, tt)
            u = target_vector_field(geodesic(r0, r1, tt), r1, tt, conv)
            err = max(err, float(np.abs(u - fd).max()))
        out[conv] = err
    return out


def dump_rotations(path, rotations):
    """JSON lines, nine floats row-major per rotation."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in np.asarray(rotations).reshape(-1, 9):
            fh.write(json.dumps([float(v) for v in r]) + "\n")


def load_rotations(path):
    with open(path, encoding="utf-8") as fh:
        return np.array([json.loads(line) for line in fh if line.strip()]).reshape(-1, 3, 3)
