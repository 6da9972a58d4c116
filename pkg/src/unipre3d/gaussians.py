"""Gaussian primitives: decoding raw 23-value predictor rows into valid
splats, covariance assembly, and degree-1 spherical-harmonics color.

Raw row layout (23 = 3+1+3+4+12):
  [0:3]   position offset (tanh-bounded, added to the base point)
  [3]     opacity logit
  [4:7]   log-scale offsets around s_unit
  [7:11]  rotation quaternion, identity-biased then normalized
  [11:23] SH coefficients, 3 channels x 4 degree-1 basis functions

An all-zero row decodes to the fixed point: mean = base point, alpha = 0.5,
scale = s_unit, identity rotation, gray color.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionError, InputError, RotationError, dim_error

RAW_WIDTH = 23

# real SH constants, degree 0 and 1
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


@dataclass(frozen=True)
class DecodeConfig:
    offset_bound: float = 0.05   # scene units; keeps splats near their source points
    s_unit: float = 0.03         # scale at raw zero
    s_min: float = 1e-4
    s_max: float = 1.0


@dataclass
class GaussianSet:
    """N primitives: means, per-axis scales, unit quaternions, opacities, SH."""

    means: np.ndarray       # (N, 3)
    scales: np.ndarray      # (N, 3), > 0
    quats: np.ndarray       # (N, 4) unit, (w, x, y, z)
    opacities: np.ndarray   # (N,), in (0, 1)
    sh: np.ndarray          # (N, 3, 4)

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.scales = np.asarray(self.scales, np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, np.float64).reshape(n)
        self.sh = np.asarray(self.sh, np.float64).reshape(n, 3, 4)

    def __len__(self) -> int:
        return self.means.shape[0]

    def validate(self) -> None:
        for name in ("means", "scales", "quats", "opacities", "sh"):
            if not np.isfinite(getattr(self, name)).all():
                raise InputError(f"GaussianSet.{name} contains non-finite values")
        if len(self) == 0:
            return
        if (self.scales <= 0).any():
            raise InputError("GaussianSet.scales must be strictly positive")
        if ((self.opacities <= 0) | (self.opacities >= 1)).any():
            raise InputError("GaussianSet.opacities must lie in (0, 1)")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise InputError("GaussianSet.quats must be unit within 1e-9")

    @staticmethod
    def empty() -> "GaussianSet":
        z = np.zeros
        return GaussianSet(z((0, 3)), z((0, 3)), z((0, 4)), z((0,)), z((0, 3, 4)))


@dataclass
class GaussianGrads:
    """Gradient block matching GaussianSet layout; 23 slots per primitive."""

    d_means: np.ndarray
    d_scales: np.ndarray
    d_quats: np.ndarray
    d_opacities: np.ndarray
    d_sh: np.ndarray

    @staticmethod
    def zeros(n: int) -> "GaussianGrads":
        z = np.zeros
        return GaussianGrads(z((n, 3)), z((n, 3)), z((n, 4)), z((n,)), z((n, 3, 4)))

    def add_(self, other: "GaussianGrads") -> "GaussianGrads":
        self.d_means += other.d_means
        self.d_scales += other.d_scales
        self.d_quats += other.d_quats
        self.d_opacities += other.d_opacities
        self.d_sh += other.d_sh
        return self

    def scale_(self, c: float) -> "GaussianGrads":
        self.d_means *= c
        self.d_scales *= c
        self.d_quats *= c
        self.d_opacities *= c
        self.d_sh *= c
        return self


def _check_raw(raw: np.ndarray, n_base: int) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != RAW_WIDTH:
        raise dim_error("raw Gaussian params", raw.shape, ("N", RAW_WIDTH))
    if raw.shape[0] != n_base:
        raise dim_error("raw rows vs base points", (raw.shape[0],), (n_base,))
    if not np.isfinite(raw).all():
        raise InputError("raw Gaussian params contain NaN/Inf")
    return raw


def decode_gaussians(raw: np.ndarray, base_points: np.ndarray,
                     cfg: DecodeConfig = DecodeConfig()) -> GaussianSet:
    """Map raw predictor rows to a valid GaussianSet anchored at base points."""
    base = np.asarray(base_points, dtype=np.float64)
    if base.ndim != 2 or base.shape[1] != 3:
        raise dim_error("base points", base.shape, ("N", 3))
    raw = _check_raw(raw, base.shape[0])

    means = base + np.tanh(raw[:, 0:3]) * cfg.offset_bound
    opacities = expit(raw[:, 3])
    log_s = np.clip(raw[:, 4:7] + np.log(cfg.s_unit), np.log(cfg.s_min), np.log(cfg.s_max))
    scales = np.exp(log_s)
    q = raw[:, 7:11].copy()
    q[:, 0] += 1.0
    norms = np.linalg.norm(q, axis=1)
    if (norms < 1e-12).any():
        raise RotationError("quaternion collapsed to zero after identity bias")
    quats = q / norms[:, None]
    sh = raw[:, 11:23].reshape(-1, 3, 4).copy()
    return GaussianSet(means, scales, quats, opacities, sh)


def decode_backward(raw: np.ndarray, base_points: np.ndarray, grads: GaussianGrads,
                    cfg: DecodeConfig = DecodeConfig()) -> np.ndarray:
    """d(loss)/d(raw) given d(loss)/d(GaussianSet) at the decoded point.

    The scale clamp passes zero gradient outside the open interval
    (log s_min, log s_max), matching the forward clip exactly.
    """
    base = np.asarray(base_points, dtype=np.float64)
    raw = _check_raw(raw, base.shape[0])
    d = np.zeros_like(raw)

    t = np.tanh(raw[:, 0:3])
    d[:, 0:3] = grads.d_means * cfg.offset_bound * (1.0 - t * t)

    a = expit(raw[:, 3])
    d[:, 3] = grads.d_opacities * a * (1.0 - a)

    log_s_pre = raw[:, 4:7] + np.log(cfg.s_unit)
    inside = (log_s_pre > np.log(cfg.s_min)) & (log_s_pre < np.log(cfg.s_max))
    scales = np.exp(np.clip(log_s_pre, np.log(cfg.s_min), np.log(cfg.s_max)))
    d[:, 4:7] = grads.d_scales * scales * inside

    q = raw[:, 7:11].copy()
    q[:, 0] += 1.0
    norms = np.linalg.norm(q, axis=1)
    qhat = q / norms[:, None]
    # through-normalization Jacobian: (I - q q^T) / |q|
    dot = np.einsum("ni,ni->n", grads.d_quats, qhat)
    d[:, 7:11] = (grads.d_quats - qhat * dot[:, None]) / norms[:, None]

    d[:, 11:23] = grads.d_sh.reshape(-1, 12)
    return d


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternion(s) (w,x,y,z) -> (..., 3, 3) rotation matrices.

    Normalizes internally; a zero quaternion is an error.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norms < 1e-12).any():
        raise RotationError("zero quaternion has no rotation")
    w, x, y, z = (q / norms).T
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for scales s and quaternion(s) q; batched or single."""
    s = np.asarray(s, dtype=np.float64)
    if (s <= 0).any():
        raise InputError("covariance: scales must be positive")
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]          # columns scaled: M = R diag(s)
    return m @ np.swapaxes(m, -1, -2)


def sh_color(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Degree-1 SH color, unclamped (the renderer clamps to [0, 1]).

    sh: (..., 3, 4); view_dir: (..., 3) unit vectors. Per channel c:
    0.5 + C0*sh[c,0] + C1*(-y*sh[c,1] + z*sh[c,2] - x*sh[c,3]).
    """
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
    return (0.5 + SH_C0 * sh[..., 0]
            + SH_C1 * (-y * sh[..., 1] + z * sh[..., 2] - x * sh[..., 3]))
