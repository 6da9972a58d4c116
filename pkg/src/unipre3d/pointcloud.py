"""Point cloud container shared by the geometry, fusion and data modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, dim_error


@dataclass
class PointCloud:
    """N x 3 positions with optional per-point payloads.

    features: dense N x C matrix (model features, fused features, ...).
    colors:   N x 3 RGB in [0, 1], diagnostics only.
    labels:   N int array (generator primitive index), diagnostics/probe only.
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise dim_error("PointCloud.positions", self.positions.shape, ("N", 3))
        if not np.isfinite(self.positions).all():
            raise InputError("PointCloud.positions contains non-finite values")
        n = self.positions.shape[0]
        for name in ("features", "colors", "labels"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr)
            if arr.shape[0] != n:
                raise dim_error(f"PointCloud.{name}", arr.shape, (n, "..."))
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.positions.shape[0]
