"""Cross-modal fusion: gathering per-pixel 2D features onto points, the
object-scale feature fusion MLP, and the scene-scale voxel point merge.

Two gather layers exist on purpose: gather_point_features is the plain-NumPy
reference used by tests and diagnostics; the training path routes the same
pixel lookups through the tape (gather_rows on adapted feature rows) so
gradients reach the adaptation block. Points no reference view sees keep
exact-zero features; points seen by several views get the mean of their
per-view gathers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ParameterStore, Tape, Var, add, add_linear_params, apply_linear,
                       concat_channels, concat_rows, gather_rows, relu, row_scale,
                       segment_mean)
from .camera import Camera, PixelCorrespondence, project_points
from .errors import ConfigError, DimensionError, dim_error
from .image_branch import feature_row_index
from .pointcloud import PointCloud

FROM_3D, FROM_2D, MERGED = 0, 1, 2
PROVENANCE_NAMES = ("from_3d", "from_2d", "merged")


@dataclass
class MergedPointSet:
    positions: np.ndarray    # (M, 3)
    features: Var            # (M, C) on the tape
    provenance: np.ndarray   # (M,) in {FROM_3D, FROM_2D, MERGED}
    n_source_2d: int
    n_source_3d: int


def gather_point_features(corr: PixelCorrespondence, feats: np.ndarray) -> np.ndarray:
    """Reference gather: per-point pixel feature, exact zeros where invalid.

    feats is one view's (C, H, W) map aligned with the camera that produced
    corr.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 3:
        raise dim_error("feature map", feats.shape, ("C", "H", "W"))
    out = np.zeros((corr.n_points, feats.shape[0]))
    hit = corr.valid
    out[hit] = feats[:, corr.v[hit], corr.u[hit]].T
    return out


def correspondence_row_indices(points: np.ndarray, cameras: list[Camera],
                               height: int, width: int) -> np.ndarray:
    """(V, N) row indices into stacked adapted rows; -1 where a view misses."""
    idx = np.full((len(cameras), len(points)), -1, dtype=np.int64)
    for view, cam in enumerate(cameras):
        corr = project_points(points, cam)
        hit = corr.valid
        idx[view, hit] = feature_row_index(view, corr.v[hit], corr.u[hit], height, width)
    return idx


def gather_multi_view(tape: Tape | None, rows: Var, view_indices: np.ndarray) -> Var:
    """Mean of nonzero per-view gathers; points hit by no view stay zero."""
    if view_indices.ndim != 2 or view_indices.shape[0] < 1:
        raise dim_error("view_indices", view_indices.shape, ("V>=1", "N"))
    total: Var | None = None
    for view in range(view_indices.shape[0]):
        g = gather_rows(tape, rows, view_indices[view])
        total = g if total is None else add(tape, total, g)
    counts = (view_indices >= 0).sum(axis=0).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    return row_scale(tape, total, inv)


def feature_fusion_params(store: ParameterStore, name: str, c_3d: int, c_2d: int,
                          c_out: int, rng: np.random.Generator) -> None:
    add_linear_params(store, f"{name}.fc1", c_3d + c_2d, c_out, rng)
    add_linear_params(store, f"{name}.fc2", c_out, c_out, rng)


def object_feature_fusion(tape: Tape | None, store: ParameterStore, name: str,
                          f3d: Var, f2d: Var) -> Var:
    """Row-wise concat then a 2-layer MLP back to the 3D width."""
    if f3d.data.shape[0] != f2d.data.shape[0]:
        raise DimensionError(
            f"feature fusion: row counts differ, {f3d.data.shape} vs {f2d.data.shape}")
    x = concat_channels(tape, f3d, f2d)
    h = relu(tape, apply_linear(tape, store, f"{name}.fc1", x))
    return apply_linear(tape, store, f"{name}.fc2", h)


def voxel_keys(positions: np.ndarray, voxel: float) -> np.ndarray:
    """Integer voxel index per point: floor(pos / voxel), (N, 3) int64."""
    return np.floor(np.asarray(positions, np.float64) / voxel).astype(np.int64)


def scene_point_fusion(tape: Tape | None,
                       p2d_positions: np.ndarray, p2d_features: Var,
                       p3d_positions: np.ndarray, p3d_features: Var,
                       voxel: float) -> MergedPointSet:
    """Concatenate pseudo points and backbone points, then voxel-average.

    Output order is canonical (lexicographically sorted voxel keys), so the
    merge is permutation-invariant. Features are averaged on the tape;
    the backward pass therefore distributes each voxel's gradient uniformly
    over its member points. Positions average in plain NumPy (they carry no
    gradient).
    """
    if voxel <= 0:
        raise ConfigError(f"voxel edge must be > 0, got {voxel}")
    p2 = np.asarray(p2d_positions, np.float64).reshape(-1, 3)
    p3 = np.asarray(p3d_positions, np.float64).reshape(-1, 3)
    if p2d_features.data.shape[1] != p3d_features.data.shape[1]:
        raise DimensionError(
            f"scene fusion: feature widths differ, {p2d_features.data.shape} "
            f"vs {p3d_features.data.shape}")
    if p2.shape[0] != p2d_features.data.shape[0]:
        raise dim_error("p2d features", p2d_features.data.shape, (p2.shape[0], "C"))
    if p3.shape[0] != p3d_features.data.shape[0]:
        raise dim_error("p3d features", p3d_features.data.shape, (p3.shape[0], "C"))

    positions = np.concatenate([p2, p3], axis=0)
    feats = concat_rows(tape, p2d_features, p3d_features)
    source_2d = np.zeros(positions.shape[0], dtype=bool)
    source_2d[:p2.shape[0]] = True

    keys = voxel_keys(positions, voxel)
    # canonical segment ids: unique sorted voxel keys
    uniq, seg = np.unique(keys, axis=0, return_inverse=True)
    seg = seg.reshape(-1)  # numpy 2.0 returns (N, 1) for axis-unique inverse
    n_vox = uniq.shape[0]

    counts = np.bincount(seg, minlength=n_vox).astype(np.float64)
    pos_sum = np.zeros((n_vox, 3))
    np.add.at(pos_sum, seg, positions)
    merged_pos = pos_sum / counts[:, None]
    merged_feats = segment_mean(tape, feats, seg, n_vox)

    has_2d = np.zeros(n_vox, dtype=bool)
    has_3d = np.zeros(n_vox, dtype=bool)
    has_2d[seg[source_2d]] = True
    has_3d[seg[~source_2d]] = True
    provenance = np.where(has_2d & has_3d, MERGED, np.where(has_2d, FROM_2D, FROM_3D))

    return MergedPointSet(positions=merged_pos, features=merged_feats,
                          provenance=provenance.astype(np.int8),
                          n_source_2d=int(p2.shape[0]), n_source_3d=int(p3.shape[0]))
