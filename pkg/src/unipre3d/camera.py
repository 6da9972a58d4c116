"""Pinhole camera geometry: quantized projection with per-pixel surface
correspondence and depth-map back-projection.

Conventions (stored explicitly, never implied):
  * column vectors; extrinsics are camera_to_world (the stored tag).
  * camera looks down +z in its own frame.
  * u is the column axis (u = x*fx/d + cx, bounded by width);
    v is the row axis (v = y*fy/d + cy, bounded by height).
  * images and feature maps are C x H x W indexed [c, v, u].

The quantizer Q is floor. Depths at or below EPS_DEPTH count as behind the
camera; this also guards the divisions in the projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CameraError, InputError, dim_error
from .pointcloud import PointCloud

EPS_DEPTH = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise CameraError(f"image extent must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        k = np.eye(3)
        k[0, 0], k[1, 1] = self.fx, self.fy
        k[0, 2], k[1, 2] = self.cx, self.cy
        return k


@dataclass(frozen=True)
class Extrinsics:
    """4x4 rigid camera_to_world transform (the only supported convention)."""

    matrix: np.ndarray
    convention: str = "camera_to_world"

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise dim_error("Extrinsics.matrix", m.shape, (4, 4))
        if self.convention != "camera_to_world":
            raise CameraError(f"unsupported extrinsics convention {self.convention!r}")
        if not np.isfinite(m).all():
            raise CameraError("extrinsics contain non-finite values")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise CameraError("extrinsics rotation block is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise CameraError(f"extrinsics rotation determinant {np.linalg.det(r)} != +1")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise CameraError(f"extrinsics last row must be (0,0,0,1), got {m[3]}")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics

    @property
    def world_to_camera(self) -> np.ndarray:
        m = self.extrinsics.matrix
        r, t = m[:3, :3], m[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ t
        return inv

    @property
    def rotation_w2c(self) -> np.ndarray:
        """World-to-camera rotation (the W of the splat projection)."""
        return self.extrinsics.matrix[:3, :3].T

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return self.extrinsics.matrix[:3, 3]

    def to_json_dict(self) -> dict:
        i = self.intrinsics
        return {
            "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
            "width": i.width, "height": i.height,
            "camera_to_world": [float(x) for x in self.extrinsics.matrix.reshape(-1)],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Camera":
        mat = np.asarray(d["camera_to_world"], dtype=np.float64)
        if mat.size != 16:
            raise dim_error("camera_to_world", (mat.size,), (16,))
        return Camera(
            Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"])),
            Extrinsics(mat.reshape(4, 4)),
        )


def save_cameras(path: str | Path, cameras: list[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_json_dict() for c in cameras], indent=1))


def load_cameras(path: str | Path) -> list[Camera]:
    return [Camera.from_json_dict(d) for d in json.loads(Path(path).read_text())]


def quantize(x: np.ndarray) -> np.ndarray:
    """Continuous pixel coordinate -> integer pixel index (floor)."""
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise InputError("quantize: non-finite input")
    return np.floor(x).astype(np.int64)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Extrinsics:
    """Camera at `eye` looking toward `target`; image +y points away from `up`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise CameraError("look_at: eye and target coincide")
    z = fwd / n
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        # looking straight along up; pick an arbitrary horizontal x
        x = np.cross(-np.array([0.0, 1.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return Extrinsics(m)


@dataclass
class PixelCorrespondence:
    """Result of projecting a point cloud through one camera.

    Per point: (u, v) integer pixel, camera depth d, and a validity flag
    (depth > EPS_DEPTH and pixel in bounds). u/v/depth are meaningful only
    where valid. Per pixel: surface_index[v, u] = index of the minimum-depth
    valid point quantizing there (ties to the lowest index), else -1.
    """

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    surface_index: np.ndarray

    @property
    def n_points(self) -> int:
        return self.u.shape[0]


def project_points(points: PointCloud | np.ndarray, cam: Camera) -> PixelCorrespondence:
    """Project world points to quantized pixels with min-depth correspondence."""
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise dim_error("project_points input", pos.shape, ("N", 3))
    if not np.isfinite(pos).all():
        raise InputError("project_points: non-finite point coordinates")

    intr = cam.intrinsics
    w2c = cam.world_to_camera
    p_cam = pos @ w2c[:3, :3].T + w2c[:3, 3]
    d = p_cam[:, 2]
    in_front = d > EPS_DEPTH

    u = np.zeros(len(pos), dtype=np.int64)
    v = np.zeros(len(pos), dtype=np.int64)
    if in_front.any():
        df = d[in_front]
        u[in_front] = quantize(p_cam[in_front, 0] * intr.fx / df + intr.cx)
        v[in_front] = quantize(p_cam[in_front, 1] * intr.fy / df + intr.cy)
    valid = in_front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)

    surface = np.full((intr.height, intr.width), -1, dtype=np.int64)
    idx = np.nonzero(valid)[0]
    if idx.size:
        flat = v[idx] * intr.width + u[idx]
        # lexsort: primary key depth, secondary key point index; first hit per
        # pixel after a stable sort on flat is the min-depth lowest-index point
        order = np.lexsort((idx, d[idx]))
        flat, idx = flat[order], idx[order]
        keep_order = np.argsort(flat, kind="stable")
        flat, idx = flat[keep_order], idx[keep_order]
        first = np.ones(flat.size, dtype=bool)
        first[1:] = flat[1:] != flat[:-1]
        surface.reshape(-1)[flat[first]] = idx[first]

    return PixelCorrespondence(u=u, v=v, depth=d, valid=valid, surface_index=surface)


def backproject_depth(depth: np.ndarray, cam: Camera) -> tuple[PointCloud, np.ndarray]:
    """Lift a depth map to world points, one per pixel-center ray with
    depth > EPS_DEPTH.

    Accepts H x W or 1 x 1 x H x W. Returns (cloud, pixels) where pixels is
    M x 2 integer (u, v) in row-major pixel order over the surviving pixels.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 4 and d.shape[:2] == (1, 1):
        d = d[0, 0]
    if d.ndim != 2:
        raise dim_error("backproject_depth input", np.asarray(depth).shape, (1, 1, "H", "W"))
    intr = cam.intrinsics
    if d.shape != (intr.height, intr.width):
        raise dim_error("depth map", d.shape, (intr.height, intr.width))
    if (d < 0).any() or not np.isfinite(d).all():
        raise InputError("backproject_depth: depths must be finite and >= 0")

    vv, uu = np.nonzero(d > EPS_DEPTH)
    # row-major order is what nonzero returns for (row=v, col=u) indexing.
    # Rays go through pixel centers: re-projection then lands half a pixel
    # from the floor boundary, so the project round trip recovers (u, v)
    # exactly for any camera (a corner ray re-floors to u-1 whenever its
    # few-ulp rounding happens to point down).
    dv = d[vv, uu]
    x = (uu + 0.5 - intr.cx) / intr.fx * dv
    y = (vv + 0.5 - intr.cy) / intr.fy * dv
    p_cam = np.stack([x, y, dv], axis=1)
    c2w = cam.extrinsics.matrix
    pos = p_cam @ c2w[:3, :3].T + c2w[:3, 3]
    pixels = np.stack([uu, vv], axis=1).astype(np.int64)
    return PointCloud(positions=pos), pixels
