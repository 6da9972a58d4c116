"""Synthetic dataset generation and the reference/render view protocol.

Samples are manufactured from ground-truth Gaussian scenes rendered by this
package's own renderer, so the pre-training objective is exactly attainable:
a perfect predictor reproduces the supervision images.

Object samples: 2-5 colored primitive shapes (spheres, boxes, ellipsoids)
skinned with surfel-like Gaussians, a 1024-point surface cloud, and a ring of
36 cameras. No depth maps. Albedo is banded by primitive kind and modulated
by a fixed-light Lambertian shade, so part of the appearance is predictable
from geometry alone while the per-shape hue still requires the views.

Scene samples: a walled room with furniture boxes, a denser cloud, a 64-pose
camera stream walking a circle, RGB plus depth per pose. Depth is the
camera-space z of the front-most ground-truth Gaussian mean landing in each
pixel (exactly project_points on the means), 0 where no mean lands; the
documented approximation bound for back-projecting that depth onto the
ground-truth surface is max_depth * hypot(1/fx, 1/fy), stored as
SceneSample.depth_tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, Extrinsics, Intrinsics, load_cameras, look_at, project_points, save_cameras
from .errors import DatasetIOError, InputError, SelectionError
from .gaussians import SH_C0, GaussianSet
from .imgio import (load_gaussians_ply, load_points_ply, read_f32, read_ppm,
                    save_gaussians_ply, save_points_ply, write_f32, write_ppm)
from .pointcloud import PointCloud
from .renderer import render

GENERATOR_VERSION = 1


@dataclass
class SceneSample:
    mode: str                      # object | scene
    seed: int
    cloud: PointCloud              # positions + gt colors + primitive labels
    cameras: list[Camera]          # ordered stream, index = stream time
    images: np.ndarray             # (M, 3, H, W) in [0, 1]
    depths: np.ndarray | None      # (M, H, W) meters, scene mode only
    gt_gaussians: GaussianSet
    background: tuple[float, float, float]
    depth_tolerance: float | None = None

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)


@dataclass
class ViewSplit:
    reference: np.ndarray
    render: np.ndarray


# ---------------------------------------------------------------------------
# primitive shapes


@dataclass
class _Shape:
    kind: str              # sphere | box | ellipsoid
    center: np.ndarray
    size: np.ndarray       # radius*(1,1,1) | half-extents | radii
    color: np.ndarray

    def area(self) -> float:
        a, b, c = self.size
        if self.kind == "sphere":
            return float(4.0 * np.pi * a * a)
        if self.kind == "box":
            return float(8.0 * (a * b + a * c + b * c))
        p = 1.6
        return float(4.0 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1 / p))

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Returns (points (n,3), normals (n,3))."""
        if self.kind in ("sphere", "ellipsoid"):
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts = self.center + d * self.size
            nrm = d / self.size
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            return pts, nrm
        # box: choose faces by area
        hx, hy, hz = self.size
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, (n, 2))
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for ax in range(3):
            sel = axis == ax
            others = [i for i in range(3) if i != ax]
            pts[sel, ax] = sign[sel] * self.size[ax]
            pts[sel, others[0]] = uv[sel, 0] * self.size[others[0]]
            pts[sel, others[1]] = uv[sel, 1] * self.size[others[1]]
            nrm[sel, ax] = sign[sel]
        return self.center + pts, nrm


# Appearance is tied to geometry on purpose: albedo bands keyed by primitive
# kind plus a fixed-light Lambertian shade. A predictor can recover the shade
# and the kind prior from the cloud alone; the per-shape hue inside the band
# still has to come from the reference views.
_PALETTE = {
    "sphere": ([0.55, 0.25, 0.15], [0.90, 0.60, 0.45]),     # warm
    "box": ([0.15, 0.35, 0.55], [0.45, 0.70, 0.90]),        # cool
    "ellipsoid": ([0.20, 0.50, 0.20], [0.50, 0.85, 0.50]),  # green
}
_LIGHT = np.array([0.35, 0.25, 0.90]) / np.linalg.norm([0.35, 0.25, 0.90])


def _kind_albedo(kind: str, rng: np.random.Generator) -> np.ndarray:
    lo, hi = _PALETTE[kind]
    return rng.uniform(lo, hi)


def _shade(normals: np.ndarray) -> np.ndarray:
    """Ambient 0.55 plus up to 0.45 diffuse from the fixed light."""
    return 0.55 + 0.45 * np.maximum(normals @ _LIGHT, 0.0)


def _quat_from_z_to(normals: np.ndarray) -> np.ndarray:
    """Unit quaternions rotating +z onto each normal."""
    z = np.array([0.0, 0.0, 1.0])
    w = 1.0 + normals @ z
    xyz = np.cross(np.broadcast_to(z, normals.shape), normals)
    q = np.concatenate([w[:, None], xyz], axis=1)
    # antiparallel normals: 180 degrees about x
    bad = w < 1e-8
    q[bad] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _surfel_gaussians(shapes: list[_Shape], n_total: int, rng: np.random.Generator,
                      thickness: float = 0.25) -> GaussianSet:
    """Skin shapes with flat anisotropic splats oriented along surface normals."""
    areas = np.array([s.area() for s in shapes])
    counts = np.maximum((n_total * areas / areas.sum()).astype(int), 24)
    means, scales, quats, ops, shs = [], [], [], [], []
    for shape, k in zip(shapes, counts):
        pts, nrm = shape.sample_surface(int(k), rng)
        sigma = max(0.75 * np.sqrt(shape.area() / k), 2e-3)
        means.append(pts)
        scales.append(np.tile([sigma, sigma, max(thickness * sigma, 1e-3)], (k, 1)))
        quats.append(_quat_from_z_to(nrm))
        ops.append(rng.uniform(0.70, 0.95, k))
        color = np.clip(shape.color * _shade(nrm)[:, None]
                        + rng.normal(0, 0.03, (k, 3)), 0.05, 0.95)
        sh = np.zeros((k, 3, 4))
        sh[:, :, 0] = (color - 0.5) / SH_C0
        shs.append(sh)
    return GaussianSet(np.concatenate(means), np.concatenate(scales),
                       np.concatenate(quats), np.concatenate(ops), np.concatenate(shs))


def _sample_cloud(shapes: list[_Shape], n_points: int, rng: np.random.Generator) -> PointCloud:
    areas = np.array([s.area() for s in shapes])
    counts = np.floor(n_points * areas / areas.sum()).astype(int)
    counts[0] += n_points - counts.sum()
    pos, col, lab = [], [], []
    for i, (shape, k) in enumerate(zip(shapes, counts)):
        if k == 0:
            continue
        pts, nrm = shape.sample_surface(int(k), rng)
        pos.append(pts)
        col.append(shape.color * _shade(nrm)[:, None])
        lab.append(np.full(k, i, dtype=np.int64))
    return PointCloud(positions=np.concatenate(pos), colors=np.concatenate(col),
                      labels=np.concatenate(lab))


def _ring_camera(angle: float, elevation: float, radius: float, image_size: int,
                 target=(0.0, 0.0, 0.0), focal_factor: float = 1.2) -> Camera:
    eye = np.array([radius * np.cos(angle) * np.cos(elevation),
                    radius * np.sin(angle) * np.cos(elevation),
                    radius * np.sin(elevation)])
    intr = Intrinsics(fx=focal_factor * image_size, fy=focal_factor * image_size,
                      cx=image_size / 2.0, cy=image_size / 2.0,
                      width=image_size, height=image_size)
    return Camera(intr, look_at(eye, target))


def generate_object_sample(seed: int, n_points: int = 1024, n_cameras: int = 36,
                           image_size: int = 64, n_gaussians: int = 600,
                           background=(1.0, 1.0, 1.0)) -> SceneSample:
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(2, 6))
    shapes = []
    for _ in range(n_shapes):
        kind = rng.choice(["sphere", "box", "ellipsoid"])
        center = rng.uniform(-0.45, 0.45, 3)
        if kind == "sphere":
            size = np.full(3, rng.uniform(0.15, 0.35))
        else:
            size = rng.uniform(0.12, 0.35, 3)
        shapes.append(_Shape(kind, center, size, _kind_albedo(kind, rng)))

    gt = _surfel_gaussians(shapes, n_gaussians, rng)
    cloud = _sample_cloud(shapes, n_points, rng)
    cams = [_ring_camera(2.0 * np.pi * i / n_cameras, np.deg2rad(20.0), 2.6, image_size)
            for i in range(n_cameras)]
    images = np.stack([render(gt, cam, background).image for cam in cams])
    return SceneSample(mode="object", seed=seed, cloud=cloud, cameras=cams,
                       images=images, depths=None, gt_gaussians=gt,
                       background=tuple(background))


def generate_scene_sample(seed: int, n_points: int = 20000, n_cameras: int = 64,
                          image_size: int = 64, n_gaussians: int = 1600,
                          background=(1.0, 1.0, 1.0), room_extent: float = 2.0,
                          wall_height: float = 2.4) -> SceneSample:
    rng = np.random.default_rng(seed)
    e, hw = room_extent, wall_height / 2.0
    floor = rng.uniform([0.35, 0.25, 0.18], [0.55, 0.42, 0.30])   # brownish
    wall = lambda: rng.uniform([0.60, 0.55, 0.45], [0.90, 0.85, 0.75])  # pale
    shapes = [
        # floor and four walls, modeled as thin boxes
        _Shape("box", np.array([0.0, 0.0, -0.01]), np.array([e, e, 0.01]), floor),
        _Shape("box", np.array([e + 0.01, 0.0, hw]), np.array([0.01, e, hw]), wall()),
        _Shape("box", np.array([-e - 0.01, 0.0, hw]), np.array([0.01, e, hw]), wall()),
        _Shape("box", np.array([0.0, e + 0.01, hw]), np.array([e, 0.01, hw]), wall()),
        _Shape("box", np.array([0.0, -e - 0.01, hw]), np.array([e, 0.01, hw]), wall()),
    ]
    for _ in range(int(rng.integers(2, 5))):
        half = np.array([rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4),
                         rng.uniform(0.2, 0.6)])
        cxy = rng.uniform(-e + 0.8, e - 0.8, 2)
        shapes.append(_Shape("box", np.array([cxy[0], cxy[1], half[2]]), half,
                             _kind_albedo("box", rng)))

    gt = _surfel_gaussians(shapes, n_gaussians, rng)
    cloud = _sample_cloud(shapes, n_points, rng)

    cams = []
    intr = Intrinsics(fx=1.0 * image_size, fy=1.0 * image_size,
                      cx=image_size / 2.0, cy=image_size / 2.0,
                      width=image_size, height=image_size)
    for t in range(n_cameras):
        ang = 2.0 * np.pi * t / n_cameras
        eye = np.array([1.1 * np.cos(ang), 1.1 * np.sin(ang), 1.4])
        target = np.array([e * np.cos(ang), e * np.sin(ang), 1.1])
        cams.append(Camera(intr, look_at(eye, target)))

    images = np.stack([render(gt, cam, background).image for cam in cams])
    depths = np.zeros((n_cameras, image_size, image_size))
    max_depth = 0.0
    for t, cam in enumerate(cams):
        corr = project_points(gt.means, cam)
        idx = corr.surface_index
        hit = idx >= 0
        depths[t][hit] = corr.depth[idx[hit]]
        if hit.any():
            max_depth = max(max_depth, float(depths[t][hit].max()))
    tol = max_depth * float(np.hypot(1.0 / intr.fx, 1.0 / intr.fy))
    return SceneSample(mode="scene", seed=seed, cloud=cloud, cameras=cams,
                       images=images, depths=depths, gt_gaussians=gt,
                       background=tuple(background), depth_tolerance=tol)


# ---------------------------------------------------------------------------
# view protocol


def select_views(sample: SceneSample | int, mode: str, seed: int, v_ref: int | None = None,
                 v_rend: int | None = None, bins: int = 8, interval: int = 5,
                 restriction: bool = True) -> ViewSplit:
    """Reference/render split over the camera stream.

    Object mode: v_ref random references (default 1) and v_rend distinct
    non-reference renders (default 4).

    Scene mode: the stream is divided into `bins` contiguous bins with one
    reference drawn per bin (v_ref defaults to bins and must equal it);
    renders are drawn round-robin over bins, each within stream distance
    < interval of its bin's reference when restriction is on, never equal to
    any reference, all distinct. Raises SelectionError when infeasible.
    """
    n = sample if isinstance(sample, int) else sample.n_cameras
    rng = np.random.default_rng(seed)
    if mode == "object":
        v_ref = 1 if v_ref is None else v_ref
        v_rend = 4 if v_rend is None else v_rend
        if v_ref + v_rend > n:
            raise SelectionError(f"need {v_ref}+{v_rend} views, stream has {n}")
        refs = rng.choice(n, size=v_ref, replace=False)
        rest = np.setdiff1d(np.arange(n), refs)
        rend = rng.choice(rest, size=v_rend, replace=False)
        return ViewSplit(reference=np.sort(refs), render=np.sort(rend))
    if mode != "scene":
        raise InputError(f"unknown mode {mode!r}")

    v_ref = bins if v_ref is None else v_ref
    v_rend = 8 if v_rend is None else v_rend
    if v_ref != bins:
        raise SelectionError(f"scene protocol draws 1 reference per bin: v_ref {v_ref} != bins {bins}")
    if n % bins != 0:
        raise SelectionError(f"stream length {n} not divisible into {bins} bins")
    size = n // bins
    refs = np.array([int(rng.integers(b * size, (b + 1) * size)) for b in range(bins)])

    ref_set = set(refs.tolist())
    chosen: list[int] = []
    for i in range(v_rend):
        b = i % bins
        if restriction:
            lo, hi = refs[b] - (interval - 1), refs[b] + (interval - 1)
            cands = [r for r in range(max(0, lo), min(n, hi + 1))
                     if r not in ref_set and r not in chosen]
        else:
            cands = [r for r in range(n) if r not in ref_set and r not in chosen]
        if not cands:
            raise SelectionError(
                f"no render candidate for bin {b} (reference {refs[b]}, interval {interval})")
        chosen.append(int(rng.choice(cands)))
    return ViewSplit(reference=refs, render=np.array(chosen))


# ---------------------------------------------------------------------------
# disk layout: one directory per sample


def save_sample(directory: str | Path, sample: SceneSample) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create {d}: {exc}") from exc
    h, w = sample.images.shape[2], sample.images.shape[3]
    manifest = {
        "mode": sample.mode, "seed": sample.seed, "generator_version": GENERATOR_VERSION,
        "n_cameras": sample.n_cameras, "image_size": [h, w],
        "n_points": len(sample.cloud), "background": list(sample.background),
        "depth_tolerance": sample.depth_tolerance,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    save_points_ply(d / "points.ply", sample.cloud)
    save_cameras(d / "cameras.json", sample.cameras)
    save_gaussians_ply(d / "gaussians.ply", sample.gt_gaussians)
    for i in range(sample.n_cameras):
        write_ppm(d / f"img_{i:04d}.ppm", sample.images[i])
        if sample.depths is not None:
            write_f32(d / f"depth_{i:04d}", sample.depths[i], kind="depth")


def load_sample(directory: str | Path) -> SceneSample:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except OSError as exc:
        raise DatasetIOError(f"cannot read sample manifest in {d}: {exc}") from exc
    cloud = load_points_ply(d / "points.ply")
    cams = load_cameras(d / "cameras.json")
    gt = load_gaussians_ply(d / "gaussians.ply")
    images = np.stack([read_ppm(d / f"img_{i:04d}.ppm") for i in range(manifest["n_cameras"])])
    depths = None
    if manifest["mode"] == "scene":
        depths = np.stack([read_f32(d / f"depth_{i:04d}")[0]
                           for i in range(manifest["n_cameras"])])
    return SceneSample(mode=manifest["mode"], seed=manifest["seed"], cloud=cloud,
                       cameras=cams, images=images, depths=depths, gt_gaussians=gt,
                       background=tuple(manifest["background"]),
                       depth_tolerance=manifest.get("depth_tolerance"))
