"""Pixel losses and metrics: channel-summed MSE, foreground/background
weighted object loss, silhouette masks from point projection, PSNR.

Normalization conventions (load-bearing, tested):
  * mse_loss sums squared error over channels inside the per-pixel term and
    divides by V*H*W (pixel count, not element count).
  * weighted_object_loss normalizes each partition by its own pixel count;
    an empty partition contributes exactly zero.
  * psnr uses per-element MSE (channels counted) and caps at 100 dB.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .camera import Camera, project_points
from .errors import InputError, dim_error
from .pointcloud import PointCloud

PSNR_CAP_DB = 100.0


@dataclass
class FgMask:
    mask: np.ndarray      # (H, W) bool
    dilation_px: int


def _check_pair(rendered: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise dim_error("rendered vs gt", r.shape, g.shape)
    if r.ndim != 4 or r.shape[1] != 3:
        raise dim_error("image stack", r.shape, ("V", 3, "H", "W"))
    return r, g


def mse_loss(rendered: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Channel-summed squared error over V*H*W pixels; returns (loss, d/d rendered)."""
    r, g = _check_pair(rendered, gt)
    v, _, h, w = r.shape
    diff = r - g
    denom = v * h * w
    loss = float((diff * diff).sum() / denom)
    return loss, 2.0 * diff / denom


def weighted_object_loss(rendered: np.ndarray, gt: np.ndarray, masks: np.ndarray,
                         w_fg: float = 4.0, w_bg: float = 1.0
                         ) -> tuple[float, np.ndarray]:
    """w_fg * MSE(fg pixels) + w_bg * MSE(bg pixels), per-partition pixel counts.

    masks: (V, H, W) bool, True = foreground.
    """
    r, g = _check_pair(rendered, gt)
    m = np.asarray(masks)
    if m.shape != (r.shape[0], r.shape[2], r.shape[3]):
        raise dim_error("fg masks", m.shape, (r.shape[0], r.shape[2], r.shape[3]))
    if m.dtype != bool:
        raise InputError(f"fg masks must be boolean, got dtype {m.dtype}")
    diff = r - g
    sq = (diff * diff).sum(axis=1)  # channel-summed, (V, H, W)
    grad = np.zeros_like(r)
    loss = 0.0
    for weight, sel in ((w_fg, m), (w_bg, ~m)):
        count = int(sel.sum())
        if count == 0:
            continue
        loss += weight * float(sq[sel].sum()) / count
        grad += (weight / count) * (2.0 * diff) * sel[:, None, :, :]
    return loss, grad


def compute_fg_mask(points: PointCloud | np.ndarray, cam: Camera,
                    dilation_px: int = 2) -> FgMask:
    """Pixels hit by projected points, dilated by a square of radius dilation_px."""
    corr = project_points(points, cam)
    intr = cam.intrinsics
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    hit = corr.valid
    mask[corr.v[hit], corr.u[hit]] = True
    if dilation_px > 0 and mask.any():
        size = 2 * dilation_px + 1
        mask = binary_dilation(mask, structure=np.ones((size, size), dtype=bool))
    return FgMask(mask=mask, dilation_px=dilation_px)


def psnr(rendered: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise dim_error("psnr inputs", r.shape, g.shape)
    mse = float(((r - g) ** 2).mean()) if r.size else 0.0
    if mse == 0.0:
        return PSNR_CAP_DB
    if not np.isfinite(mse):
        return float("-inf")
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))
