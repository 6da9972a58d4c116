"""Differentiable Gaussian splatting: tiled forward, brute-force oracle, and
analytic backward over all 23 per-primitive parameter slots.

Math (shared by every path):
  * p_cam = W (mu - cam_center), W = world-to-camera rotation; primitives with
    camera depth z <= EPS_DEPTH are invisible by definition (weight 0).
  * 2D mean m = (fx x/z + cx, fy y/z + cy) against pixel centers (u+0.5, v+0.5).
  * Sigma' = J W Sigma W^T J^T + LAMBDA_LP I,  J the perspective Jacobian,
    Sigma = R S S^T R^T from scales and quaternion.
  * weight  w = min(alpha exp(-G/2), ALPHA_CLAMP),  G = delta^T Sigma'^-1 delta,
    and w = 0 wherever G > G_CUTOFF (the 3-sigma cutoff is part of the math,
    not a tiled-path shortcut, so oracle and tiled renders agree bitwise).
  * front-to-back compositing in (depth, index) order:
    image = sum_i c_i w_i T_i + background * T_final, T_i = prod_{j<i} (1-w_j).

The tiled path culls primitives whose conservative pixel bbox
(radius ceil(3 sqrt(lambda_max)) + 1) misses a tile; every culled
primitive-pixel pair provably has G > G_CUTOFF, i.e. an exact zero weight, so
culling never changes any composited bit. Compositing uses cumsum/cumprod
(strict left folds), which absorb exact-zero terms bitwise; this is what makes
render and oracle_render byte-identical rather than merely close.

Everything computes in float64. Quaternions are normalized inside, and the
backward pass includes the normalization Jacobian, so finite differences on
the raw stored quaternion are valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import EPS_DEPTH, Camera
from .errors import InputError, dim_error
from .gaussians import SH_C0, SH_C1, GaussianGrads, GaussianSet, quat_to_rotmat, sh_color

TILE = 16
LAMBDA_LP = 0.3      # low-pass dilation of Sigma', in px^2
G_CUTOFF = 9.0       # 3-sigma ellipse
ALPHA_CLAMP = 0.99


@dataclass
class RenderOutput:
    image: np.ndarray        # (3, H, W) in [0, 1]
    alpha_map: np.ndarray    # (H, W) accumulated opacity, 1 - final transmittance
    n_contrib: np.ndarray    # (H, W) int, primitives with nonzero weight
    weight_mass: np.ndarray  # (H, W) sum of composited weights (diagnostics)


@dataclass
class _Splats:
    """Per-primitive quantities for visible primitives, sorted front-to-back."""

    index: np.ndarray     # (K,) original primitive index
    p_cam: np.ndarray     # (K, 3)
    mean2d: np.ndarray    # (K, 2) continuous (u, v)
    conic: np.ndarray     # (K, 3) packed inverse covariance (a, b, c)
    radius: np.ndarray    # (K,) conservative pixel radius
    color: np.ndarray     # (K, 3) clamped SH color
    color_raw: np.ndarray # (K, 3) pre-clamp color
    alpha: np.ndarray     # (K,)
    cov3d: np.ndarray     # (K, 3, 3)
    u_mat: np.ndarray     # (K, 2, 3)  J @ W
    rot: np.ndarray       # (K, 3, 3) rotation of the normalized quaternion
    view_dir: np.ndarray  # (K, 3) unit direction camera center -> mean
    view_len: np.ndarray  # (K,)


def _check_background(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.shape != (3,):
        raise dim_error("background", bg.shape, (3,))
    if not np.isfinite(bg).all() or (bg < 0).any() or (bg > 1).any():
        raise InputError(f"background must be RGB in [0,1], got {bg}")
    return bg


def _preprocess(g: GaussianSet, cam: Camera) -> _Splats:
    intr = cam.intrinsics
    w_rot = cam.rotation_w2c
    center = cam.center

    rel = g.means - center
    p_cam = rel @ w_rot.T
    z = p_cam[:, 2]
    front = z > EPS_DEPTH

    idx = np.nonzero(front)[0]
    p = p_cam[idx]
    x, y, zz = p[:, 0], p[:, 1], p[:, 2]

    mean2d = np.stack([intr.fx * x / zz + intr.cx, intr.fy * y / zz + intr.cy], axis=1)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = intr.fx / zz
    jac[:, 0, 2] = -intr.fx * x / (zz * zz)
    jac[:, 1, 1] = intr.fy / zz
    jac[:, 1, 2] = -intr.fy * y / (zz * zz)

    rot = quat_to_rotmat(g.quats[idx])
    m = rot * g.scales[idx][:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    u_mat = jac @ w_rot
    cov2d = u_mat @ cov3d @ np.swapaxes(u_mat, 1, 2)
    cov2d[:, 0, 0] += LAMBDA_LP
    cov2d[:, 1, 1] += LAMBDA_LP

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    tr = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    lam_max = 0.5 * (tr + np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0)))
    radius = np.ceil(3.0 * np.sqrt(lam_max)) + 1.0

    vlen = np.linalg.norm(rel[idx], axis=1)
    view_dir = rel[idx] / vlen[:, None]
    color_raw = sh_color(g.sh[idx], view_dir)
    color = np.clip(color_raw, 0.0, 1.0)

    # visible iff the conservative bbox meets the image and the ellipse is sane
    visible = (det > 0) & (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < intr.width) \
        & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < intr.height)

    keep = np.nonzero(visible)[0]
    order = np.lexsort((idx[keep], zz[keep]))  # depth asc, ties by original index
    keep = keep[order]

    return _Splats(
        index=idx[keep], p_cam=p[keep], mean2d=mean2d[keep], conic=conic[keep],
        radius=radius[keep], color=color[keep], color_raw=color_raw[keep],
        alpha=g.opacities[idx[keep]],
        cov3d=cov3d[keep], u_mat=u_mat[keep], rot=rot[keep],
        view_dir=view_dir[keep], view_len=vlen[keep],
    )


def _weights(sp: _Splats, ks, uu: np.ndarray, vv: np.ndarray):
    """Per (primitive, pixel) weights for primitives `ks` at pixel centers.

    Returns (du, dv, gq, exp_term, pre_w, w); identical expression tree in the
    tiled and oracle paths, which is load-bearing for bitwise equality.
    """
    mu = sp.mean2d[ks]
    du = uu[None, :] - mu[:, 0:1]
    dv = vv[None, :] - mu[:, 1:2]
    con = sp.conic[ks]
    gq = con[:, 0:1] * du * du + 2.0 * con[:, 1:2] * du * dv + con[:, 2:3] * dv * dv
    exp_term = np.exp(-0.5 * gq)
    pre_w = sp.alpha[ks][:, None] * exp_term
    w = np.minimum(pre_w, ALPHA_CLAMP)
    w = np.where(gq <= G_CUTOFF, w, 0.0)
    return du, dv, gq, exp_term, pre_w, w


def _composite(w: np.ndarray, colors: np.ndarray, bg: np.ndarray):
    """Front-to-back compositing of w (K, P) with per-primitive colors (K, 3).

    Returns (image (3,P), alpha (P), mass (P), n_contrib (P), t_excl (K,P),
    t_final (P)). Uses cumprod/cumsum only: strict sequential folds whose
    partials are bitwise-invariant under inserted zero-weight rows.
    """
    k, p = w.shape
    if k == 0:
        img = np.repeat(bg[:, None], p, axis=1)
        return img, np.zeros(p), np.zeros(p), np.zeros(p, dtype=np.int64), \
            np.ones((0, p)), np.ones(p)
    one_minus = 1.0 - w
    t_all = np.cumprod(one_minus, axis=0)
    t_excl = np.empty_like(t_all)
    t_excl[0] = 1.0
    t_excl[1:] = t_all[:-1]
    t_final = t_all[-1]
    wt = w * t_excl
    image = np.empty((3, p))
    for c in range(3):
        image[c] = np.cumsum(colors[:, c:c + 1] * wt, axis=0)[-1]
    image += bg[:, None] * t_final[None, :]
    mass = np.cumsum(wt, axis=0)[-1]
    n_contrib = (w > 0).sum(axis=0)
    return image, 1.0 - t_final, mass, n_contrib, t_excl, t_final


def _pixel_centers(u0: int, u1: int, v0: int, v1: int):
    us = np.arange(u0, u1, dtype=np.float64) + 0.5
    vs = np.arange(v0, v1, dtype=np.float64) + 0.5
    vg, ug = np.meshgrid(vs, us, indexing="ij")
    return ug.reshape(-1), vg.reshape(-1)


def _tile_lists(sp: _Splats, width: int, height: int):
    """Per-tile primitive lists preserving the global sort order.

    Returns (tiles_x, tiles_y, starts, members): members[starts[t]:starts[t+1]]
    are row positions into sp arrays for tile t = ty * tiles_x + tx.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    k = sp.index.size
    if k == 0:
        return tiles_x, tiles_y, np.zeros(tiles_x * tiles_y + 1, np.int64), np.zeros(0, np.int64)

    mu, mv = sp.mean2d[:, 0], sp.mean2d[:, 1]
    r = sp.radius
    tx0 = np.clip(np.floor((mu - r) / TILE).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((mu + r) / TILE).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((mv - r) / TILE).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((mv + r) / TILE).astype(np.int64), 0, tiles_y - 1)

    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    reps = nx * ny
    total = int(reps.sum())
    rows = np.repeat(np.arange(k, dtype=np.int64), reps)
    offsets = np.concatenate([[0], np.cumsum(reps)[:-1]])
    within = np.arange(total, dtype=np.int64) - offsets[rows]
    dx = within % nx[rows]
    dy = within // nx[rows]
    tile_of = (ty0[rows] + dy) * tiles_x + (tx0[rows] + dx)

    order = np.argsort(tile_of, kind="stable")  # stable keeps depth order per tile
    tile_sorted = tile_of[order]
    members = rows[order]
    starts = np.searchsorted(tile_sorted, np.arange(tiles_x * tiles_y + 1))
    return tiles_x, tiles_y, starts, members


def render(g: GaussianSet, cam: Camera, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Tiled front-to-back splatting; bitwise-equal to oracle_render."""
    bg = _check_background(background)
    intr = cam.intrinsics
    h, w_px = intr.height, intr.width
    image = np.empty((3, h, w_px))
    alpha = np.empty((h, w_px))
    mass = np.empty((h, w_px))
    contrib = np.empty((h, w_px), dtype=np.int64)

    sp = _preprocess(g, cam)
    tiles_x, tiles_y, starts, members = _tile_lists(sp, w_px, h)

    for ty in range(tiles_y):
        v0, v1 = ty * TILE, min(h, (ty + 1) * TILE)
        for tx in range(tiles_x):
            u0, u1 = tx * TILE, min(w_px, (tx + 1) * TILE)
            t = ty * tiles_x + tx
            ks = members[starts[t]:starts[t + 1]]
            uu, vv = _pixel_centers(u0, u1, v0, v1)
            *_, w_mat = _weights(sp, ks, uu, vv)
            img, al, ms, nc, _, _ = _composite(w_mat, sp.color[ks], bg)
            sh = (v1 - v0, u1 - u0)
            image[:, v0:v1, u0:u1] = img.reshape(3, *sh)
            alpha[v0:v1, u0:u1] = al.reshape(sh)
            mass[v0:v1, u0:u1] = ms.reshape(sh)
            contrib[v0:v1, u0:u1] = nc.reshape(sh)

    np.clip(image, 0.0, 1.0, out=image)  # shaves roundoff ulps only; see module doc
    return RenderOutput(image=image, alpha_map=alpha, n_contrib=contrib, weight_mass=mass)


def oracle_render(g: GaussianSet, cam: Camera, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Reference renderer: every visible primitive against every pixel, no tiling."""
    bg = _check_background(background)
    intr = cam.intrinsics
    h, w_px = intr.height, intr.width
    sp = _preprocess(g, cam)
    uu, vv = _pixel_centers(0, w_px, 0, h)
    *_, w_mat = _weights(sp, slice(None), uu, vv)
    img, al, ms, nc, _, _ = _composite(w_mat, sp.color, bg)
    image = np.clip(img.reshape(3, h, w_px), 0.0, 1.0)
    return RenderOutput(image=image, alpha_map=al.reshape(h, w_px),
                        n_contrib=nc.reshape(h, w_px), weight_mass=ms.reshape(h, w_px))


def render_backward(g: GaussianSet, cam: Camera, background, grad_image: np.ndarray) -> GaussianGrads:
    """Analytic d<grad_image, image>/d(means, scales, quats, opacities, sh).

    Mirrors render()'s sort order and clamp behavior: weights clamped at
    ALPHA_CLAMP or cut off at G_CUTOFF pass zero gradient; primitives culled by
    the frustum get exactly-zero gradient blocks. Color clamping to [0, 1]
    gates the SH/view-direction path the same way.
    """
    bg = _check_background(background)
    intr = cam.intrinsics
    h, w_px = intr.height, intr.width
    gi = np.asarray(grad_image, dtype=np.float64)
    if gi.shape != (3, h, w_px):
        raise dim_error("grad_image", gi.shape, (3, h, w_px))
    if not np.isfinite(gi).all():
        raise InputError("grad_image contains non-finite values")

    n = len(g)
    out = GaussianGrads.zeros(n)
    sp = _preprocess(g, cam)
    k = sp.index.size
    if k == 0:
        return out

    d_alpha = np.zeros(k)
    d_color = np.zeros((k, 3))
    d_conic = np.zeros((k, 3))
    d_mean2d = np.zeros((k, 2))

    tiles_x, tiles_y, starts, members = _tile_lists(sp, w_px, h)
    for ty in range(tiles_y):
        v0, v1 = ty * TILE, min(h, (ty + 1) * TILE)
        for tx in range(tiles_x):
            u0, u1 = tx * TILE, min(w_px, (tx + 1) * TILE)
            t = ty * tiles_x + tx
            ks = members[starts[t]:starts[t + 1]]
            if ks.size == 0:
                continue
            uu, vv = _pixel_centers(u0, u1, v0, v1)
            du, dv, gq, exp_term, pre_w, w_mat = _weights(sp, ks, uu, vv)
            g_tile = gi[:, v0:v1, u0:u1].reshape(3, -1)

            one_minus = 1.0 - w_mat
            t_all = np.cumprod(one_minus, axis=0)
            t_excl = np.empty_like(t_all)
            t_excl[0] = 1.0
            t_excl[1:] = t_all[:-1]
            t_final = t_all[-1]
            wt = w_mat * t_excl

            colors = sp.color[ks]
            d_color[ks] += wt @ g_tile.T

            # rear[k] = sum_{j>k} c_j w_j T_j + bg T_final, per channel
            num = np.zeros_like(w_mat)  # sum_c g_c * rear_c, per (k, p)
            for c in range(3):
                t_c = colors[:, c:c + 1] * wt
                rev = np.cumsum(t_c[::-1], axis=0)[::-1]
                rear_c = np.empty_like(rev)
                rear_c[:-1] = rev[1:]
                rear_c[-1] = 0.0
                rear_c += bg[c] * t_final[None, :]
                num += g_tile[c][None, :] * rear_c

            gc = colors @ g_tile  # (K, P): sum_c color_kc grad_cp
            d_w = gc * t_excl - num / one_minus
            live = (gq <= G_CUTOFF) & (pre_w < ALPHA_CLAMP)
            d_pre = np.where(live, d_w, 0.0)

            d_alpha[ks] += (d_pre * exp_term).sum(axis=1)
            d_g = d_pre * (-0.5 * pre_w)
            d_conic[ks, 0] += (d_g * du * du).sum(axis=1)
            d_conic[ks, 1] += (d_g * 2.0 * du * dv).sum(axis=1)
            d_conic[ks, 2] += (d_g * dv * dv).sum(axis=1)
            con = sp.conic[ks]
            d_mean2d[ks, 0] += (d_g * (-2.0) * (con[:, 0:1] * du + con[:, 1:2] * dv)).sum(axis=1)
            d_mean2d[ks, 1] += (d_g * (-2.0) * (con[:, 1:2] * du + con[:, 2:3] * dv)).sum(axis=1)

    # ---- per-primitive chains, vectorized over the K kept splats ----
    w_rot = cam.rotation_w2c
    x, y, z = sp.p_cam[:, 0], sp.p_cam[:, 1], sp.p_cam[:, 2]
    fx, fy = intr.fx, intr.fy

    # conic -> Sigma2: dSigma2 = -A dA A with A = conic matrix
    a_mat = np.empty((k, 2, 2))
    a_mat[:, 0, 0] = sp.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = sp.conic[:, 1]
    a_mat[:, 1, 1] = sp.conic[:, 2]
    d_a = np.empty((k, 2, 2))
    d_a[:, 0, 0] = d_conic[:, 0]
    d_a[:, 0, 1] = d_a[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_a[:, 1, 1] = d_conic[:, 2]
    d_sigma2 = -a_mat @ d_a @ a_mat

    # Sigma2 = U Sigma U^T + lambda I
    d_cov3d = np.swapaxes(sp.u_mat, 1, 2) @ d_sigma2 @ sp.u_mat
    d_u = 2.0 * d_sigma2 @ sp.u_mat @ sp.cov3d
    d_jac = d_u @ w_rot.T  # U = J W, W constant

    # J and mean2d depend on p_cam
    d_pcam = np.zeros((k, 3))
    d_pcam[:, 0] = d_mean2d[:, 0] * fx / z + d_jac[:, 0, 2] * (-fx / (z * z))
    d_pcam[:, 1] = d_mean2d[:, 1] * fy / z + d_jac[:, 1, 2] * (-fy / (z * z))
    d_pcam[:, 2] = (-d_mean2d[:, 0] * fx * x - d_mean2d[:, 1] * fy * y) / (z * z) \
        + d_jac[:, 0, 0] * (-fx / (z * z)) + d_jac[:, 1, 1] * (-fy / (z * z)) \
        + d_jac[:, 0, 2] * (2.0 * fx * x / z ** 3) + d_jac[:, 1, 2] * (2.0 * fy * y / z ** 3)
    d_means = d_pcam @ w_rot  # (W^T d)^T rows

    # Sigma = M M^T, M = R diag(s)
    m_mat = sp.rot * g.scales[sp.index][:, None, :]
    d_m = 2.0 * d_cov3d @ m_mat
    d_scales = (d_m * sp.rot).sum(axis=1)  # dM[:, j] = s_j R[:, j]
    d_rot = d_m * g.scales[sp.index][:, None, :]

    # R(q_hat) derivative, q_hat the normalized quaternion
    qn = g.quats[sp.index]
    norms = np.linalg.norm(qn, axis=1)
    qh = qn / norms[:, None]
    qw, qx, qy, qz = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zeros = np.zeros(k)
    dr_dq = np.empty((k, 4, 3, 3))
    dr_dq[:, 0] = 2.0 * np.stack([
        np.stack([zeros, -qz, qy], 1),
        np.stack([qz, zeros, -qx], 1),
        np.stack([-qy, qx, zeros], 1)], axis=1)
    dr_dq[:, 1] = 2.0 * np.stack([
        np.stack([zeros, qy, qz], 1),
        np.stack([qy, -2 * qx, -qw], 1),
        np.stack([qz, qw, -2 * qx], 1)], axis=1)
    dr_dq[:, 2] = 2.0 * np.stack([
        np.stack([-2 * qy, qx, qw], 1),
        np.stack([qx, zeros, qz], 1),
        np.stack([-qw, qz, -2 * qy], 1)], axis=1)
    dr_dq[:, 3] = 2.0 * np.stack([
        np.stack([-2 * qz, -qw, qx], 1),
        np.stack([qw, -2 * qz, qy], 1),
        np.stack([qx, qy, zeros], 1)], axis=1)
    d_qhat = np.einsum("krc,kjrc->kj", d_rot, dr_dq)
    dot = (d_qhat * qh).sum(axis=1, keepdims=True)
    d_quats = (d_qhat - qh * dot) / norms[:, None]

    # color -> SH and view direction, gated by the [0,1] clamp
    clamp_open = (sp.color_raw > 0.0) & (sp.color_raw < 1.0)
    d_raw = np.where(clamp_open, d_color, 0.0)
    dx_dir, dy_dir, dz_dir = sp.view_dir[:, 0], sp.view_dir[:, 1], sp.view_dir[:, 2]
    d_sh = np.zeros((k, 3, 4))
    d_sh[:, :, 0] = SH_C0 * d_raw
    d_sh[:, :, 1] = -SH_C1 * dy_dir[:, None] * d_raw
    d_sh[:, :, 2] = SH_C1 * dz_dir[:, None] * d_raw
    d_sh[:, :, 3] = -SH_C1 * dx_dir[:, None] * d_raw
    sh = g.sh[sp.index]
    d_dir = np.stack([
        (-SH_C1 * sh[:, :, 3] * d_raw).sum(axis=1),
        (-SH_C1 * sh[:, :, 1] * d_raw).sum(axis=1),
        (SH_C1 * sh[:, :, 2] * d_raw).sum(axis=1)], axis=1)
    dot_dir = (d_dir * sp.view_dir).sum(axis=1, keepdims=True)
    d_means += (d_dir - sp.view_dir * dot_dir) / sp.view_len[:, None]

    out.d_means[sp.index] = d_means
    out.d_scales[sp.index] = d_scales
    out.d_quats[sp.index] = d_quats
    out.d_opacities[sp.index] = d_alpha
    out.d_sh[sp.index] = d_sh
    return out
