"""Splatting forward against closed forms and the brute-force oracle;
backward against finite differences and exact-zero guarantees."""

import numpy as np
import pytest

from unipre3d.camera import Camera, Extrinsics, Intrinsics
from unipre3d.errors import DimensionError, InputError
from unipre3d.gaussians import SH_C0, GaussianSet
from unipre3d.gradcheck import random_scene, render_fd_report
from unipre3d.renderer import (
    ALPHA_CLAMP, G_CUTOFF, LAMBDA_LP, oracle_render, render, render_backward,
)

BLOCKS = ("d_means", "d_scales", "d_quats", "d_opacities", "d_sh")


def front_camera(width=16, height=16, f=None):
    f = 1.2 * width if f is None else f
    intr = Intrinsics(fx=f, fy=f, cx=width / 2.0 + 0.5, cy=height / 2.0 + 0.5,
                      width=width, height=height)
    return Camera(intr, Extrinsics(np.eye(4)))


def dc_gray_set(n=1, z=2.0, scale=0.1, opacity=0.7, color=(0.5, 0.5, 0.5)):
    """Isotropic splats on the optical axis with view-independent color."""
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = (np.asarray(color) - 0.5) / SH_C0
    return GaussianSet(
        means=np.tile([0.0, 0.0, z], (n, 1)),
        scales=np.full((n, 3), scale),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacities=np.full(n, opacity),
        sh=sh,
    )


def empty_set():
    return GaussianSet(means=np.zeros((0, 3)), scales=np.zeros((0, 3)),
                       quats=np.zeros((0, 4)), opacities=np.zeros(0),
                       sh=np.zeros((0, 3, 4)))


def test_empty_scene_renders_background():
    cam = front_camera()
    bg = (0.2, 0.5, 0.8)
    out = render(empty_set(), cam, bg)
    for c in range(3):
        np.testing.assert_array_equal(out.image[c], np.full((16, 16), bg[c]))
    np.testing.assert_array_equal(out.alpha_map, 0.0)
    np.testing.assert_array_equal(out.n_contrib, 0)


def test_single_splat_center_pixel_closed_form():
    # opaque splat on the optical axis: weight clamps to 0.99 at the center
    cam = front_camera()
    g = dc_gray_set(opacity=1.0)
    out = render(g, cam, background=(1.0, 1.0, 1.0))
    expect = 0.5 * ALPHA_CLAMP + 1.0 * (1.0 - ALPHA_CLAMP)
    np.testing.assert_allclose(out.image[:, 8, 8], expect, atol=1e-12)
    np.testing.assert_allclose(out.alpha_map[8, 8], ALPHA_CLAMP, atol=1e-12)
    assert out.n_contrib[8, 8] == 1


def test_single_splat_falloff_matches_ewa_formula():
    # independent recomputation: isotropic splat, identity pose, so
    # Sigma' = ((f s / z)^2 + lambda) I and G = |d|^2 / sigma2
    width, z, s, alpha = 16, 2.0, 0.1, 0.7
    f = 1.2 * width
    cam = front_camera(width, width, f)
    g = dc_gray_set(z=z, scale=s, opacity=alpha, color=(0.9, 0.3, 0.1))
    bg = (0.0, 0.25, 1.0)
    out = render(g, cam, bg)

    sigma2 = (f * s / z) ** 2 + LAMBDA_LP
    color = np.array([0.9, 0.3, 0.1])
    for (u, v) in [(8, 8), (9, 8), (8, 10), (11, 11), (5, 7)]:
        du = u + 0.5 - cam.intrinsics.cx
        dv = v + 0.5 - cam.intrinsics.cy
        gq = (du * du + dv * dv) / sigma2
        w = alpha * np.exp(-0.5 * gq) if gq <= G_CUTOFF else 0.0
        expect = color * w + np.asarray(bg) * (1.0 - w)
        np.testing.assert_allclose(out.image[:, v, u], expect, atol=1e-12)

    # beyond the 3-sigma cutoff the weight is an exact zero, not merely tiny
    u, v = 12, 8  # du = 4, G = 16 / sigma2 > 9
    assert (4.0 ** 2) / sigma2 > G_CUTOFF
    np.testing.assert_array_equal(out.image[:, v, u], bg)
    assert out.n_contrib[v, u] == 0


def test_equal_depth_ties_break_by_index():
    cam = front_camera()
    bg = np.array([0.1, 0.1, 0.1])
    ca, cb = np.array([0.9, 0.1, 0.1]), np.array([0.1, 0.2, 0.9])
    alpha = 0.6

    def pair(first, second):
        g = dc_gray_set(n=2, opacity=alpha)
        g.sh[0, :, 0] = (first - 0.5) / SH_C0
        g.sh[1, :, 0] = (second - 0.5) / SH_C0
        return g

    out_ab = render(pair(ca, cb), cam, bg)
    out_ba = render(pair(cb, ca), cam, bg)
    expect_ab = ca * alpha + cb * alpha * (1 - alpha) + bg * (1 - alpha) ** 2
    expect_ba = cb * alpha + ca * alpha * (1 - alpha) + bg * (1 - alpha) ** 2
    np.testing.assert_allclose(out_ab.image[:, 8, 8], expect_ab, atol=1e-12)
    np.testing.assert_allclose(out_ba.image[:, 8, 8], expect_ba, atol=1e-12)
    assert abs(expect_ab[0] - expect_ba[0]) > 0.1  # order genuinely matters


@pytest.mark.parametrize("height,width", [(16, 16), (32, 48), (17, 33)])
def test_oracle_equivalence_is_bitwise(height, width):
    for seed in range(6):
        g, cam, bg, _ = random_scene(seed, n_gaussians=40, height=height, width=width,
                                     fd_safe=False)
        a = render(g, cam, bg)
        b = oracle_render(g, cam, bg)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.alpha_map.tobytes() == b.alpha_map.tobytes()
        assert a.weight_mass.tobytes() == b.weight_mass.tobytes()
        np.testing.assert_array_equal(a.n_contrib, b.n_contrib)


def test_mass_plus_transmittance_conserved():
    # sum_i w_i T_i == 1 - prod_i (1 - w_i) == accumulated alpha
    for seed in range(5):
        g, cam, bg, _ = random_scene(seed, n_gaussians=64, height=24, width=24,
                                     fd_safe=False)
        out = render(g, cam, bg)
        np.testing.assert_allclose(out.weight_mass, out.alpha_map, atol=1e-9)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert out.alpha_map.min() >= 0.0 and out.alpha_map.max() <= 1.0


def test_render_deterministic():
    g, cam, bg, _ = random_scene(11, n_gaussians=32, fd_safe=False)
    assert render(g, cam, bg).image.tobytes() == render(g, cam, bg).image.tobytes()


def test_zero_grad_image_gives_zero_grads():
    g, cam, bg, _ = random_scene(3)
    grads = render_backward(g, cam, bg, np.zeros((3, 16, 16)))
    for name in BLOCKS:
        np.testing.assert_array_equal(getattr(grads, name), 0.0)


def test_culled_primitives_get_exact_zero_blocks():
    cam = front_camera()
    g = dc_gray_set(n=3, opacity=0.8)
    g.means[1] = [0.0, 0.0, -2.0]   # behind the camera
    g.means[2] = [50.0, 0.0, 2.0]   # far outside the frustum
    grads = render_backward(g, cam, (1, 1, 1), np.ones((3, 16, 16)))
    for name in BLOCKS:
        arr = getattr(grads, name)
        np.testing.assert_array_equal(arr[1], 0.0)
        np.testing.assert_array_equal(arr[2], 0.0)
    # the visible one does receive gradient (quats excluded: isotropic splats
    # have zero rotation gradient by symmetry)
    assert grads.d_opacities[0] != 0.0
    assert np.abs(grads.d_sh[0]).max() > 0.0

    # and the culled rows do not perturb the image at all
    solo = dc_gray_set(n=1, opacity=0.8)
    assert render(g, cam, (1, 1, 1)).image.tobytes() == \
        render(solo, cam, (1, 1, 1)).image.tobytes()


def test_alpha_clamp_gates_gradient():
    # opacity 1 at the center pixel: w clamps at 0.99, so d/d alpha there is 0
    cam = front_camera()
    g = dc_gray_set(opacity=1.0)
    sel = np.zeros((3, 16, 16))
    sel[:, 8, 8] = 1.0
    grads = render_backward(g, cam, (1, 1, 1), sel)
    assert grads.d_opacities[0] == 0.0
    # a neighboring pixel is unclamped and does produce opacity gradient
    sel[:, 8, 8] = 0.0
    sel[:, 8, 9] = 1.0
    grads = render_backward(g, cam, (1, 1, 1), sel)
    assert grads.d_opacities[0] != 0.0


def test_backward_deterministic():
    g, cam, bg, w_img = random_scene(7, n_gaussians=24, fd_safe=False)
    a = render_backward(g, cam, bg, w_img)
    b = render_backward(g, cam, bg, w_img)
    for name in BLOCKS:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_backward_matches_fd_smoke():
    rep = render_fd_report(0)
    assert rep["ok"]
    for name in ("means", "scales", "quats", "opacities", "sh"):
        assert rep["blocks"][name]["worst_ratio"] <= 1.0


def test_input_validation():
    g, cam, bg, _ = random_scene(0)
    with pytest.raises(DimensionError):
        render(g, cam, background=(1.0, 1.0))
    with pytest.raises(InputError):
        render(g, cam, background=(1.5, 0.0, 0.0))
    with pytest.raises(DimensionError):
        render_backward(g, cam, bg, np.zeros((3, 8, 8)))
    with pytest.raises(InputError):
        render_backward(g, cam, bg, np.full((3, 16, 16), np.nan))
