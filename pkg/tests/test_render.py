import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import brute_render, disk_facing, front_camera, random_camera, random_quats, random_scene
from splatcolor.act import ACTParams
from splatcolor.errors import CacheStaleError, InvalidInputError
from splatcolor.render import (RenderSettings, backprop_to_sh, contribution_colors, ray_splat_intersect,
                               render_from_cache, render_view)
from splatcolor.scene import SplatScene
from splatcolor.sh import C0


# -- ray / disk intersection -----------------------------------------------------------


def test_intersect_through_center():
    g = disk_facing([0, 0, 3.0], [0, 0, -1], 0.5, 1.0, [0.5] * 3)[0]
    hit = ray_splat_intersect(g, [0, 0, 0], [0, 0, 1.0])
    assert hit.u == 0 and hit.v == 0 and hit.G == 1 and hit.t == pytest.approx(3.0)


def test_intersect_one_sigma_offset():
    g = disk_facing([0, 0, 3.0], [0, 0, -1], 0.5, 1.0, [0.5] * 3)[0]
    tu = g.frame[:, 0]
    hit = ray_splat_intersect(g, 0.5 * tu, [0, 0, 1.0])
    assert hit.u == pytest.approx(1.0) and abs(hit.v) < 1e-12
    assert hit.G == pytest.approx(np.exp(-0.5))


def test_intersect_misses():
    g = disk_facing([0, 0, 3.0], [0, 0, -1], 0.5, 1.0, [0.5] * 3)[0]
    assert ray_splat_intersect(g, [0, 0, 0], [1.0, 0, 0]) is None  # parallel
    assert ray_splat_intersect(g, [0, 0, 0], [0, 0, -1.0]) is None  # behind


@given(st.integers(0, 2**31))
def test_intersection_lies_on_plane(seed):
    r = np.random.default_rng(seed)
    scene = random_scene(r, 1)
    g = scene[0]
    g = type(g)(g.center, random_quats(r, 1)[0], g.scales, g.opacity, g.sh)
    o = r.normal(size=3) * 3
    d = g.center + r.normal(size=3) * 0.3 - o
    d /= np.linalg.norm(d)
    hit = ray_splat_intersect(g, o, d)
    if hit is None:
        return
    n = g.frame[:, 2]
    p = o + hit.t * d
    assert abs(n @ (p - g.center)) < 1e-9
    assert 0 <= hit.G <= 1
    if hit.u ** 2 + hit.v ** 2 < 1000:
        assert hit.G > 0


# -- forward rendering ----------------------------------------------------------------------


def test_single_opaque_disk():
    bg = (0.2, 0.1, 0.0)
    scene = disk_facing([0, 0, 0], [0, 0, -1], 0.5, 1.0, [0.8] * 3)
    cam = front_camera(33, distance=3.0)
    out = render_view(scene, cam, settings=RenderSettings(background=bg))
    c = out.color[16, 16]
    assert np.allclose(c, 0.99 * 0.8 + np.array(bg) * 0.01, atol=1e-12)
    assert out.depth[16, 16] == pytest.approx(3.0)


def test_empty_pixel_is_background():
    scene = disk_facing([0, 0, 0], [0, 0, -1], 0.05, 1.0, [0.8] * 3)
    bg = (0.3, 0.4, 0.5)
    out = render_view(scene, front_camera(33), settings=RenderSettings(background=bg))
    assert np.allclose(out.color[0, 0], bg) and out.accum[0, 0] == 0 and out.depth[0, 0] == 0


def test_two_stacked_disks():
    a = disk_facing([0, 0, 0], [0, 0, -1], 0.5, 0.6, [0.9, 0.2, 0.1])
    b = disk_facing([0, 0, 0.5], [0, 0, -1], 0.5, 0.7, [0.1, 0.3, 0.8])
    scene = SplatScene(*(np.concatenate([getattr(a, n), getattr(b, n)]) for n in
                         ("centers", "rotations", "log_scales", "opacity_logits", "sh")))
    out = render_view(scene, front_camera(33))
    a1, a2 = 0.6, 0.7
    w1, w2 = a1, a2 * (1 - a1)
    expect = w1 * np.array([0.9, 0.2, 0.1]) + w2 * np.array([0.1, 0.3, 0.8])
    assert np.allclose(out.color[16, 16], expect, atol=1e-6)
    assert out.depth[16, 16] == pytest.approx((w1 * 3.0 + w2 * 3.5) / (w1 + w2))


@pytest.mark.parametrize("seed", range(4))
def test_matches_brute_force_oracle(seed):
    r = np.random.default_rng(seed)
    scene = random_scene(r, 25)
    cam = random_camera(r, 20)
    act = ACTParams(r.uniform(0.8, 1.2, 3), r.uniform(-0.1, 0.1, 3)) if seed % 2 else None
    out = render_view(scene, cam, act=act, want_cache=True, settings=RenderSettings(background=(0.1, 0.2, 0.3)))
    color, depth, accum, lists = brute_render(scene, cam, act, RenderSettings(background=(0.1, 0.2, 0.3)))
    assert np.abs(out.color - color).max() < 1e-10
    assert np.abs(out.depth - depth).max() < 1e-10
    assert np.abs(out.accum - accum).max() < 1e-10
    c = out.cache
    for p in range(0, cam.height * cam.width, 7):
        i, j = divmod(p, cam.width)
        s, e = c.offsets[p], c.offsets[p + 1]
        assert [g for g, _ in lists[(i, j)]] == list(c.gauss[s:e])
        assert np.allclose([w for _, w in lists[(i, j)]], c.weights[s:e], atol=1e-12)


def test_planar_disk_depth_is_ray_plane_distance():
    n = np.array([0.2, -0.1, -1.0])
    scene = disk_facing([0.1, 0, 0.2], n, 0.8, 0.9, [0.5] * 3)
    cam = front_camera(40, distance=3.0)
    out = render_view(scene, cam)
    n = n / np.linalg.norm(n)
    ii, jj = np.nonzero(out.accum > 0)
    dcam = np.stack([(jj - cam.cx) / cam.fx, (ii - cam.cy) / cam.fy, np.ones_like(ii, float)], 1)
    dw = dcam @ cam.R
    t = (n @ (np.array([0.1, 0, 0.2]) - cam.center)) / (dw @ n)  # ray parameter along unnormalized dir = z
    assert np.abs(out.depth[ii, jj] - t).max() < 1e-5


def test_deterministic(rng):
    scene = random_scene(rng, 60)
    cam = random_camera(rng, 32)
    a = render_view(scene, cam, want_cache=True)
    b = render_view(scene, cam, want_cache=True)
    for name in ("color", "depth", "accum"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.array_equal(a.cache.weights, b.cache.weights) and np.array_equal(a.cache.gauss, b.cache.gauss)


def test_cache_only_when_requested(rng):
    scene = random_scene(rng, 5)
    assert render_view(scene, front_camera(16)).cache is None
    assert render_view(scene, front_camera(16), want_cache=True).cache is not None


def test_empty_scene_rejected():
    empty = SplatScene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3, 1)))
    with pytest.raises(InvalidInputError):
        render_view(empty, front_camera(8))


def test_center_sort_matches_exact_without_interpenetration():
    # parallel disks at distinct depths: both orderings agree
    parts = [disk_facing([0.1 * k, 0, 0.3 * k], [0, 0, -1], 0.4, 0.5, [0.2 * k, 0.5, 0.9 - 0.2 * k]) for k in range(4)]
    scene = SplatScene(*(np.concatenate([getattr(p, n) for p in parts]) for n in
                         ("centers", "rotations", "log_scales", "opacity_logits", "sh")))
    cam = front_camera(32)
    a = render_view(scene, cam)
    b = render_view(scene, cam, settings=RenderSettings(sort="center"))
    assert np.abs(a.color - b.color).max() < 1e-12


# -- cache ----------------------------------------------------------------------------


@given(st.integers(0, 2**31))
def test_cache_invariants_and_replay(seed):
    r = np.random.default_rng(seed)
    scene = random_scene(r, int(r.integers(1, 60)))
    cam = random_camera(r, 24)
    out = render_view(scene, cam, want_cache=True)
    c = out.cache
    assert (c.weights > 0).all()
    sums = np.add.reduceat(np.append(c.weights, 0), c.offsets[:-1]) * (np.diff(c.offsets) > 0)
    assert np.allclose(sums, out.accum.ravel(), atol=1e-5)
    assert (out.accum <= 1 + 1e-5).all() and (out.depth[out.accum > 0] >= 0).all()
    assert np.abs(render_from_cache(c, scene.sh) - out.color).max() < 1e-6


def test_zero_sh_gives_half_accum(rng):
    scene = random_scene(rng, 30)
    out = render_view(scene, random_camera(rng, 24), want_cache=True)
    img = render_from_cache(out.cache, np.zeros_like(scene.sh))
    assert np.allclose(img, 0.5 * out.accum[..., None], atol=1e-12)


def test_dc_perturbation_is_local_and_affine(rng):
    scene = random_scene(rng, 30)
    scene.sh[:, :, 0] = 2.0  # keep every color well above the clamp
    scene.sh[:, :, 1:] *= 0.1
    cache = render_view(scene, random_camera(rng, 24), want_cache=True).cache
    g = int(np.bincount(cache.gauss).argmax())
    delta = 0.05
    sh2 = scene.sh.copy()
    sh2[g, 1, 0] += delta
    diff = render_from_cache(cache, sh2) - render_from_cache(cache, scene.sh)
    expect = np.zeros(cache.height * cache.width)
    pix = cache.contrib_pixel()
    sel = cache.gauss == g
    expect[pix[sel]] = cache.weights[sel] * C0 * delta
    assert np.allclose(diff[..., 1].ravel(), expect, atol=1e-12)
    assert np.abs(diff[..., [0, 2]]).max() == 0


@given(st.integers(0, 2**31), st.floats(-2, 2), st.floats(-2, 2))
def test_render_affine_in_sh(seed, a, b):
    r = np.random.default_rng(seed)
    scene = random_scene(r, 20)
    cache = render_view(scene, random_camera(r, 16), want_cache=True).cache
    base = np.zeros_like(scene.sh)
    base[:, :, 0] = 40.0  # far from the clamp for any combination below
    s1 = r.normal(0, 1, scene.sh.shape)
    s2 = r.normal(0, 1, scene.sh.shape)
    f0 = render_from_cache(cache, base)
    lhs = render_from_cache(cache, base + a * s1 + b * s2) - f0
    rhs = a * (render_from_cache(cache, base + s1) - f0) + b * (render_from_cache(cache, base + s2) - f0)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_identity_act_bit_identical(rng):
    scene = random_scene(rng, 30)
    cam = random_camera(rng, 24)
    plain = render_view(scene, cam, want_cache=True)
    ident = render_view(scene, cam, act=ACTParams.identity())
    assert np.array_equal(plain.color, ident.color)
    assert np.array_equal(render_from_cache(plain.cache, scene.sh, act=ACTParams.identity()),
                          render_from_cache(plain.cache, scene.sh))


def test_stale_cache_rejected(rng):
    scene = random_scene(rng, 10)
    cache = render_view(scene, front_camera(16), want_cache=True).cache
    with pytest.raises(CacheStaleError):
        render_from_cache(cache, scene.sh[:5])


def test_sh_degree_limit_matches_truncated_scene(rng):
    scene = random_scene(rng, 20)
    cam = random_camera(rng, 16)
    out = render_view(scene, cam, want_cache=True)
    trunc = render_view(scene.with_degree(1), cam).color
    assert np.abs(render_from_cache(out.cache, scene.sh, sh_degree=1) - trunc).max() < 1e-12
    assert np.abs(render_view(scene, cam, sh_degree=1).color - trunc).max() < 1e-12


# -- backward ---------------------------------------------------------------------------------


def test_backprop_zero_grad(rng):
    scene = random_scene(rng, 20)
    cache = render_view(scene, random_camera(rng, 16), want_cache=True).cache
    gs, gw, gb = backprop_to_sh(cache, scene.sh, np.zeros((16, 16, 3)))
    assert not gs.any() and not gw.any() and not gb.any()


def test_backprop_single_contribution_dc():
    scene = disk_facing([0, 0, 0], [0, 0, -1], 0.5, 0.7, [0.6] * 3, degree=1)
    cam = front_camera(33)
    cache = render_view(scene, cam, want_cache=True).cache
    p = 16 * 33 + 16
    assert cache.offsets[p + 1] - cache.offsets[p] == 1
    w = cache.weights[cache.offsets[p]]
    g = np.zeros((33, 33, 3))
    g[16, 16] = [1.0, -2.0, 0.5]
    gs, _, _ = backprop_to_sh(cache, scene.sh, g)
    assert np.allclose(gs[0, :, 0], w * C0 * g[16, 16], atol=1e-15)


def test_backprop_is_adjoint_of_render(rng):
    # <g, J d> == <J^T g, d> for the (locally linear) map SH -> image
    scene = random_scene(rng, 30)
    scene.sh[:, :, 0] = 3.0
    cache = render_view(scene, random_camera(rng, 20), want_cache=True).cache
    g = rng.normal(size=(20, 20, 3))
    d = rng.normal(size=scene.sh.shape) * 1e-3
    act = ACTParams([1.1, 0.9, 1.3], [0.0, 0.1, -0.1])
    jd = render_from_cache(cache, scene.sh + d, act) - render_from_cache(cache, scene.sh, act)
    gs, _, _ = backprop_to_sh(cache, scene.sh, g, act)
    assert np.isclose((g * jd).sum(), (gs * d).sum(), rtol=1e-8)


def test_backprop_respects_clamp(rng):
    scene = random_scene(rng, 20)
    scene.sh[:, :, 0] = -10.0  # every color clamped to zero
    cache = render_view(scene, random_camera(rng, 16), want_cache=True).cache
    gs, _, _ = backprop_to_sh(cache, scene.sh, rng.normal(size=(16, 16, 3)))
    assert not gs.any()


def test_contribution_colors_match_sh_eval(rng):
    from splatcolor.sh import sh_eval

    scene = random_scene(rng, 15)
    cache = render_view(scene, random_camera(rng, 12), want_cache=True).cache
    cols = contribution_colors(cache, scene.sh)
    pix = cache.contrib_pixel()
    for m in range(0, cache.n_contrib, 13):
        assert np.allclose(cols[m], sh_eval(scene.sh[cache.gauss[m]], cache.dirs[pix[m]]), atol=1e-12)
