import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import front_camera, random_scene
from splatcolor.camera import CameraView, unproject
from splatcolor.errors import EmptyCloudError, InvalidInputError
from splatcolor.pseudo import (ColoredPointCloud, PseudoColorMap, RadiusPolicy, SpatialIndex, build_point_cloud,
                               compute_pseudo_colors, linear_scan_nn, nn_within_radius, pseudo_color_loss)
from splatcolor.render import render_view


def numpy_scan(points, queries, radius):
    """Lexicographic (distance, index) minimum with plain numpy."""
    idx = np.full(len(queries), -1)
    dist = np.full(len(queries), np.inf)
    for q, query in enumerate(queries):
        diff = points - query
        d = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
        j = int(np.lexsort((np.arange(len(d)), d))[0])
        if d[j] <= radius:
            idx[q], dist[q] = j, d[j]
    return idx, dist


def test_nn_examples():
    index = SpatialIndex(np.array([[0, 0, 0], [1, 0, 0.0]]))
    hit = nn_within_radius(index, [0.1, 0, 0], 0.5)
    assert hit.index == 0 and hit.distance == pytest.approx(0.1)
    assert nn_within_radius(index, [5, 5, 5], 0.5) is None


def test_tie_breaks_to_lowest_index():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [1, 0, 0.0]])
    index = SpatialIndex(pts)
    i, d = index.query(np.zeros((1, 3)), 2.0)
    assert i[0] == 0 and d[0] == 1.0
    i, d = index.query(np.array([[1, 0, 0.0]]), 0.5)  # exact duplicate of 0 and 3
    assert i[0] == 0 and d[0] == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_index_equals_both_scans(seed):
    r = np.random.default_rng(seed)
    pts = r.uniform(-1, 1, (3000, 3))
    pts[1000:1200] = pts[:200]  # duplicates
    pts[2000:2050] = np.round(pts[2000:2050], 1)  # grid-snapped near ties
    q = r.uniform(-1.1, 1.1, (400, 3))
    q[:50] = pts[r.integers(0, 3000, 50)]
    q[50:100] = np.round(q[50:100], 1)
    radius = 0.08
    # queries sitting exactly on the radius boundary of some point
    off = r.normal(size=(50, 3))
    off /= np.linalg.norm(off, axis=1, keepdims=True)
    q[100:150] = pts[300:350] + radius * off
    index = SpatialIndex(pts)
    a = index.query(q, radius)
    b = linear_scan_nn(pts, q, radius)
    c = numpy_scan(pts, q, radius)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1])


@given(st.integers(0, 2**31), st.floats(0, 0.5))
def test_index_property(seed, radius):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 60))
    pts = np.round(r.uniform(-1, 1, (n, 3)), int(r.integers(0, 3)))  # coarse grids create many ties
    q = np.round(r.uniform(-1, 1, (30, 3)), 1)
    a = SpatialIndex(pts).query(q, radius)
    c = numpy_scan(pts, q, radius)
    assert np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1])


def test_radius_zero_only_exact_hits():
    pts = np.array([[0, 0, 0], [1, 1, 1.0]])
    i, d = SpatialIndex(pts).query(np.array([[1, 1, 1.0], [0.5, 0, 0]]), 0.0)
    assert list(i) == [1, -1] and d[0] == 0.0


def test_radius_policy():
    pts = np.arange(10.0)[:, None] * [1, 0, 0]
    index = SpatialIndex(pts)
    assert index.median_spacing() == 1.0
    assert RadiusPolicy().resolve(index) == 3.0
    assert RadiusPolicy(radius=0.25).resolve(index) == 0.25
    with pytest.raises(InvalidInputError):
        RadiusPolicy(radius=-1).resolve(index)


# -- point cloud ------------------------------------------------------------------------


def identity_cam():
    return CameraView("ref", 100, 100, 100.0, 100.0, 50.0, 50.0)


def test_single_pixel_cloud():
    cam = identity_cam()
    img = np.zeros((100, 100, 3))
    img[50, 50] = [0.1, 0.2, 0.3]
    mask = np.zeros((100, 100), bool)
    mask[50, 50] = True
    depth = np.full((100, 100), 2.0)
    cloud = build_point_cloud([(cam, img, mask)], [depth])
    assert len(cloud) == 1
    assert np.allclose(cloud.positions[0], [0, 0, 2]) and np.allclose(cloud.colors[0], [0.1, 0.2, 0.3])
    assert tuple(cloud.source_pixel[0]) == (50, 50)


def test_all_background_is_error():
    cam = identity_cam()
    with pytest.raises(EmptyCloudError):
        build_point_cloud([(cam, np.zeros((100, 100, 3)), np.zeros((100, 100), bool))], [np.ones((100, 100))])
    with pytest.raises(InvalidInputError):
        build_point_cloud([(cam, np.zeros((100, 100, 3)), None)], [None])


def test_stride_and_coverage_threshold():
    cam = identity_cam()
    img = np.ones((100, 100, 3))
    depth = np.ones((100, 100))
    accum = np.ones((100, 100))
    accum[:, :50] = 0.3
    cloud = build_point_cloud([(cam, img, None)], [depth], stride=4, accum_maps=[accum])
    assert len(cloud) == 25 * 12
    assert (cloud.source_pixel[:, 1] >= 50).all() and (cloud.source_pixel % 4 == 0).all()


def test_cloud_on_sphere_surface():
    # disks tiling a sphere: lifted points must sit near the analytic surface
    from splatcolor.synth import SynthSpec, build_scenes, make_cameras

    spec = SynthSpec(gaussian_count=3000, protrusion_count=0, resolution=96, view_count=3)
    scene, _ = build_scenes(spec, 0)
    cams = make_cameras(spec)
    views, depths, accums = [], [], []
    for c in cams:
        out = render_view(scene, c)
        views.append((c, np.clip(out.color, 0, 1), out.accum > 0.5))
        depths.append(out.depth)
        accums.append(out.accum)
    cloud = build_point_cloud(views, depths, accum_maps=accums)
    r = np.linalg.norm(cloud.positions, axis=1)
    # a blended hit stays within one disk half-extent (3 sigma) of the surface
    bound = 3 * scene.scales.max()
    assert np.mean(np.abs(r - 1.0) <= 2 * bound) >= 0.99
    assert abs(np.median(r - 1.0)) < 0.25 * bound


# -- pseudo-color maps -------------------------------------------------------------------------


def _two_view_setup(seed=0, size=24):
    r = np.random.default_rng(seed)
    scene = random_scene(r, 80, spread=0.5, scale=(0.1, 0.25), opacity=(0.8, 0.99))
    ref = front_camera(size, eye=[0.3, 0.1, -3.0], view_id="ref")
    tgt = front_camera(size, eye=[-0.4, -0.2, -3.0], view_id="tgt")
    outs = {c.id: render_view(scene, c) for c in (ref, tgt)}
    img = np.clip(outs["ref"].color, 0, 1)
    mask = outs["ref"].accum > 0.5
    cloud = build_point_cloud([(ref, img, mask)], [outs["ref"].depth], accum_maps=[outs["ref"].accum])
    return ref, tgt, outs, img, mask, cloud


def test_self_view_reproduces_reference():
    ref, _, outs, img, mask, cloud = _two_view_setup()
    index = SpatialIndex(cloud.positions)
    pc = compute_pseudo_colors(ref, outs["ref"].depth, mask, index, cloud, RadiusPolicy(), outs["ref"].accum)
    assert np.array_equal(pc.valid, mask)
    assert np.array_equal(pc.rgb[mask], img[mask])
    assert (pc.distance[mask] == 0).all()


def test_matches_per_pixel_brute_force():
    _, tgt, outs, _, _, cloud = _two_view_setup(1)
    index = SpatialIndex(cloud.positions)
    radius = RadiusPolicy().resolve(index)
    depth, accum = outs["tgt"].depth, outs["tgt"].accum
    pc = compute_pseudo_colors(tgt, depth, None, index, cloud, radius, accum)
    for i in range(tgt.height):
        for j in range(tgt.width):
            if depth[i, j] <= 0 or accum[i, j] < 0.5:
                assert not pc.valid[i, j]
                continue
            p = unproject(tgt, [j, i], depth[i, j])
            k, d = numpy_scan(cloud.positions, p[None], radius)
            assert pc.valid[i, j] == (k[0] >= 0)
            if k[0] >= 0:
                assert np.array_equal(pc.rgb[i, j], cloud.colors[k[0]])


def test_radius_monotone_and_limit():
    _, tgt, outs, _, _, cloud = _two_view_setup(2)
    index = SpatialIndex(cloud.positions)
    counts = [compute_pseudo_colors(tgt, outs["tgt"].depth, None, index, cloud, r, outs["tgt"].accum).n_pc
              for r in (1e-12, 0.005, 0.02, 0.05, 0.2, 1.0)]
    assert counts == sorted(counts)
    assert counts[0] == 0 and counts[-1] > 0


def test_deterministic_and_oracle_injection():
    _, tgt, outs, _, _, cloud = _two_view_setup(3)
    index = SpatialIndex(cloud.positions)
    a = compute_pseudo_colors(tgt, outs["tgt"].depth, None, index, cloud, 0.05, outs["tgt"].accum)
    b = compute_pseudo_colors(tgt, outs["tgt"].depth, None, index, cloud, 0.05, outs["tgt"].accum)
    c = compute_pseudo_colors(tgt, outs["tgt"].depth, None, index, cloud, 0.05, outs["tgt"].accum, nn=linear_scan_nn)
    for m in (b, c):
        assert np.array_equal(a.rgb, m.rgb) and np.array_equal(a.valid, m.valid)


# -- loss ---------------------------------------------------------------------------------------


def test_loss_zero_when_equal(rng):
    rgb = rng.uniform(size=(5, 6, 3))
    valid = rng.uniform(size=(5, 6)) > 0.5
    pc = PseudoColorMap(rgb * valid[..., None], valid)
    loss, grad = pseudo_color_loss(pc, rgb * valid[..., None])
    assert loss == 0 and not grad.any()


def test_loss_single_pixel():
    rgb = np.zeros((2, 2, 3))
    rgb[0, 1] = [1, 0, 0]
    valid = np.zeros((2, 2), bool)
    valid[0, 1] = True
    rendered = np.zeros((2, 2, 3))
    rendered[0, 1] = [0.5, 0, 0]
    loss, grad = pseudo_color_loss(PseudoColorMap(rgb, valid), rendered)
    assert loss == 0.5
    assert np.array_equal(grad[0, 1], [-1, 0, 0]) and not grad[[0, 1, 1], [0, 0, 1]].any()


def test_loss_matches_loop(rng):
    rgb = rng.uniform(size=(7, 5, 3))
    valid = rng.uniform(size=(7, 5)) > 0.4
    rendered = rng.uniform(size=(7, 5, 3))
    loss, _ = pseudo_color_loss(PseudoColorMap(rgb * valid[..., None], valid), rendered)
    total, n = 0.0, 0
    for i in range(7):
        for j in range(5):
            if valid[i, j]:
                n += 1
                for c in range(3):
                    total += abs(rgb[i, j, c] - rendered[i, j, c])
    assert abs(loss - total / n) < 1e-7


def test_loss_empty_map_warns():
    pc = PseudoColorMap(np.zeros((3, 3, 3)), np.zeros((3, 3), bool))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        loss, grad = pseudo_color_loss(pc, np.ones((3, 3, 3)))
    assert loss == 0 and not grad.any() and w


def test_cloud_export(tmp_path):
    from splatcolor.scene import read_ply_vertices

    cloud = ColoredPointCloud(np.array([[0, 1, 2.0]]), np.array([[1.0, 0.5, 0]]), np.zeros(1), np.zeros((1, 2)))
    cloud.save_ply(tmp_path / "c.ply")
    v = read_ply_vertices(tmp_path / "c.ply")
    assert v["red"][0] == 255 and v["green"][0] == 128 and v["z"][0] == 2.0
