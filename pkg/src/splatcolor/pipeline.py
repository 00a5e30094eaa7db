"""Stage orchestration shared by the command line and the test harness.

Everything here works on in-memory arrays keyed by view id; file handling
lives in :mod:`splatcolor.cli`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import FeatureConfig, PipelineConfig, PseudoConfig
from .correspondence import FeatureSource, cell_validity, match_features
from .errors import InvalidInputError
from .metrics import psnr, ssim
from .optim import ColorizeResult, FitResult, ReferenceSet, ViewData, colorize, fit_grayscale
from .pseudo import (ColoredPointCloud, SpatialIndex, build_point_cloud, compute_pseudo_colors,
                     linear_scan_nn, query_points)
from .render import DEFAULT_SETTINGS, RenderSettings, render_view
from .scene import SplatScene


def render_all(scene: SplatScene, cameras, settings: RenderSettings = DEFAULT_SETTINGS,
               want_cache: bool = True) -> dict:
    """``{view_id: RenderBuffers}``; depth and accum come from the frozen geometry."""
    return {c.id: render_view(scene, c, want_cache=want_cache, settings=settings) for c in cameras}


def run_fit_gray(scene: SplatScene, cameras, gray_images: dict, masks: dict, cfg: PipelineConfig,
                 use_act: bool = True, renders: dict | None = None) -> FitResult:
    renders = renders or render_all(scene, cameras, cfg.render)
    views = [ViewData(c, gray_images[c.id], masks.get(c.id)) for c in cameras]
    caches = {k: r.cache for k, r in renders.items()}
    return fit_grayscale(scene, views, cfg.gray, use_act=use_act, caches=caches)


# -- pseudo-colors -----------------------------------------------------------------


@dataclass
class PseudoResult:
    cloud: ColoredPointCloud
    radius: float
    maps: dict
    timing: dict = field(default_factory=dict)


def run_pseudo(cameras, renders: dict, color_ids, color_images: dict, masks: dict,
               cfg: PseudoConfig = PseudoConfig(), benchmark_queries: int = 0, seed: int = 0) -> PseudoResult:
    """Lift the colored views into a point cloud and assign pseudo-colors to every other view.

    With ``benchmark_queries > 0`` the same number of query points (sampled
    from the uncolored views, topped up with jittered cloud points) is also
    answered by the linear-scan oracle, and both timings are reported.
    """
    by_id = {c.id: c for c in cameras}
    missing = [i for i in color_ids if i not in by_id]
    if missing:
        raise InvalidInputError(f"colorized view id(s) not in the camera manifest: {', '.join(missing)}")
    if not color_ids:
        raise InvalidInputError("at least one colorized view is required")
    timing = {}
    t0 = time.perf_counter()
    cloud = build_point_cloud(
        [(by_id[i], color_images[i], masks.get(i)) for i in color_ids],
        [renders[i].depth for i in color_ids], cfg.stride, [renders[i].accum for i in color_ids],
        cfg.coverage_threshold)
    t1 = time.perf_counter()
    index = SpatialIndex(cloud.positions)
    t2 = time.perf_counter()
    radius = cfg.policy().resolve(index)
    maps = {}
    for cam in cameras:
        if cam.id in color_ids:
            continue
        r = renders[cam.id]
        maps[cam.id] = compute_pseudo_colors(cam, r.depth, masks.get(cam.id), index, cloud, radius, r.accum,
                                             cfg.coverage_threshold)
    t3 = time.perf_counter()
    timing.update(cloud_points=len(cloud), radius=radius, build_cloud_s=t1 - t0, build_index_s=t2 - t1,
                  query_s=t3 - t2, pseudo_views=len(maps))
    if benchmark_queries > 0:
        timing.update(benchmark(cameras, renders, color_ids, masks, cloud, index, radius, benchmark_queries,
                                cfg.coverage_threshold, seed))
    return PseudoResult(cloud, radius, maps, timing)


def benchmark(cameras, renders, color_ids, masks, cloud, index, radius, n, threshold, seed) -> dict:
    pts = []
    for cam in cameras:
        if cam.id in color_ids:
            continue
        r = renders[cam.id]
        pts.append(query_points(cam, r.depth, masks.get(cam.id), r.accum, threshold)[2])
    q = np.concatenate(pts) if pts else np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    if len(q) >= n:
        q = q[np.sort(rng.choice(len(q), n, replace=False))]
    else:
        extra = cloud.positions[rng.integers(0, len(cloud), n - len(q))]
        extra = extra + rng.normal(0, radius / 2 if radius > 0 else 1e-3, extra.shape)
        q = np.concatenate([q, extra])
    t0 = time.perf_counter()
    idx_a, d_a = index.query(q, radius)
    t1 = time.perf_counter()
    idx_b, d_b = linear_scan_nn(index.points, q, radius)
    t2 = time.perf_counter()
    index_s = t1 - t0
    scan_s = t2 - t1
    return {
        "benchmark_queries": int(len(q)), "benchmark_points": int(len(cloud)),
        "index_query_s": index_s, "linear_scan_s": scan_s,
        "speedup": scan_s / index_s if index_s > 0 else float("inf"),
        "oracle_identical": bool(np.array_equal(idx_a, idx_b) and np.array_equal(d_a, d_b)),
    }


# -- correspondences ---------------------------------------------------------------


def run_correspondence(cameras, gray_images: dict, masks: dict, color_ids, cfg: FeatureConfig = FeatureConfig()) -> dict:
    """Match every uncolored view against the grayscale versions of the references."""
    src = FeatureSource(cfg.source, cfg.directory, cfg.patch, cfg.stride, cfg.downscale)
    refs = [src.get(i, "gray", gray_images.get(i)) for i in color_ids]
    ref_valid = [cell_validity(masks[i], cfg.patch, cfg.stride, cfg.downscale) if masks.get(i) is not None
                 else None for i in color_ids]
    if any(v is None for v in ref_valid):
        ref_valid = None
    out = {}
    for cam in cameras:
        if cam.id in color_ids:
            continue
        target = src.get(cam.id, "gray", gray_images.get(cam.id))
        valid = (cell_validity(masks[cam.id], cfg.patch, cfg.stride, cfg.downscale)
                 if masks.get(cam.id) is not None else None)
        out[cam.id] = match_features(target, refs, valid, ref_valid)
    return out


# -- colorization --------------------------------------------------------------------


def run_colorize(scene: SplatScene, cameras, renders: dict, color_ids, color_images: dict, masks: dict,
                 pseudo_maps: dict, corr_maps: dict, cfg: PipelineConfig, weights=None) -> ColorizeResult:
    weights = weights or cfg.weights
    color_ids = list(color_ids)
    refs = None
    if color_ids and (weights.lambda_tcm > 0 or weights.lambda_cc > 0):
        refs = ReferenceSet.build(color_ids, [color_images[i] for i in color_ids], cfg.features.downscale,
                                  cfg.features.patch, cfg.features.stride)
    views = []
    for cam in cameras:
        colored = cam.id in color_ids
        views.append(ViewData(cam, color_images.get(cam.id) if colored else None, masks.get(cam.id),
                              None if colored else pseudo_maps.get(cam.id),
                              None if colored else corr_maps.get(cam.id)))
    caches = {k: r.cache for k, r in renders.items()}
    return colorize(scene, views, color_ids, refs, weights, cfg.colorize, caches)


# -- evaluation ----------------------------------------------------------------------


def evaluate(scene: SplatScene, truth: SplatScene, cameras, settings: RenderSettings = DEFAULT_SETTINGS,
             act=None) -> dict:
    """Masked PSNR/SSIM of ``scene`` against ``truth`` renders; mask is truth coverage > 0.5."""
    out = {}
    for cam in cameras:
        gt = render_view(truth, cam, settings=settings)
        img = np.clip(render_view(scene, cam, act=act, settings=settings).color, 0, 1)
        mask = gt.accum > 0.5
        out[cam.id] = (psnr(img, np.clip(gt.color, 0, 1), mask), ssim(img, np.clip(gt.color, 0, 1)))
    return out


def mean_psnr(results: dict) -> float:
    return float(np.mean([v[0] for v in results.values()]))
