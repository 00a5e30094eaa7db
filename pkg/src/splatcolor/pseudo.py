"""Pseudo-color supervision from reference views.

Reference pixels are lifted to 3D with the grayscale model's depth. Every
foreground pixel of another view is lifted the same way and takes the color of
the closest lifted reference point, if one lies within the search radius.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .camera import CameraView, unproject
from .errors import DimensionError, EmptyCloudError, InvalidInputError
from .scene import save_point_cloud_ply

logger = logging.getLogger(__name__)

COVERAGE_THRESHOLD = 0.5
DEFAULT_RADIUS_FACTOR = 3.0


@dataclass
class ColoredPointCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    source_view: np.ndarray  # (N,) index into the reference list
    source_pixel: np.ndarray  # (N, 2) row, col
    view_ids: tuple = ()

    def __len__(self) -> int:
        return len(self.positions)

    def save_ply(self, path) -> None:
        save_point_cloud_ply(path, self.positions, self.colors)


@dataclass(frozen=True)
class RadiusPolicy:
    """Absolute radius in world units, or a multiple of the median NN spacing."""

    radius: float | None = None
    factor: float = DEFAULT_RADIUS_FACTOR

    def resolve(self, index: SpatialIndex) -> float:
        if self.radius is not None:
            if self.radius < 0:
                raise InvalidInputError("radius must be non-negative")
            return float(self.radius)
        if self.factor <= 0:
            raise InvalidInputError("radius factor must be positive")
        return self.factor * index.median_spacing()


class Neighbor(NamedTuple):
    index: int
    distance: float


def _distances(points, q):
    d = points - q
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


class SpatialIndex:
    """Nearest-neighbour-within-radius queries with a lowest-index tie-break.

    Candidate generation uses a KD-tree; the final choice recomputes distances
    with the same arithmetic as :func:`linear_scan_nn` so results match it
    exactly, duplicates and ties included.
    """

    def __init__(self, positions, leafsize: int = 16, k_candidates: int = 8):
        self.points = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloudError("cannot index an empty point set")
        self.tree = cKDTree(self.points, leafsize=leafsize, balanced_tree=True, compact_nodes=True)
        self.k = min(k_candidates, len(self.points))
        self._median = None

    def __len__(self) -> int:
        return len(self.points)

    def median_spacing(self) -> float:
        if self._median is None:
            if len(self.points) < 2:
                raise EmptyCloudError("median spacing needs at least two points")
            d, _ = self.tree.query(self.points, k=2)
            spacing = d[:, 1]
            positive = spacing[spacing > 0]
            self._median = float(np.median(positive)) if len(positive) else 0.0
        return self._median

    def query(self, queries, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Batch query. Returns ``(index, distance)``; misses have index -1, distance inf."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(q)
        out_i = np.full(n, -1, np.int64)
        out_d = np.full(n, np.inf)
        if radius <= 0 or n == 0:
            if radius == 0 and n:
                return self._query_zero(q, out_i, out_d)
            return out_i, out_d
        bound = np.nextafter(radius * (1 + 1e-9), np.inf)
        cd, ci = self.tree.query(q, k=self.k, distance_upper_bound=bound)
        if self.k == 1:
            cd = cd[:, None]
            ci = ci[:, None]
        found = np.isfinite(cd[:, 0])
        rows = np.nonzero(found)[0]
        if len(rows) == 0:
            return out_i, out_d
        ci_f = ci[rows]
        valid = ci_f < len(self.points)
        safe = np.where(valid, ci_f, 0)
        exact = _distances(self.points[safe], q[rows][:, None, :])
        exact = np.where(valid, exact, np.inf)
        # lexicographic (distance, index) minimum over the candidates
        big = np.iinfo(np.int64).max
        best_d = exact.min(axis=1)
        tied = exact == best_d[:, None]
        best_i = np.where(tied & valid, ci_f, big).min(axis=1)
        # when the last candidate slot is still (nearly) tied, more tied points
        # may exist beyond the k returned by the tree
        slack = best_d * 1e-9 + 1e-300
        overflow = valid[:, -1] & (exact[:, -1] <= best_d + slack) & (self.k < len(self.points))
        for r in np.nonzero(overflow)[0]:
            cand = np.asarray(self.tree.query_ball_point(q[rows[r]], best_d[r] * (1 + 1e-9) + 1e-300))
            d = _distances(self.points[cand], q[rows[r]])
            m = d.min()
            best_d[r] = m
            best_i[r] = cand[d == m].min()
        hit = best_d <= radius
        out_i[rows[hit]] = best_i[hit]
        out_d[rows[hit]] = best_d[hit]
        return out_i, out_d

    def _query_zero(self, q, out_i, out_d):
        # radius 0 only admits exact coincidences
        d, _ = self.tree.query(q, k=1)
        for r in np.nonzero(d == 0.0)[0]:
            cand = np.asarray(self.tree.query_ball_point(q[r], 0.0))
            dd = _distances(self.points[cand], q[r])
            cand = cand[dd == 0.0]
            if len(cand):
                out_i[r] = cand.min()
                out_d[r] = 0.0
        return out_i, out_d


def nn_within_radius(index: SpatialIndex, query, radius: float) -> Neighbor | None:
    i, d = index.query(np.asarray(query, dtype=np.float64)[None, :], radius)
    if i[0] < 0:
        return None
    return Neighbor(int(i[0]), float(d[0]))


@njit(cache=True)
def _scan_kernel(points, queries, radius, out_i, out_d):
    n = points.shape[0]
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best = np.inf
        bi = -1
        for j in range(n):
            dx = points[j, 0] - qx
            dy = points[j, 1] - qy
            dz = points[j, 2] - qz
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < best:
                best = d
                bi = j
        if bi >= 0 and best <= radius:
            out_i[qi] = bi
            out_d[qi] = best


def linear_scan_nn(points, queries, radius: float):
    """Brute-force reference for :meth:`SpatialIndex.query` (same outputs).

    Strict ``<`` while scanning in index order keeps the lowest index on ties.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    out_i = np.full(len(queries), -1, np.int64)
    out_d = np.full(len(queries), np.inf)
    _scan_kernel(points, queries, float(radius), out_i, out_d)
    return out_i, out_d


# -- point cloud ----------------------------------------------------------------


def _foreground(mask, accum, shape, threshold):
    fg = np.ones(shape, bool) if mask is None else np.asarray(mask, bool)
    if fg.shape != shape:
        raise DimensionError(f"mask shape {fg.shape} does not match {shape}")
    if accum is not None:
        fg = fg & (np.asarray(accum) >= threshold)
    return fg


def build_point_cloud(color_views, depth_maps, stride: int = 1, accum_maps=None,
                      coverage_threshold: float = COVERAGE_THRESHOLD) -> ColoredPointCloud:
    """Lift masked reference pixels to world space.

    ``color_views`` is a list of ``(camera, rgb_image, mask)``; ``depth_maps``
    and the optional ``accum_maps`` come from rendering the grayscale model.
    """
    if len(depth_maps) != len(color_views) or any(d is None for d in depth_maps):
        raise InvalidInputError("every color view needs a depth map")
    if accum_maps is None:
        accum_maps = [None] * len(color_views)
    pos, col, src, pix = [], [], [], []
    for vi, ((cam, img, mask), depth, accum) in enumerate(zip(color_views, depth_maps, accum_maps)):
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != cam.shape or np.asarray(img).shape[:2] != cam.shape:
            raise DimensionError(f"view {cam.id}: image/depth do not match camera {cam.shape}")
        fg = _foreground(mask, accum, cam.shape, coverage_threshold) & (depth > 0)
        sel = np.zeros(cam.shape, bool)
        sel[::stride, ::stride] = True
        rows, cols = np.nonzero(fg & sel)
        if len(rows) == 0:
            continue
        pixels = np.stack([cols, rows], axis=1).astype(np.float64)
        pos.append(unproject(cam, pixels, depth[rows, cols]))
        col.append(np.asarray(img, dtype=np.float64)[rows, cols, :3])
        src.append(np.full(len(rows), vi))
        pix.append(np.stack([rows, cols], axis=1))
    if not pos:
        raise EmptyCloudError("no foreground pixels in the reference views")
    return ColoredPointCloud(np.concatenate(pos), np.concatenate(col), np.concatenate(src),
                             np.concatenate(pix), tuple(c[0].id for c in color_views))


@dataclass
class PseudoColorMap:
    rgb: np.ndarray  # (H, W, 3), zero where invalid
    valid: np.ndarray  # (H, W) bool
    distance: np.ndarray | None = None

    @property
    def n_pc(self) -> int:
        return int(self.valid.sum())

    @property
    def shape(self):
        return self.valid.shape


def query_points(view: CameraView, depth, mask=None, accum=None,
                 coverage_threshold: float = COVERAGE_THRESHOLD):
    depth = np.asarray(depth, dtype=np.float64)
    fg = _foreground(mask, accum, view.shape, coverage_threshold) & (depth > 0)
    rows, cols = np.nonzero(fg)
    pts = unproject(view, np.stack([cols, rows], axis=1).astype(np.float64), depth[rows, cols]) \
        if len(rows) else np.zeros((0, 3))
    return rows, cols, pts


def compute_pseudo_colors(view: CameraView, depth, mask, index: SpatialIndex, cloud: ColoredPointCloud,
                          policy: RadiusPolicy | float = RadiusPolicy(), accum=None,
                          coverage_threshold: float = COVERAGE_THRESHOLD, nn=None) -> PseudoColorMap:
    radius = policy if isinstance(policy, (int, float)) else policy.resolve(index)
    rows, cols, pts = query_points(view, depth, mask, accum, coverage_threshold)
    H, W = view.shape
    rgb = np.zeros((H, W, 3))
    valid = np.zeros((H, W), bool)
    dist = np.full((H, W), np.inf)
    if len(pts):
        if nn is None:
            idx, d = index.query(pts, radius)
        else:
            idx, d = nn(index.points, pts, radius)
        hit = idx >= 0
        rgb[rows[hit], cols[hit]] = cloud.colors[idx[hit]]
        valid[rows[hit], cols[hit]] = True
        dist[rows[hit], cols[hit]] = d[hit]
    return PseudoColorMap(rgb, valid, dist)


def pseudo_color_loss(pc: PseudoColorMap, rendered):
    """Masked L1 normalized by the number of valid pixels.

    Returns ``(loss, grad)`` with ``grad = dloss/drendered``; ``sign(0) = 0``.
    An empty map contributes zero and emits a warning.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    if rendered.shape != pc.rgb.shape:
        raise DimensionError(f"rendered {rendered.shape} vs pseudo-colors {pc.rgb.shape}")
    grad = np.zeros_like(rendered)
    n = pc.n_pc
    if n == 0:
        warnings.warn("pseudo-color map has no valid pixels; loss contributes 0", RuntimeWarning, stacklevel=2)
        return 0.0, grad
    diff = pc.rgb[pc.valid] - rendered[pc.valid]
    loss = float(np.abs(diff).sum() / n)
    grad[pc.valid] = -np.sign(diff) / n
    return loss, grad
