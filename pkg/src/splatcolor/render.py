"""Ray-exact rasterizer for 2D Gaussian disks.

Each pixel ray is intersected with every disk whose projected 3-sigma footprint
covers the pixel; hits are sorted front to back and alpha composited. With
geometry frozen, the per-pixel blend weights do not depend on appearance, so a
:class:`BlendCache` of ``(gaussian, weight)`` pairs turns the rendered color into
an affine function of the SH coefficients (up to the per-Gaussian clamp).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit, prange

from .act import ACTParams
from .camera import CameraView
from .errors import CacheStaleError, InvalidInputError
from .scene import Gaussian2D, SplatScene
from .sh import num_coeffs, sh_basis_into

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
NEAR_CLIP = 1e-4
PARALLEL_EPS = 1e-9
# compositing stops once transmittance falls below this
T_MIN = 1e-4
SIGMA_CUTOFF = 3.0
# reassociation lets the SH dot products vectorize; NaN/inf semantics stay intact
_FAST = {"reassoc", "contract"}
# fixed pixel split for the backward pass (independent of the thread count)
BACKWARD_CHUNKS = 4


@dataclass(frozen=True)
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    alpha_max: float = ALPHA_MAX
    alpha_min: float = ALPHA_MIN
    near: float = NEAR_CLIP
    t_min: float = T_MIN
    sigma_cutoff: float = SIGMA_CUTOFF
    tile_size: int = 16
    # "exact": per-pixel sort by hit depth. "center": one sort per tile by
    # splat center depth; wrong only where disks interpenetrate along a ray.
    sort: str = "exact"


DEFAULT_SETTINGS = RenderSettings()


class RayHit(NamedTuple):
    u: float
    v: float
    t: float
    G: float


def ray_splat_intersect(g: Gaussian2D, ray_origin, ray_dir, near: float = NEAR_CLIP) -> RayHit | None:
    ray_origin = np.asarray(ray_origin, dtype=np.float64)
    ray_dir = np.asarray(ray_dir, dtype=np.float64)
    frame = g.frame
    tu, tv, n = frame[:, 0], frame[:, 1], frame[:, 2]
    denom = n @ ray_dir
    if abs(denom) < PARALLEL_EPS:
        return None
    t = n @ (g.center - ray_origin) / denom
    if t <= near:
        return None
    rel = ray_origin + t * ray_dir - g.center
    u = rel @ tu / g.scales[0]
    v = rel @ tv / g.scales[1]
    return RayHit(float(u), float(v), float(t), float(np.exp(-0.5 * (u * u + v * v))))


@dataclass
class BlendCache:
    """Front-to-back ``(gaussian, weight)`` contributions per pixel, CSR layout."""

    height: int
    width: int
    offsets: np.ndarray  # (P + 1,) int64
    gauss: np.ndarray  # (M,) int64
    weights: np.ndarray  # (M,) float64
    dirs: np.ndarray  # (P, 3) world-space unit view directions
    accum: np.ndarray  # (P,)
    n_gaussians: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _basis: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_contrib(self) -> int:
        return len(self.gauss)

    def contrib_pixel(self) -> np.ndarray:
        return np.repeat(np.arange(self.height * self.width), np.diff(self.offsets))

    def basis(self) -> np.ndarray:
        """Degree-3 SH basis of every pixel's view direction, ``(P, 16)``."""
        if self._basis is None:
            self._basis = np.zeros((len(self.dirs), 16))
            _basis_kernel(np.ascontiguousarray(self.dirs), self._basis)
        return self._basis

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.offsets, self.gauss, self.weights, self.dirs, self.accum))

    def check(self, n_gaussians: int) -> None:
        if n_gaussians != self.n_gaussians or (self.n_contrib and self.gauss.max() >= n_gaussians):
            raise CacheStaleError(
                f"cache built for {self.n_gaussians} gaussians used with {n_gaussians}"
            )


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) camera-space z of the blend-weighted hit
    accum: np.ndarray  # (H, W)
    cache: BlendCache | None = None


# -- numba kernels ------------------------------------------------------------


@njit(cache=True)
def _expand_pairs(tx0, tx1, ty0, ty1, tiles_x, total):
    tile_ids = np.empty(total, np.int64)
    gauss_ids = np.empty(total, np.int64)
    k = 0
    for g in range(len(tx0)):
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                tile_ids[k] = ty * tiles_x + tx
                gauss_ids[k] = g
                k += 1
    return tile_ids, gauss_ids


@njit(cache=True, parallel=True)
def _raster_kernel(H, W, ts, tiles_x, n_tiles, tile_off, tile_gauss, presorted,
                   cdirs, wdirs, cen, tu, tv, nrm, inv_s, opac, sh, n_basis,
                   use_act, act_w, act_b, bg, near, alpha_min, alpha_max, t_min, r2_cut,
                   fill, color, depth, accum, counts, offsets, out_g, out_w):
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_off[tile]
        m = tile_off[tile + 1] - start
        buf_z = np.empty(m)
        buf_a = np.empty(m)
        buf_g = np.empty(m, np.int64)
        basis = np.zeros(16)
        for py in range(ty * ts, min(H, (ty + 1) * ts)):
            for px in range(tx * ts, min(W, (tx + 1) * ts)):
                p = py * W + px
                dx = cdirs[p, 0]
                dy = cdirs[p, 1]
                dz = cdirs[p, 2]
                nh = 0
                for li in range(m):
                    g = tile_gauss[start + li]
                    denom = nrm[g, 0] * dx + nrm[g, 1] * dy + nrm[g, 2] * dz
                    if abs(denom) < 1e-9:
                        continue
                    t = (nrm[g, 0] * cen[g, 0] + nrm[g, 1] * cen[g, 1] + nrm[g, 2] * cen[g, 2]) / denom
                    if t <= near:
                        continue
                    rx = t * dx - cen[g, 0]
                    ry = t * dy - cen[g, 1]
                    rz = t * dz - cen[g, 2]
                    u = (rx * tu[g, 0] + ry * tu[g, 1] + rz * tu[g, 2]) * inv_s[g, 0]
                    v = (rx * tv[g, 0] + ry * tv[g, 1] + rz * tv[g, 2]) * inv_s[g, 1]
                    r2 = u * u + v * v
                    if r2 > r2_cut:
                        continue
                    a = opac[g] * np.exp(-0.5 * r2)
                    if a < alpha_min:
                        continue
                    if a > alpha_max:
                        a = alpha_max
                    buf_z[nh] = t * dz
                    buf_a[nh] = a
                    buf_g[nh] = g
                    nh += 1
                if presorted:
                    order = np.arange(nh)
                else:
                    order = np.argsort(buf_z[:nh], kind="mergesort")
                if not fill:
                    sh_basis_into(wdirs[p, 0], wdirs[p, 1], wdirs[p, 2], 3, basis)
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                zsum = 0.0
                wsum = 0.0
                n_used = 0
                o = offsets[p] if fill else 0
                for oi in range(nh):
                    k = order[oi]
                    g = buf_g[k]
                    a = buf_a[k]
                    w = a * T
                    if fill:
                        out_g[o] = g
                        out_w[o] = w
                        o += 1
                    else:
                        for c in range(3):
                            val = 0.5
                            for j in range(n_basis):
                                val += sh[g, c, j] * basis[j]
                            if val < 0.0:
                                val = 0.0
                            if use_act:
                                val = act_w[c] * val + act_b[c]
                            if c == 0:
                                c0 += w * val
                            elif c == 1:
                                c1 += w * val
                            else:
                                c2 += w * val
                        zsum += w * buf_z[k]
                        wsum += w
                    n_used += 1
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                if not fill:
                    counts[p] = n_used
                    accum[p] = wsum
                    rest = 1.0 - wsum
                    color[p, 0] = c0 + rest * bg[0]
                    color[p, 1] = c1 + rest * bg[1]
                    color[p, 2] = c2 + rest * bg[2]
                    depth[p] = zsum / wsum if wsum > 0.0 else 0.0


@njit(parallel=True, cache=True)
def _basis_kernel(dirs, out):
    for p in prange(len(dirs)):
        sh_basis_into(dirs[p, 0], dirs[p, 1], dirs[p, 2], 3, out[p])


@njit(parallel=True, cache=True, fastmath=_FAST)
def _cache_color_kernel(offsets, gauss, weights, basis, accum, sh, n_basis, use_act, act_w, act_b, bg, out):
    P = len(offsets) - 1
    for p in prange(P):
        acc = np.zeros(3)
        for o in range(offsets[p], offsets[p + 1]):
            g = gauss[o]
            w = weights[o]
            for c in range(3):
                val = 0.5
                for j in range(n_basis):
                    val += sh[g, c, j] * basis[p, j]
                if val < 0.0:
                    val = 0.0
                if use_act:
                    val = act_w[c] * val + act_b[c]
                acc[c] += w * val
        rest = 1.0 - accum[p]
        for c in range(3):
            out[p, c] = acc[c] + rest * bg[c]


@njit(parallel=True, cache=True, fastmath=_FAST)
def _contrib_colors_kernel(offsets, gauss, basis, sh, n_basis, out):
    P = len(offsets) - 1
    for p in prange(P):
        for o in range(offsets[p], offsets[p + 1]):
            g = gauss[o]
            for c in range(3):
                val = 0.5
                for j in range(n_basis):
                    val += sh[g, c, j] * basis[p, j]
                out[o, c] = val if val > 0.0 else 0.0


@njit(parallel=True, cache=True)
def _blend_kernel(offsets, weights, colors, accum, use_act, act_w, act_b, bg, out):
    P = len(offsets) - 1
    for p in prange(P):
        acc = np.zeros(3)
        for o in range(offsets[p], offsets[p + 1]):
            w = weights[o]
            for c in range(3):
                val = colors[o, c]
                if use_act:
                    val = act_w[c] * val + act_b[c]
                acc[c] += w * val
        rest = 1.0 - accum[p]
        for c in range(3):
            out[p, c] = acc[c] + rest * bg[c]


@njit(parallel=True, cache=True, fastmath=_FAST)
def _backward_kernel(offsets, gauss, weights, basis, colors, n_basis, use_act, act_w, gpix, bounds,
                     grad_parts, gw_parts):
    # one private buffer per fixed pixel chunk; the caller merges them in chunk order
    for k in prange(len(bounds) - 1):
        gsh = grad_parts[k]
        gw = gw_parts[k]
        for p in range(bounds[k], bounds[k + 1]):
            for o in range(offsets[p], offsets[p + 1]):
                g = gauss[o]
                w = weights[o]
                for c in range(3):
                    gc = gpix[p, c]
                    val = colors[o, c]
                    if gc == 0.0 or val <= 0.0:
                        # clamped colors have zero subgradient and contribute nothing to the gain
                        continue
                    gw[c] += gc * w * val
                    scale = gc * w
                    if use_act:
                        scale *= act_w[c]
                    for j in range(n_basis):
                        gsh[g, c, j] += scale * basis[p, j]


# -- python API ---------------------------------------------------------------


def _prepare(scene: SplatScene, camera: CameraView, settings: RenderSettings):
    R, t = camera.R, camera.t
    cen = scene.centers @ R.T + t
    frames = np.einsum("ij,njk->nik", R, scene.frames())
    tu = np.ascontiguousarray(frames[:, :, 0])
    tv = np.ascontiguousarray(frames[:, :, 1])
    nrm = np.ascontiguousarray(frames[:, :, 2])
    scales = scene.scales
    cut = settings.sigma_cutoff
    H, W, ts = camera.height, camera.width, settings.tile_size

    corners = np.stack([
        cen + su * cut * scales[:, :1] * tu + sv * cut * scales[:, 1:] * tv
        for su in (-1, 1) for sv in (-1, 1)
    ], axis=1)  # (N, 4, 3)
    z = corners[..., 2]
    all_front = (z > settings.near).all(axis=1)
    any_front = (z > settings.near).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * corners[..., 0] / z + camera.cx
        v = camera.fy * corners[..., 1] / z + camera.cy
    margin = 1e-6
    x0 = np.where(all_front, np.ceil(np.nanmin(np.where(all_front[:, None], u, 0), axis=1) - margin), 0)
    x1 = np.where(all_front, np.floor(np.nanmax(np.where(all_front[:, None], u, 0), axis=1) + margin), W - 1)
    y0 = np.where(all_front, np.ceil(np.nanmin(np.where(all_front[:, None], v, 0), axis=1) - margin), 0)
    y1 = np.where(all_front, np.floor(np.nanmax(np.where(all_front[:, None], v, 0), axis=1) + margin), H - 1)
    keep = (any_front & (x1 >= x0) & (y1 >= y0)
            & (x1 >= 0) & (y1 >= 0) & (x0 <= W - 1) & (y0 <= H - 1))
    x0 = np.clip(x0, 0, W - 1)
    y0 = np.clip(y0, 0, H - 1)
    x1 = np.clip(x1, 0, W - 1)
    y1 = np.clip(y1, 0, H - 1)

    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    gidx = np.nonzero(keep)[0]
    tx0 = (x0[gidx] // ts).astype(np.int64)
    tx1 = (x1[gidx] // ts).astype(np.int64)
    ty0 = (y0[gidx] // ts).astype(np.int64)
    ty1 = (y1[gidx] // ts).astype(np.int64)
    total = int(((tx1 - tx0 + 1) * (ty1 - ty0 + 1)).sum())
    tile_ids, local = _expand_pairs(tx0, tx1, ty0, ty1, tiles_x, total)
    gauss_ids = gidx[local]
    if settings.sort == "center":
        order = np.lexsort((gauss_ids, cen[gauss_ids, 2], tile_ids))
    elif settings.sort == "exact":
        order = np.argsort(tile_ids, kind="stable")
    else:
        raise InvalidInputError(f"unknown sort mode {settings.sort!r}")
    tile_gauss = np.ascontiguousarray(gauss_ids[order])
    tile_off = np.zeros(tiles_x * tiles_y + 1, np.int64)
    np.cumsum(np.bincount(tile_ids, minlength=tiles_x * tiles_y), out=tile_off[1:])

    cdirs = camera.camera_rays().reshape(-1, 3)
    wdirs = np.ascontiguousarray(cdirs @ R)
    return dict(
        H=H, W=W, ts=ts, tiles_x=tiles_x, n_tiles=tiles_x * tiles_y, tile_off=tile_off,
        tile_gauss=tile_gauss, cdirs=np.ascontiguousarray(cdirs), wdirs=wdirs,
        cen=np.ascontiguousarray(cen), tu=tu, tv=tv, nrm=nrm,
        inv_s=np.ascontiguousarray(1.0 / scales), opac=scene.opacities,
    )


def _act_arrays(act: ACTParams | None):
    if act is None:
        return False, np.ones(3), np.zeros(3)
    return True, act.w.astype(np.float64), act.b.astype(np.float64)


def render_view(scene: SplatScene, camera: CameraView, act: ACTParams | None = None,
                want_cache: bool = False, settings: RenderSettings = DEFAULT_SETTINGS,
                sh_degree: int | None = None) -> RenderBuffers:
    """Render color, expected depth and accumulated opacity for ``camera``.

    ``sh_degree`` limits the SH bands that are evaluated (all by default).
    """
    if len(scene) == 0:
        raise InvalidInputError("cannot render an empty scene")
    prep = _prepare(scene, camera, settings)
    H, W = camera.height, camera.width
    P = H * W
    degree = scene.sh_degree if sh_degree is None else min(sh_degree, scene.sh_degree)
    use_act, act_w, act_b = _act_arrays(act)
    bg = np.asarray(settings.background, dtype=np.float64)
    color = np.zeros((P, 3))
    depth = np.zeros(P)
    accum = np.zeros(P)
    counts = np.zeros(P, np.int64)
    offsets = np.zeros(P + 1, np.int64)
    empty_i = np.zeros(0, np.int64)
    empty_f = np.zeros(0)
    sh = np.ascontiguousarray(scene.sh)
    args = (
        prep["H"], prep["W"], prep["ts"], prep["tiles_x"], prep["n_tiles"], prep["tile_off"],
        prep["tile_gauss"], settings.sort == "center", prep["cdirs"], prep["wdirs"], prep["cen"],
        prep["tu"], prep["tv"], prep["nrm"], prep["inv_s"], prep["opac"], sh, num_coeffs(degree),
        use_act, act_w, act_b, bg, settings.near, settings.alpha_min, settings.alpha_max,
        settings.t_min, settings.sigma_cutoff ** 2,
    )
    _raster_kernel(*args, False, color, depth, accum, counts, offsets, empty_i, empty_f)
    cache = None
    if want_cache:
        np.cumsum(counts, out=offsets[1:])
        out_g = np.zeros(offsets[-1], np.int64)
        out_w = np.zeros(offsets[-1])
        _raster_kernel(*args, True, color, depth, accum, counts, offsets, out_g, out_w)
        cache = BlendCache(H, W, offsets, out_g, out_w, prep["wdirs"], accum.copy(), len(scene), bg.copy())
    return RenderBuffers(color.reshape(H, W, 3), depth.reshape(H, W), accum.reshape(H, W), cache)


def render_from_cache(cache: BlendCache, sh_table, act: ACTParams | None = None,
                      sh_degree: int | None = None, colors=None) -> np.ndarray:
    """Re-render color with new SH coefficients; geometry comes from the cache.

    ``colors`` may carry :func:`contribution_colors` for the same SH table to
    skip decoding.
    """
    sh_table = np.ascontiguousarray(sh_table, dtype=np.float64)
    cache.check(len(sh_table))
    k = sh_table.shape[2]
    n_basis = k if sh_degree is None else min(k, num_coeffs(sh_degree))
    use_act, act_w, act_b = _act_arrays(act)
    out = np.zeros((cache.height * cache.width, 3))
    if colors is None:
        _cache_color_kernel(cache.offsets, cache.gauss, cache.weights, cache.basis(), cache.accum,
                            sh_table, n_basis, use_act, act_w, act_b, cache.background, out)
    else:
        _blend_kernel(cache.offsets, cache.weights, _check_colors(cache, colors), cache.accum,
                      use_act, act_w, act_b, cache.background, out)
    return out.reshape(cache.height, cache.width, 3)


def _check_colors(cache: BlendCache, colors) -> np.ndarray:
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    if colors.shape != (cache.n_contrib, 3):
        raise InvalidInputError(f"expected {cache.n_contrib} contribution colors, got {colors.shape}")
    return colors


def contribution_colors(cache: BlendCache, sh_table, sh_degree: int | None = None) -> np.ndarray:
    """Decoded (clamped, pre-ACT) color of every cached contribution, ``(M, 3)``."""
    sh_table = np.ascontiguousarray(sh_table, dtype=np.float64)
    cache.check(len(sh_table))
    k = sh_table.shape[2]
    n_basis = k if sh_degree is None else min(k, num_coeffs(sh_degree))
    out = np.zeros((cache.n_contrib, 3))
    _contrib_colors_kernel(cache.offsets, cache.gauss, cache.basis(), sh_table, n_basis, out)
    return out


def backprop_to_sh(cache: BlendCache, sh_table, pixel_grad, act: ACTParams | None = None,
                   sh_degree: int | None = None, colors=None):
    """Chain a pixel-space gradient through the cache.

    Returns ``(grad_sh, grad_act_w, grad_act_b)``. Pixels are split into
    ``BACKWARD_CHUNKS`` fixed ranges with private accumulators merged in order,
    so results are reproducible bit for bit whatever the thread count.
    """
    sh_table = np.ascontiguousarray(sh_table, dtype=np.float64)
    cache.check(len(sh_table))
    pixel_grad = np.ascontiguousarray(pixel_grad, dtype=np.float64).reshape(-1, 3)
    if len(pixel_grad) != cache.height * cache.width:
        raise InvalidInputError("pixel gradient does not match cache resolution")
    k = sh_table.shape[2]
    n_basis = k if sh_degree is None else min(k, num_coeffs(sh_degree))
    use_act, act_w, _ = _act_arrays(act)
    colors = contribution_colors(cache, sh_table, sh_degree) if colors is None else _check_colors(cache, colors)
    P = cache.height * cache.width
    bounds = np.linspace(0, P, BACKWARD_CHUNKS + 1).astype(np.int64)
    grad_parts = np.zeros((BACKWARD_CHUNKS,) + sh_table.shape)
    gw_parts = np.zeros((BACKWARD_CHUNKS, 3))
    _backward_kernel(cache.offsets, cache.gauss, cache.weights, cache.basis(), colors, n_basis, use_act, act_w,
                     pixel_grad, bounds, grad_parts, gw_parts)
    grad_sh = grad_parts[0]
    grad_w = gw_parts[0]
    for k in range(1, BACKWARD_CHUNKS):
        grad_sh += grad_parts[k]
        grad_w += gw_parts[k]
    grad_b = (pixel_grad * cache.accum[:, None]).sum(axis=0)
    return grad_sh, grad_w, grad_b
