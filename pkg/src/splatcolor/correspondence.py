"""Feature-space correspondences between an uncolored view and the references.

Matching runs on fixed grayscale descriptors (built-in normalized patches or
precomputed maps from disk). The losses run on a shallow differentiable
descriptor of the rendered color image: per-cell sub-block mean colors for the
template loss, whole-patch means for the coarse color loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InvalidInputError, SchemaError
from .images import downscale as box_downscale

PATCH = 8
STRIDE = 4
DOWNSCALE = 4
SUB_BLOCKS = 2


@dataclass
class FeatureMap:
    data: np.ndarray  # (Hf, Wf, D)
    patch: int
    stride: int
    downscale: int = 1
    view_id: str = ""
    role: str = "gray"

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def grid_shape(h: int, w: int, patch: int, stride: int) -> tuple[int, int]:
    if h < patch or w < patch:
        raise InvalidInputError(f"image {w}x{h} is smaller than the {patch}px patch")
    return (h - patch) // stride + 1, (w - patch) // stride + 1


def extract_features_builtin(img, patch: int = PATCH, stride: int = STRIDE, downscale: int = DOWNSCALE,
                             view_id: str = "", role: str = "gray") -> FeatureMap:
    """Mean-subtracted, L2-normalized raw patches on a ``downscale``-reduced image."""
    if patch < 2 or stride < 1:
        raise InvalidInputError("need patch >= 2 and stride >= 1")
    img = np.asarray(img, dtype=np.float64)
    small = box_downscale(img, downscale)
    hf, wf = grid_shape(small.shape[0], small.shape[1], patch, stride)
    win = sliding_window_view(small, (patch, patch), axis=(0, 1))[::stride, ::stride][:hf, :wf]
    feats = win.reshape(hf, wf, -1).copy()
    feats -= feats.mean(axis=2, keepdims=True)
    norm = np.linalg.norm(feats, axis=2, keepdims=True)
    flat = norm[..., 0] < 1e-12
    feats = np.where(flat[..., None], 0.0, feats / np.where(norm > 0, norm, 1.0))
    return FeatureMap(feats, patch, stride, downscale, view_id, role)


def cell_validity(mask, patch: int = PATCH, stride: int = STRIDE, downscale: int = DOWNSCALE,
                  min_fraction: float = 0.5) -> np.ndarray:
    """Cells whose patch is at least ``min_fraction`` foreground."""
    small = box_downscale(np.asarray(mask, dtype=np.float64), downscale)
    hf, wf = grid_shape(small.shape[0], small.shape[1], patch, stride)
    win = sliding_window_view(small, (patch, patch))[::stride, ::stride][:hf, :wf]
    return win.mean(axis=(2, 3)) >= min_fraction


# -- feature files ---------------------------------------------------------------


def save_feature_map(fm: FeatureMap, path) -> None:
    """Little-endian float32 payload plus ``<path>.json`` sidecar."""
    path = Path(path)
    fm.data.astype("<f4").tofile(path)
    hf, wf = fm.grid
    meta = {"view_id": fm.view_id, "role": fm.role, "height_f": hf, "width_f": wf, "dim": fm.dim,
            "patch": fm.patch, "stride": fm.stride, "downscale": fm.downscale}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    for key in ("view_id", "role", "height_f", "width_f", "dim", "patch", "stride"):
        if key not in meta:
            raise SchemaError(f"{path}.json: missing '{key}'")
    raw = np.fromfile(path, dtype="<f4")
    expected = meta["height_f"] * meta["width_f"] * meta["dim"]
    if raw.size != expected:
        raise SchemaError(f"{path}: {raw.size} floats, sidecar promises {expected}")
    data = raw.astype(np.float64).reshape(meta["height_f"], meta["width_f"], meta["dim"])
    if not np.isfinite(data).all():
        raise SchemaError(f"{path}: non-finite feature values")
    return FeatureMap(data, int(meta["patch"]), int(meta["stride"]), int(meta.get("downscale", 1)),
                      str(meta["view_id"]), str(meta["role"]))


@dataclass
class FeatureSource:
    """Where matching descriptors come from: built-in patches or a directory
    of ``<view_id>_<role>.f32`` files."""

    kind: str = "builtin"
    directory: str | None = None
    patch: int = PATCH
    stride: int = STRIDE
    downscale: int = DOWNSCALE

    def get(self, view_id: str, role: str, image=None) -> FeatureMap:
        if self.kind == "builtin":
            if image is None:
                raise InvalidInputError("built-in features need the image")
            return extract_features_builtin(image, self.patch, self.stride, self.downscale, view_id, role)
        if self.kind == "precomputed":
            fm = load_feature_map(Path(self.directory) / f"{view_id}_{role}.f32")
            if (fm.patch, fm.stride) != (self.patch, self.stride):
                raise SchemaError(f"feature file for {view_id} has patch/stride {fm.patch}/{fm.stride}, "
                                  f"expected {self.patch}/{self.stride}")
            return fm
        raise InvalidInputError(f"unknown feature source {self.kind!r}")


# -- matching ------------------------------------------------------------------


@dataclass
class CorrespondenceMap:
    ref_k: np.ndarray  # (Hf, Wf) reference index
    ref_i: np.ndarray
    ref_j: np.ndarray
    distance: np.ndarray
    valid: np.ndarray  # cells that take part in the losses
    patch: int = PATCH
    stride: int = STRIDE
    ref_ids: tuple = ()
    ref_grids: tuple = ()

    @property
    def grid(self) -> tuple[int, int]:
        return self.ref_k.shape

    def to_json(self) -> dict:
        return {
            "patch": self.patch, "stride": self.stride, "ref_ids": list(self.ref_ids),
            "ref_grids": [list(g) for g in self.ref_grids],
            "k": self.ref_k.tolist(), "i": self.ref_i.tolist(), "j": self.ref_j.tolist(),
            "distance": self.distance.tolist(), "valid": self.valid.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> CorrespondenceMap:
        return cls(np.array(d["k"], np.int64), np.array(d["i"], np.int64), np.array(d["j"], np.int64),
                   np.array(d["distance"], np.float64), np.array(d["valid"], bool),
                   d["patch"], d["stride"], tuple(d["ref_ids"]), tuple(tuple(g) for g in d["ref_grids"]))


def cosine_distance(a, b) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0), n[:, 0] > 0


def match_features(target: FeatureMap, refs_gray, target_valid=None, ref_valid=None) -> CorrespondenceMap:
    """For every target cell, the nearest reference cell over all references.

    Cosine distance with ``dist(0, .) = 1``; ties go to the lowest
    ``(k, i, j)``. ``target_valid`` / ``ref_valid`` optionally restrict which
    cells are matched and which reference cells are candidates.
    """
    refs_gray = list(refs_gray)
    if not refs_gray:
        raise InvalidInputError("need at least one reference feature map")
    for r in refs_gray:
        if r.dim != target.dim:
            raise DimensionError(f"feature dims differ: target {target.dim}, reference {r.dim}")
    hf, wf = target.grid
    if ref_valid is None:
        ref_valid = [np.ones(r.grid, bool) for r in refs_gray]
    cand, cand_k, cand_i, cand_j = [], [], [], []
    for k, (r, rv) in enumerate(zip(refs_gray, ref_valid)):
        ii, jj = np.nonzero(np.asarray(rv, bool))
        cand.append(r.data[ii, jj])
        cand_k.append(np.full(len(ii), k))
        cand_i.append(ii)
        cand_j.append(jj)
    B = np.concatenate(cand)
    ck, ci, cj = np.concatenate(cand_k), np.concatenate(cand_i), np.concatenate(cand_j)
    if len(B) == 0:
        raise InvalidInputError("no valid reference cells to match against")
    A = target.data.reshape(-1, target.dim)
    Au, a_ok = _unit_rows(A)
    Bu, b_ok = _unit_rows(B)
    dist = 1.0 - Au @ Bu.T
    dist[~a_ok, :] = 1.0
    dist[:, ~b_ok] = 1.0
    # candidates are already in (k, i, j) order, so argmin's first hit is the tie-break
    best = np.argmin(dist, axis=1)
    valid = np.ones((hf, wf), bool) if target_valid is None else np.asarray(target_valid, bool).copy()
    return CorrespondenceMap(
        ck[best].reshape(hf, wf), ci[best].reshape(hf, wf), cj[best].reshape(hf, wf),
        dist[np.arange(len(A)), best].reshape(hf, wf), valid, target.patch, target.stride,
        tuple(r.view_id for r in refs_gray), tuple(r.grid for r in refs_gray),
    )


# -- differentiable pooled descriptors ----------------------------------------------


def _integral(img):
    h, w = img.shape[:2]
    S = np.zeros((h + 1, w + 1) + img.shape[2:])
    S[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    return S


def box_means(img, rows, cols, size: int) -> np.ndarray:
    """Mean of ``img[r:r+size, c:c+size]`` for every (r, c) pair (broadcast)."""
    S = _integral(np.asarray(img, dtype=np.float64))
    r1 = rows + size
    c1 = cols + size
    return (S[r1, c1] - S[rows, c1] - S[r1, cols] + S[rows, cols]) / (size * size)


def box_means_adjoint(grad, rows, cols, size: int, shape) -> np.ndarray:
    """Gradient w.r.t. the image given ``grad`` on the outputs of :func:`box_means`.

    ``rows`` and ``cols`` are flat index arrays; ``grad`` has one leading entry per pair.
    """
    h, w = shape[:2]
    D = np.zeros((h + 1, w + 1) + tuple(shape[2:]))
    rr, cc = np.broadcast_arrays(np.ravel(rows), np.ravel(cols))
    gg = np.asarray(grad, dtype=np.float64).reshape((len(rr),) + tuple(shape[2:])) / (size * size)
    np.add.at(D, (rr, cc), gg)
    np.add.at(D, (rr + size, cc), -gg)
    np.add.at(D, (rr, cc + size), -gg)
    np.add.at(D, (rr + size, cc + size), gg)
    return np.cumsum(np.cumsum(D, axis=0), axis=1)[:h, :w]


def _cell_origins(grid, stride):
    hf, wf = grid
    return np.arange(hf)[:, None] * stride, np.arange(wf)[None, :] * stride


def pooled_features(img, patch: int = PATCH, stride: int = STRIDE, sub: int = SUB_BLOCKS,
                    view_id: str = "", role: str = "color") -> FeatureMap:
    """Loss-side descriptor: mean color of each of ``sub x sub`` blocks per cell.

    ``img`` is already at the matching resolution (no extra downscale).
    """
    img = np.asarray(img, dtype=np.float64)
    if patch % sub:
        raise InvalidInputError("patch must be divisible by the sub-block count")
    bs = patch // sub
    grid = grid_shape(img.shape[0], img.shape[1], patch, stride)
    r0, c0 = _cell_origins(grid, stride)
    parts = [box_means(img, r0 + a * bs, c0 + b * bs, bs) for a in range(sub) for b in range(sub)]
    data = np.concatenate([p.reshape(grid + (-1,)) for p in parts], axis=2)
    return FeatureMap(data, patch, stride, 1, view_id, role)


def _pooled_adjoint(grad_feat, shape, patch, stride, sub):
    bs = patch // sub
    grid = grad_feat.shape[:2]
    r0, c0 = _cell_origins(grid, stride)
    C = shape[2] if len(shape) > 2 else 1
    out = np.zeros(shape)
    n = 0
    for a in range(sub):
        for b in range(sub):
            g = grad_feat[..., n * C:(n + 1) * C]
            rr, cc = np.broadcast_arrays(r0 + a * bs, c0 + b * bs)
            out += box_means_adjoint(g.reshape(-1, *shape[2:]), rr, cc, bs, shape)
            n += 1
    return out


def guidance_features(corr: CorrespondenceMap, refs_color_feats) -> np.ndarray:
    """Guidance descriptor per target cell: the matched reference cell's descriptor."""
    refs = list(refs_color_feats)
    hf, wf = corr.grid
    dim = refs[0].dim
    out = np.zeros((hf, wf, dim))
    for k, r in enumerate(refs):
        sel = corr.ref_k == k
        if sel.any():
            out[sel] = r.data[corr.ref_i[sel], corr.ref_j[sel]]
    return out


def tcm_loss(rendered_small, corr: CorrespondenceMap, refs_color_feats, sub: int = SUB_BLOCKS,
             guidance=None):
    """Mean cosine distance between pooled descriptors of the render and the guidance.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``rendered_small``.
    """
    rendered_small = np.asarray(rendered_small, dtype=np.float64)
    feats = pooled_features(rendered_small, corr.patch, corr.stride, sub)
    if feats.grid != corr.grid:
        raise DimensionError(f"render grid {feats.grid} does not match correspondence grid {corr.grid}")
    G = guidance_features(corr, refs_color_feats) if guidance is None else guidance
    F = feats.data
    cells = corr.valid
    n = int(cells.sum())
    grad_f = np.zeros_like(F)
    if n == 0:
        return 0.0, np.zeros_like(rendered_small)
    f = F[cells]
    g = G[cells]
    nf = np.linalg.norm(f, axis=1)
    ng = np.linalg.norm(g, axis=1)
    ok = (nf > 0) & (ng > 0)
    cos = np.zeros(len(f))
    cos[ok] = (f[ok] * g[ok]).sum(axis=1) / (nf[ok] * ng[ok])
    loss = float((1.0 - cos).sum() / n)
    dcos = np.zeros_like(f)
    dcos[ok] = g[ok] / (nf[ok] * ng[ok])[:, None] - cos[ok, None] * f[ok] / (nf[ok] ** 2)[:, None]
    grad_f[cells] = -dcos / n
    grad = _pooled_adjoint(grad_f, rendered_small.shape, corr.patch, corr.stride, sub)
    return loss, grad


def ccm_cells(corr: CorrespondenceMap, patch: int | None = None) -> np.ndarray:
    """Valid cells on the non-overlapping sub-grid used by the coarse color loss."""
    patch = corr.patch if patch is None else patch
    hf, wf = corr.grid
    ii, jj = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    aligned = ((ii * corr.stride) % patch == 0) & ((jj * corr.stride) % patch == 0)
    return corr.valid & aligned


def reference_patch_means(corr: CorrespondenceMap, refs_color_small, patch: int | None = None) -> np.ndarray:
    patch = corr.patch if patch is None else patch
    hf, wf = corr.grid
    out = np.zeros((hf, wf, 3))
    for k, ref in enumerate(refs_color_small):
        sel = corr.ref_k == k
        if not sel.any():
            continue
        rows = corr.ref_i[sel] * corr.stride
        cols = corr.ref_j[sel] * corr.stride
        if (rows + patch > ref.shape[0]).any() or (cols + patch > ref.shape[1]).any():
            raise DimensionError("matched patch falls outside the reference image")
        out[sel] = box_means(ref, rows, cols, patch)
    return out


def ccm_loss(rendered_small, corr: CorrespondenceMap, refs_color_small, patch: int | None = None,
             targets=None):
    """Mean squared distance between patch-mean colors of the render and the matched
    reference patches, over non-overlapping cells. Returns ``(loss, grad)``."""
    rendered_small = np.asarray(rendered_small, dtype=np.float64)
    patch = corr.patch if patch is None else patch
    hf, wf = corr.grid
    if (hf - 1) * corr.stride + patch > rendered_small.shape[0] or \
            (wf - 1) * corr.stride + patch > rendered_small.shape[1]:
        raise DimensionError("correspondence grid does not fit the rendered image")
    cells = ccm_cells(corr, patch)
    n = int(cells.sum())
    if n == 0:
        return 0.0, np.zeros_like(rendered_small)
    ci, cj = np.nonzero(cells)
    rows, cols = ci * corr.stride, cj * corr.stride
    mine = box_means(rendered_small, rows, cols, patch)
    ref = (reference_patch_means(corr, refs_color_small, patch) if targets is None else targets)[ci, cj]
    diff = mine - ref
    loss = float((diff ** 2).sum() / n)
    grad = box_means_adjoint(2.0 * diff / n, rows, cols, patch, rendered_small.shape)
    return loss, grad
