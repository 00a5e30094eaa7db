"""Per-image affine color transformation ``L' = w * L + b``."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidInputError

ACT_SIGMA = 0.01


@dataclass
class ACTParams:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(3).copy()
        self.b = np.asarray(self.b, dtype=np.float64).reshape(3).copy()
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise InvalidInputError("ACT parameters must be finite")

    @classmethod
    def identity(cls) -> ACTParams:
        return cls(np.ones(3), np.zeros(3))

    def is_identity(self) -> bool:
        return bool(np.all(self.w == 1.0) and np.all(self.b == 0.0))

    def to_dict(self) -> dict:
        return {"w": [float(x) for x in self.w], "b": [float(x) for x in self.b]}

    def copy(self) -> ACTParams:
        return ACTParams(self.w, self.b)

    def __eq__(self, other) -> bool:
        return isinstance(other, ACTParams) and np.array_equal(self.w, other.w) and np.array_equal(self.b, other.b)


def apply_act(color, p: ACTParams) -> np.ndarray:
    """Elementwise ``w * color + b``; ``color`` may have any leading shape ``(..., 3)``."""
    return p.w * np.asarray(color, dtype=np.float64) + p.b


def compose_act(outer: ACTParams, inner: ACTParams) -> ACTParams:
    """Single map equal to ``apply_act(apply_act(x, inner), outer)``."""
    return ACTParams(outer.w * inner.w, outer.w * inner.b + outer.b)


def init_act(seed, sigma: float = ACT_SIGMA) -> ACTParams:
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    if sigma == 0:
        return ACTParams.identity()
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, sigma, size=6)
    return ACTParams(1.0 + eps[:3], eps[3:])


def average_act(params) -> ACTParams:
    params = list(params)
    if not params:
        raise InvalidInputError("cannot average an empty list of ACT parameters")
    w = np.mean([p.w for p in params], axis=0)
    b = np.mean([p.b for p in params], axis=0)
    return ACTParams(w, b)


def act_gradient(residual, cache, sh_colors):
    """Gradient of a pixel loss w.r.t. one view's ACT parameters.

    ``residual`` is dL/d(rendered pixel), ``(H, W, 3)``; ``sh_colors`` holds the
    decoded (post-clamp, pre-ACT) color of every cached contribution, ``(M, 3)``,
    in cache order.
    """
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (cache.height, cache.width, 3):
        raise DimensionError(f"residual shape {residual.shape} does not match cache {(cache.height, cache.width, 3)}")
    sh_colors = np.asarray(sh_colors, dtype=np.float64)
    if sh_colors.shape != (cache.n_contrib, 3):
        raise DimensionError(f"expected {cache.n_contrib} contribution colors, got {sh_colors.shape}")
    r = residual.reshape(-1, 3)
    pix = cache.contrib_pixel()
    wr = cache.weights[:, None] * r[pix]
    grad_w = (wr * sh_colors).sum(axis=0)
    grad_b = (r * cache.accum.reshape(-1, 1)).sum(axis=0)
    return grad_w, grad_b


def save_act_json(params: dict, path) -> None:
    Path(path).write_text(json.dumps({k: v.to_dict() for k, v in params.items()}, indent=1))


def load_act_json(path) -> dict:
    """``{view_id: ACTParams}`` from either an act map or a camera manifest with act blocks."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return {str(r["id"]): ACTParams(r["act"]["w"], r["act"]["b"]) for r in data if r.get("act")}
    if "w" in data and "b" in data:
        return {"*": ACTParams(data["w"], data["b"])}
    return {str(k): ACTParams(v["w"], v["b"]) for k, v in data.items()}
