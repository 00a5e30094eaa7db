"""Appearance optimization with frozen geometry.

Both stages work on per-view blend caches built once up front: with geometry
fixed, a render is an affine function of the SH table, so every step is a
cache replay plus an exact backward pass.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .act import ACTParams, init_act
from .camera import CameraView
from .correspondence import (CorrespondenceMap, ccm_loss, guidance_features, pooled_features,
                             reference_patch_means, tcm_loss)
from .errors import ConfigError, DimensionError, DivergenceError, InvalidInputError
from .images import downscale, downscale_grad
from .metrics import psnr
from .pseudo import PseudoColorMap, pseudo_color_loss
from .render import (DEFAULT_SETTINGS, BlendCache, RenderSettings, backprop_to_sh, contribution_colors,
                     render_from_cache, render_view)
from .scene import SplatScene


@dataclass
class LossWeights:
    lambda_pc: float = 1.0
    lambda_tcm: float = 0.1
    lambda_cc: float = 0.05

    def validate(self) -> None:
        vals = (self.lambda_pc, self.lambda_tcm, self.lambda_cc)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ConfigError(f"loss weights must be finite and >= 0, got {vals}")

    @property
    def all_zero(self) -> bool:
        return self.lambda_pc == 0 and self.lambda_tcm == 0 and self.lambda_cc == 0


@dataclass
class OptimizerConfig:
    iterations: int = 3000
    sh_learning_rate: float = 0.0025  # DC band
    sh_rest_ratio: float = 20.0  # higher bands run at DC rate / ratio
    act_learning_rate: float = 1e-4
    act_sigma: float = 0.01
    sh_degree_schedule: list | None = None  # [[iteration, degree], ...]
    seed: int = 0
    deterministic: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    sh_init: str = "keep"  # start from the loaded SH or reset to flat gray

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ConfigError("iterations must be > 0")
        if self.sh_learning_rate <= 0 or self.act_learning_rate <= 0 or self.sh_rest_ratio <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.act_sigma < 0:
            raise ConfigError("act_sigma must be >= 0")
        if self.sh_init not in ("keep", "reset"):
            raise ConfigError(f"sh_init must be 'keep' or 'reset', got {self.sh_init!r}")
        if self.sh_degree_schedule is not None:
            its = [int(e[0]) for e in self.sh_degree_schedule]
            if its != sorted(its) or not its or its[0] != 0:
                raise ConfigError("sh_degree_schedule must start at iteration 0 and be increasing")

    def degree_at(self, it: int, max_degree: int) -> int:
        if not self.sh_degree_schedule:
            return max_degree
        deg = 0
        for start, d in self.sh_degree_schedule:
            if it >= start:
                deg = int(d)
        return min(deg, max_degree)


class Adam:
    """Elementwise Adam with a per-entry learning rate array."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = np.broadcast_to(np.asarray(lr, dtype=np.float64), shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return param - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def sh_learning_rates(k: int, config: OptimizerConfig) -> np.ndarray:
    lr = np.full(k, config.sh_learning_rate / config.sh_rest_ratio)
    lr[0] = config.sh_learning_rate
    return lr[None, None, :]


# -- per-view data -----------------------------------------------------------------


@dataclass
class ViewData:
    """One training view. ``target`` is the gray image in stage one and the
    artist color image for colored views in stage two."""

    camera: CameraView
    target: np.ndarray | None = None
    mask: np.ndarray | None = None
    pseudo: PseudoColorMap | None = None
    corr: CorrespondenceMap | None = None

    @property
    def id(self) -> str:
        return self.camera.id


@dataclass
class ReferenceSet:
    """Colorized references at matching resolution, shared by every uncolored view."""

    ids: list
    colors_small: list
    feats: list
    downscale: int = 4

    @classmethod
    def build(cls, ids, colors, downscale_factor: int = 4, patch: int = 8, stride: int = 4) -> ReferenceSet:
        small = [downscale(c, downscale_factor) for c in colors]
        feats = [pooled_features(s, patch, stride, view_id=i) for s, i in zip(small, ids)]
        return cls(list(ids), small, feats, downscale_factor)


@dataclass
class GradientBuffer:
    sh: np.ndarray
    act_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    act_b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.sh).all() and np.isfinite(self.act_w).all() and np.isfinite(self.act_b).all())


def masked_l1(rendered, target, mask=None):
    """Sum of absolute channel differences over masked pixels, divided by the pixel count."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 2:
        target = np.repeat(target[..., None], 3, axis=2)
    if rendered.shape != target.shape:
        raise DimensionError(f"rendered {rendered.shape} vs target {target.shape}")
    m = np.ones(rendered.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    n = int(m.sum())
    grad = np.zeros_like(rendered)
    if n == 0:
        return 0.0, grad
    diff = rendered[m] - target[m]
    grad[m] = np.sign(diff) / n
    return float(np.abs(diff).sum() / n), grad


@dataclass
class _Prepared:
    """Per-view constants for the colorization losses."""

    guidance: np.ndarray | None = None
    ccm_targets: np.ndarray | None = None


def prepare_view(view: ViewData, refs: ReferenceSet | None) -> _Prepared:
    if view.corr is None or refs is None:
        return _Prepared()
    return _Prepared(guidance_features(view.corr, refs.feats),
                     reference_patch_means(view.corr, refs.colors_small))


def view_loss(kind: str, rendered, view: ViewData, weights: LossWeights | None = None,
              refs: ReferenceSet | None = None, prepared: _Prepared | None = None):
    """Loss terms and the pixel-space gradient for one view.

    ``kind`` is ``gray`` (stage one L1), ``colored`` (stage two L1 against the
    artist image) or ``uncolored`` (weighted pseudo-color + TCM + CCM).
    """
    terms = {"l1": 0.0, "pc": 0.0, "tcm": 0.0, "ccm": 0.0}
    if kind in ("gray", "colored"):
        if view.target is None:
            raise ConfigError(f"view {view.id} has no target image")
        terms["l1"], grad = masked_l1(rendered, view.target, view.mask)
        return terms["l1"], terms, grad
    if kind != "uncolored":
        raise InvalidInputError(f"unknown view kind {kind!r}")
    weights = weights or LossWeights()
    grad = np.zeros_like(rendered)
    total = 0.0
    if weights.lambda_pc > 0:
        if view.pseudo is None:
            raise ConfigError(f"uncolored view {view.id} has no pseudo-color map")
        terms["pc"], g = pseudo_color_loss(view.pseudo, rendered)
        total += weights.lambda_pc * terms["pc"]
        grad += weights.lambda_pc * g
    if weights.lambda_tcm > 0 or weights.lambda_cc > 0:
        if view.corr is None or refs is None:
            raise ConfigError(f"uncolored view {view.id} needs a correspondence map and references")
        prepared = prepared or prepare_view(view, refs)
        small = downscale(rendered, refs.downscale)
        gsmall = np.zeros_like(small)
        if weights.lambda_tcm > 0:
            terms["tcm"], g = tcm_loss(small, view.corr, refs.feats, guidance=prepared.guidance)
            total += weights.lambda_tcm * terms["tcm"]
            gsmall += weights.lambda_tcm * g
        if weights.lambda_cc > 0:
            terms["ccm"], g = ccm_loss(small, view.corr, refs.colors_small, targets=prepared.ccm_targets)
            total += weights.lambda_cc * terms["ccm"]
            gsmall += weights.lambda_cc * g
        grad += downscale_grad(gsmall, refs.downscale, rendered.shape)
    return total, terms, grad


def total_gradient(kind: str, cache: BlendCache, sh, view: ViewData, weights: LossWeights | None = None,
                   refs: ReferenceSet | None = None, act: ACTParams | None = None,
                   sh_degree: int | None = None, prepared: _Prepared | None = None):
    """Loss and exact gradient w.r.t. the SH table (and ACT when given) for one view."""
    colors = contribution_colors(cache, sh, sh_degree)
    rendered = render_from_cache(cache, sh, act, sh_degree, colors=colors)
    loss, terms, pix = view_loss(kind, rendered, view, weights, refs, prepared)
    gsh, gw, gb = backprop_to_sh(cache, sh, pix, act, sh_degree, colors=colors)
    return loss, terms, GradientBuffer(gsh, gw, gb)


# -- logging -------------------------------------------------------------------------


LOG_FIELDS = ("iteration", "view_id", "kind", "loss", "l1", "pc", "tcm", "ccm")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    wall: list = field(default_factory=list)  # kept apart so the CSV stays reproducible

    def add(self, it, view_id, kind, loss, terms, t):
        self.rows.append({"iteration": it, "view_id": view_id, "kind": kind, "loss": loss, **terms})
        self.wall.append(t)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def build_caches(scene: SplatScene, cameras, settings: RenderSettings = DEFAULT_SETTINGS) -> dict:
    return {c.id: render_view(scene, c, want_cache=True, settings=settings).cache for c in cameras}


def _view_order(rng, n):
    while True:
        yield from rng.permutation(n)


# -- stage one: grayscale appearance -------------------------------------------------


@dataclass
class FitResult:
    scene: SplatScene
    acts: dict
    log: TrainingLog
    train_psnr: dict

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.train_psnr.values())))


def evaluate_views(scene: SplatScene, views, caches: dict, acts: dict | None = None) -> dict:
    out = {}
    for v in views:
        act = acts.get(v.id) if acts else None
        img = np.clip(render_from_cache(caches[v.id], scene.sh, act), 0, 1)
        target = v.target if v.target.ndim == 3 else np.repeat(v.target[..., None], 3, axis=2)
        out[v.id] = psnr(img, target, v.mask)
    return out


def fit_grayscale(scene: SplatScene, views, config: OptimizerConfig | None = None, use_act: bool = True,
                  caches: dict | None = None, settings: RenderSettings = DEFAULT_SETTINGS,
                  log: TrainingLog | None = None) -> FitResult:
    """Fit SH (and per-view ACT) to grayscale targets by masked L1. Geometry is untouched."""
    config = config or OptimizerConfig()
    config.validate()
    views = list(views)
    if not views:
        raise InvalidInputError("no training views")
    for v in views:
        if v.target is None:
            raise InvalidInputError(f"view {v.id} has no grayscale target")
    caches = caches if caches is not None else build_caches(scene, [v.camera for v in views], settings)
    log = log or TrainingLog()
    rng = np.random.default_rng(config.seed)
    sh = scene.sh.astype(np.float64).copy()
    if config.sh_init == "reset":
        sh = reset_sh(sh)
    adam = Adam(sh.shape, sh_learning_rates(sh.shape[2], config), config.beta1, config.beta2, config.eps)
    acts = {}
    act_opt = {}
    if use_act:
        for n, v in enumerate(views):
            acts[v.id] = init_act(np.random.SeedSequence([config.seed, n]), config.act_sigma)
            act_opt[v.id] = Adam(6, config.act_learning_rate, config.beta1, config.beta2, config.eps)
    order = _view_order(rng, len(views))
    t0 = time.perf_counter()
    for it in range(config.iterations):
        v = views[next(order)]
        deg = config.degree_at(it, scene.sh_degree)
        act = acts.get(v.id)
        loss, terms, g = total_gradient("gray", caches[v.id], sh, v, act=act, sh_degree=deg)
        if not np.isfinite(loss) or not g.is_finite():
            raise DivergenceError(it, v.id, f"loss became {loss}")
        log.add(it, v.id, "gray", loss, terms, time.perf_counter() - t0)
        sh = adam.step(sh, g.sh)
        if use_act:
            p = act_opt[v.id].step(np.concatenate([act.w, act.b]), np.concatenate([g.act_w, g.act_b]))
            acts[v.id] = ACTParams(p[:3], p[3:])
    fitted = scene.with_sh(sh)
    if not use_act:
        acts = {v.id: ACTParams.identity() for v in views}
    return FitResult(fitted, acts, log, evaluate_views(fitted, views, caches, acts))


# -- stage two: colorization -----------------------------------------------------------


@dataclass
class ColorizeResult:
    scene: SplatScene
    log: TrainingLog


def reset_sh(sh: np.ndarray) -> np.ndarray:
    """Flat mid-gray: every coefficient zero."""
    return np.zeros_like(sh)


def colorize(scene: SplatScene, views, colored_ids, refs: ReferenceSet | None = None,
             weights: LossWeights | None = None, config: OptimizerConfig | None = None,
             caches: dict | None = None, settings: RenderSettings = DEFAULT_SETTINGS,
             log: TrainingLog | None = None) -> ColorizeResult:
    """Optimize only the SH table: masked L1 on colored views, weighted
    pseudo-color + TCM + CCM on the rest. No ACT in this stage."""
    config = config or OptimizerConfig()
    config.validate()
    weights = weights or LossWeights()
    weights.validate()
    views = list(views)
    colored = set(colored_ids)
    unknown = colored - {v.id for v in views}
    if unknown:
        raise ConfigError(f"colored ids not among the training views: {sorted(unknown)}")
    kinds = ["colored" if v.id in colored else "uncolored" for v in views]
    if not colored and weights.all_zero:
        raise ConfigError("all loss weights are zero and no colored views are given")
    prepared = {}
    for v, k in zip(views, kinds):
        if k == "colored" and v.target is None:
            raise ConfigError(f"colored view {v.id} has no color image")
        if k == "uncolored":
            if weights.lambda_pc > 0 and v.pseudo is None:
                raise ConfigError(f"uncolored view {v.id} has no pseudo-color map")
            if (weights.lambda_tcm > 0 or weights.lambda_cc > 0) and (v.corr is None or refs is None):
                raise ConfigError(f"uncolored view {v.id} needs a correspondence map and references")
            prepared[v.id] = prepare_view(v, refs)
    # with every weight zero the uncolored views carry nothing; train on the colored ones only
    active = [i for i, k in enumerate(kinds) if k == "colored" or not weights.all_zero]
    caches = caches if caches is not None else build_caches(scene, [v.camera for v in views], settings)
    log = log or TrainingLog()
    rng = np.random.default_rng(config.seed)
    sh = scene.sh.astype(np.float64).copy()
    if config.sh_init == "reset":
        sh = reset_sh(sh)
    adam = Adam(sh.shape, sh_learning_rates(sh.shape[2], config), config.beta1, config.beta2, config.eps)
    order = _view_order(rng, len(active))
    t0 = time.perf_counter()
    for it in range(config.iterations):
        n = active[next(order)]
        v, kind = views[n], kinds[n]
        deg = config.degree_at(it, scene.sh_degree)
        loss, terms, g = total_gradient(kind, caches[v.id], sh, v, weights, refs, None, deg, prepared.get(v.id))
        if not np.isfinite(loss) or not np.isfinite(g.sh).all():
            raise DivergenceError(it, v.id, f"loss became {loss}")
        log.add(it, v.id, kind, loss, terms, time.perf_counter() - t0)
        sh = adam.step(sh, g.sh)
    return ColorizeResult(scene.with_sh(sh), log)


# -- gradient verification -------------------------------------------------------------


def check_gradient(fn, x, analytic, h: float = 1e-4, sample_count: int = 50, seed: int = 0,
                   kink_tol: float = 1e-3, floor: float = 1e-8, indices=None) -> dict:
    """Compare ``analytic`` with central differences of scalar ``fn`` at sampled entries of ``x``.

    An entry is treated as a kink when its forward and backward one-sided
    slopes disagree; those are reported but not scored.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    flat = x.ravel()
    if indices is None:
        rng = np.random.default_rng(seed)
        indices = rng.choice(flat.size, size=min(sample_count, flat.size), replace=False)
    f0 = fn(x)
    rel, kinks, rows = [], [], []
    for idx in indices:
        xp = flat.copy()
        xm = flat.copy()
        xp[idx] += h
        xm[idx] -= h
        fp = fn(xp.reshape(x.shape))
        fm = fn(xm.reshape(x.shape))
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        num = (fp - fm) / (2 * h)
        a = analytic.ravel()[idx]
        kink = abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor)
        err = abs(a - num) / max(abs(a), abs(num), floor)
        rows.append({"index": int(idx), "analytic": float(a), "numeric": float(num), "rel_error": float(err),
                     "kink": bool(kink)})
        if kink:
            kinks.append(int(idx))
        else:
            rel.append(err)
    return {
        "max_rel_error": float(max(rel)) if rel else 0.0,
        "mean_rel_error": float(np.mean(rel)) if rel else 0.0,
        "checked": len(rel),
        "kinks": len(kinks),
        "entries": rows,
    }


def finite_difference_check(scene: SplatScene, view: ViewData, kind: str = "gray",
                            weights: LossWeights | None = None, refs: ReferenceSet | None = None,
                            act: ACTParams | None = None, h: float = 1e-4, sample_count: int = 50,
                            seed: int = 0, cache: BlendCache | None = None,
                            settings: RenderSettings = DEFAULT_SETTINGS) -> dict:
    """Analytic vs central-difference gradients over sampled SH (and ACT) entries."""
    n_params = scene.sh.size + (6 if act is not None else 0)
    if min(sample_count, n_params) > 10_000:
        raise InvalidInputError("too many sampled parameters for a finite-difference check")
    cache = cache or render_view(scene, view.camera, want_cache=True, settings=settings).cache
    prepared = prepare_view(view, refs) if kind == "uncolored" else None
    sh0 = scene.sh.astype(np.float64)
    n_sh = sh0.size

    def split(x):
        sh = x[:n_sh].reshape(sh0.shape)
        a = ACTParams(x[n_sh:n_sh + 3], x[n_sh + 3:]) if act is not None else None
        return sh, a

    def fn(x):
        sh, a = split(x)
        rendered = render_from_cache(cache, sh, a)
        return view_loss(kind, rendered, view, weights, refs, prepared)[0]

    x0 = sh0.ravel()
    if act is not None:
        x0 = np.concatenate([x0, act.w, act.b])
    _, _, g = total_gradient(kind, cache, sh0, view, weights, refs, act, None, prepared)
    analytic = g.sh.ravel()
    if act is not None:
        analytic = np.concatenate([analytic, g.act_w, g.act_b])
    return check_gradient(fn, x0, analytic, h, sample_count, seed)
