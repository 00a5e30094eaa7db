"""``splatcolor`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 I/O failure, 2 bad input / schema / config, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .act import average_act, load_act_json, save_act_json
from .camera import CameraView, load_cameras, save_cameras
from .config import PipelineConfig, load_config
from .errors import DivergenceError, InvalidInputError, SchemaError
from .images import load_gray, load_image, load_mask, save_depth, save_image, save_mask
from .metrics import psnr, ssim
from .optim import LossWeights
from .pipeline import render_all, run_colorize, run_correspondence, run_fit_gray, run_pseudo
from .pseudo import PseudoColorMap
from .render import render_view
from .scene import load_scene_ply, rotmat_to_quat, save_scene_ply
from .synth import generate_scene, save_dataset, spec_to_dict

log = logging.getLogger("splatcolor")

EXIT_OK = 0
EXIT_IO = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3

# files that legitimately differ between otherwise identical runs
UNHASHED = ("manifest.json", "timing.json")


class UsageError(InvalidInputError):
    pass


# -- run directory ---------------------------------------------------------------


@contextmanager
def run_directory(out, force: bool):
    """Stage outputs in a sibling temp directory and move it into place on success."""
    out = Path(out).resolve()
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _fix_paths(tmp: Path, out: Path):
    """Rewrite absolute paths that point into the staging directory."""
    for f in tmp.rglob("*.json"):
        text = f.read_text()
        if str(tmp) in text:
            f.write_text(text.replace(str(tmp), str(out)))


def output_digest(directory, skip=UNHASHED) -> dict:
    """SHA-256 per output file (relative path -> hex), excluding run metadata."""
    directory = Path(directory)
    out = {}
    for f in sorted(directory.rglob("*")):
        if f.is_file() and f.name not in skip:
            out[str(f.relative_to(directory))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def _versions() -> dict:
    import numba
    import scipy
    return {"splatcolor": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": sys.version.split()[0]}


def write_manifest(tmp: Path, out: Path, args, cfg: PipelineConfig, inputs: dict) -> None:
    manifest = {
        "subcommand": args.command,
        "inputs": {k: (str(Path(v).resolve()) if isinstance(v, (str, Path)) else v) for k, v in inputs.items()},
        "config": str(Path(args.config).resolve()) if args.config else None,
        "config_hash": cfg.digest(),
        "output": str(out),
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "log_level": args.log_level,
        "versions": _versions(),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True))


# -- input loading -----------------------------------------------------------------


def _load_views(cameras_path):
    cams = load_cameras(cameras_path)
    gray, masks = {}, {}
    for c in cams:
        if c.image_path is None:
            raise SchemaError(f"{cameras_path}: camera {c.id} has no 'image'")
        if not Path(c.image_path).exists():
            raise SchemaError(f"{cameras_path}: camera {c.id} image {c.image_path} not found")
        gray[c.id] = load_gray(c.image_path, c.shape)
        if c.mask_path is not None:
            masks[c.id] = load_mask(c.mask_path, c.shape)
    return cams, gray, masks


def _color_dir(args, cameras_path) -> Path:
    return Path(args.color_dir) if args.color_dir else Path(cameras_path).resolve().parent / "color"


def _load_colors(cams, ids, color_dir: Path) -> dict:
    by_id = {c.id: c for c in cams}
    out = {}
    for i in ids:
        p = color_dir / f"{i}.png"
        if not p.exists():
            raise SchemaError(f"colorized image for view {i} not found at {p}")
        out[i] = load_image(p, by_id[i].shape)
    return out


def _check_ids(cams, ids, what="colorized view"):
    known = {c.id for c in cams}
    bad = [i for i in ids if i not in known]
    if bad:
        raise UsageError(f"{what} id(s) not in the camera manifest: {', '.join(bad)}")


def _scene(path):
    if not Path(path).exists():
        raise SchemaError(f"scene file {path} not found")
    return load_scene_ply(path)


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args, cfg: PipelineConfig) -> int:
    spec = cfg.synth
    if args.views is not None:
        spec.view_count = args.views
    if args.resolution is not None:
        spec.resolution = args.resolution
    if args.gaussians is not None:
        spec.gaussian_count = args.gaussians
    if args.gain_range is not None:
        spec.gain_range = tuple(args.gain_range)
    if args.bias_range is not None:
        spec.bias_range = tuple(args.bias_range)
    if args.occluded_spot is not None:
        spec.occluded_spot_deg = args.occluded_spot
    seed = cfg.seed if args.seed is None else args.seed
    cfg.seed = seed
    spec.validate()
    ds = generate_scene(spec, seed, holdout=args.holdout, settings=cfg.render)
    out = Path(args.out).resolve()
    with run_directory(out, args.force) as tmp:
        save_dataset(ds, tmp, holdout=args.holdout)
        _fix_paths(tmp, out)
        write_manifest(tmp, out, args, cfg, {"spec": spec_to_dict(spec)})
    print(f"synth: {len(ds.scene)} gaussians, {len(ds.cameras)} views"
          + (f", {len(ds.holdout)} held-out cameras" if args.holdout else "") + f" -> {out}")
    return EXIT_OK


def cmd_fit_gray(args, cfg: PipelineConfig) -> int:
    scene = _scene(args.scene)
    cams, gray, masks = _load_views(args.cameras)
    t0 = time.perf_counter()
    renders = render_all(scene, cams, cfg.render)
    t1 = time.perf_counter()
    res = run_fit_gray(scene, cams, gray, masks, cfg, use_act=not args.no_act, renders=renders)
    t2 = time.perf_counter()
    out = Path(args.out).resolve()
    with run_directory(out, args.force) as tmp:
        save_scene_ply(res.scene, tmp / "scene_fitted.ply")
        save_act_json(res.acts, tmp / "act.json")
        for c in cams:
            c.act = res.acts[c.id]
        save_cameras(cams, tmp / "cameras.json", base=out)
        res.log.write_csv(tmp / "train_log.csv")
        _dump(tmp / "summary.json", {"act": not args.no_act, "iterations": cfg.gray.iterations,
                                      "train_psnr": res.train_psnr, "mean_train_psnr": res.mean_psnr,
                                      "final_loss": float(res.log.losses()[-min(100, len(res.log.rows)):].mean())})
        _dump(tmp / "timing.json", {"caches_s": t1 - t0, "fit_s": t2 - t1,
                                    "per_iteration_s": (t2 - t1) / cfg.gray.iterations})
        write_manifest(tmp, out, args, cfg, {"scene": args.scene, "cameras": args.cameras})
    print(f"fit-gray: mean train PSNR {res.mean_psnr:.2f} dB over {len(cams)} views "
          f"({'ACT' if not args.no_act else 'no ACT'}), {t2 - t1:.1f}s -> {out}")
    return EXIT_OK


def _pseudo_config(args, cfg):
    pc = cfg.pseudo
    if args.radius is not None:
        pc.radius = args.radius
    return pc


def cmd_pseudo(args, cfg: PipelineConfig) -> int:
    scene = _scene(args.scene)
    cams = load_cameras(args.cameras)
    _check_ids(cams, args.colored)
    masks = {c.id: load_mask(c.mask_path, c.shape) for c in cams if c.mask_path}
    colors = _load_colors(cams, args.colored, _color_dir(args, args.cameras))
    pc = _pseudo_config(args, cfg)
    t0 = time.perf_counter()
    renders = render_all(scene, cams, cfg.render, want_cache=False)
    t_render = time.perf_counter() - t0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = run_pseudo(cams, renders, args.colored, colors, masks, pc, args.benchmark, cfg.seed)
    for w in caught:
        log.warning(str(w.message))
    if res.radius <= 0:
        log.warning("radius is 0: no pseudo-colors will be assigned")
    out = Path(args.out).resolve()
    with run_directory(out, args.force) as tmp:
        res.cloud.save_ply(tmp / "cloud.ply")
        (tmp / "pseudo").mkdir()
        (tmp / "depth").mkdir()
        stats = {}
        for vid, m in res.maps.items():
            save_image(tmp / "pseudo" / f"{vid}.png", m.rgb)
            save_mask(tmp / "pseudo" / f"{vid}_valid.png", m.valid)
            fg = masks[vid].sum() if vid in masks else m.valid.size
            stats[vid] = {"n_pc": m.n_pc, "valid_fraction": m.n_pc / max(int(fg), 1)}
        for c in cams:
            save_depth(tmp / "depth" / f"{c.id}.png", renders[c.id].depth)
        _dump(tmp / "pseudo.json", {"colored": list(args.colored), "radius": res.radius,
                                     "cloud_points": len(res.cloud), "views": stats,
                                     "mean_valid_fraction": float(np.mean([s["valid_fraction"] for s in stats.values()]))
                                     if stats else 0.0})
        timing = dict(res.timing, render_s=t_render)
        _dump(tmp / "timing.json", timing)
        write_manifest(tmp, out, args, cfg, {"scene": args.scene, "cameras": args.cameras,
                                             "colored": list(args.colored)})
    print(f"pseudo: {len(res.cloud)} cloud points, radius {res.radius:.5g}, {len(res.maps)} views -> {out}")
    _print_timing(timing)
    if any(m.n_pc == 0 for m in res.maps.values()) and res.radius <= 0:
        print("warning: radius 0 leaves every pseudo-color map empty", file=sys.stderr)
    return EXIT_OK


def _print_timing(timing: dict) -> None:
    for k in sorted(timing):
        v = timing[k]
        print(f"  {k}: {v:.6g}" if isinstance(v, float) else f"  {k}: {v}")


def _load_pseudo(pseudo_dir: Path, cams, colored):
    meta_path = pseudo_dir / "pseudo.json"
    if not meta_path.exists():
        raise SchemaError(f"{meta_path} not found (run the pseudo stage first)")
    meta = json.loads(meta_path.read_text())
    maps = {}
    for c in cams:
        if c.id in colored:
            continue
        rgb_p = pseudo_dir / "pseudo" / f"{c.id}.png"
        val_p = pseudo_dir / "pseudo" / f"{c.id}_valid.png"
        if not rgb_p.exists() or not val_p.exists():
            continue
        valid = load_mask(val_p, c.shape)
        rgb = load_image(rgb_p, c.shape) * valid[..., None]
        maps[c.id] = PseudoColorMap(rgb, valid)
    return meta, maps


def cmd_colorize(args, cfg: PipelineConfig) -> int:
    scene = _scene(args.scene)
    cams, gray, masks = _load_views(args.cameras)
    pseudo_dir = Path(args.pseudo)
    colored = args.colored
    meta, maps = _load_pseudo(pseudo_dir, cams, colored or ())
    if not colored:
        colored = meta.get("colored", [])
        maps = {k: v for k, v in maps.items() if k not in colored}
    _check_ids(cams, colored)
    colors = _load_colors(cams, colored, _color_dir(args, args.cameras))
    weights = LossWeights(cfg.weights.lambda_pc, cfg.weights.lambda_tcm, cfg.weights.lambda_cc)
    if args.ablate == "tcm":
        weights.lambda_tcm = 0.0
    elif args.ablate == "ccm":
        weights.lambda_cc = 0.0
    t0 = time.perf_counter()
    renders = render_all(scene, cams, cfg.render)
    timing = {"caches_s": time.perf_counter() - t0}
    if args.ablate == "act":
        # stage one again, without ACT, then colorize from that appearance
        t = time.perf_counter()
        scene = run_fit_gray(scene, cams, gray, masks, cfg, use_act=False, renders=renders).scene
        timing["refit_gray_s"] = time.perf_counter() - t
    t = time.perf_counter()
    corr = run_correspondence(cams, gray, masks, colored, cfg.features) \
        if weights.lambda_tcm > 0 or weights.lambda_cc > 0 else {}
    timing["correspondence_s"] = time.perf_counter() - t
    t = time.perf_counter()
    res = run_colorize(scene, cams, renders, colored, colors, masks, maps, corr, cfg, weights)
    timing["colorize_s"] = time.perf_counter() - t
    timing["per_iteration_s"] = timing["colorize_s"] / cfg.colorize.iterations
    if not res.scene.geometry_equal(scene):
        raise RuntimeError("geometry changed during colorization")
    out = Path(args.out).resolve()
    with run_directory(out, args.force) as tmp:
        save_scene_ply(res.scene, tmp / "scene_color.ply")
        res.log.write_csv(tmp / "train_log.csv")
        (tmp / "corr").mkdir()
        for vid, cm in corr.items():
            _dump(tmp / "corr" / f"{vid}.json", cm.to_json())
        _dump(tmp / "summary.json", {"colored": list(colored), "ablate": args.ablate,
                                      "weights": vars(weights), "iterations": cfg.colorize.iterations})
        _dump(tmp / "timing.json", timing)
        write_manifest(tmp, out, args, cfg, {"scene": args.scene, "cameras": args.cameras,
                                             "pseudo": args.pseudo, "colored": list(colored)})
    print(f"colorize: {len(colored)} colored / {len(cams) - len(colored)} uncolored views"
          + (f", ablate {args.ablate}" if args.ablate else "") + f" -> {out}")
    _print_timing(timing)
    return EXIT_OK


def interpolate_cameras(cams, n: int):
    """``n`` cameras along the piecewise path through ``cams`` (slerp on rotation, lerp on center)."""
    from scipy.spatial.transform import Rotation, Slerp

    if n < 1:
        raise UsageError("--trajectory needs at least one frame")
    if len(cams) == 1:
        return [cams[0]] * n
    key = np.arange(len(cams))
    slerp = Slerp(key, Rotation.from_matrix(np.stack([c.R for c in cams])))
    centers = np.stack([c.center for c in cams])
    s = np.linspace(0, len(cams) - 1, n)
    Rs = slerp(s).as_matrix()
    out = []
    for i, (si, R) in enumerate(zip(s, Rs)):
        lo = min(int(np.floor(si)), len(cams) - 2)
        f = si - lo
        center = (1 - f) * centers[lo] + f * centers[lo + 1]
        base = cams[lo]
        out.append(CameraView(f"frame_{i:04d}", base.width, base.height, base.fx, base.fy, base.cx, base.cy,
                              R, -R @ center, quat=rotmat_to_quat(R)))
    return out


def cmd_render(args, cfg: PipelineConfig) -> int:
    scene = _scene(args.scene)
    cams = load_cameras(args.cameras)
    acts = load_act_json(args.act) if args.act else {}
    if args.trajectory:
        cams = interpolate_cameras(cams, args.trajectory)
    avg = None
    if args.act and (args.novel or args.trajectory):
        avg = average_act(acts.values())
    out = Path(args.out).resolve()
    with run_directory(out, args.force) as tmp:
        for c in cams:
            act = avg if avg is not None else (acts.get(c.id, acts.get("*")) if acts else None)
            buf = render_view(scene, c, act=act, settings=cfg.render)
            save_image(tmp / f"{c.id}.png", np.clip(buf.color, 0, 1))
            if args.depth:
                save_depth(tmp / f"{c.id}_depth.png", buf.depth)
        write_manifest(tmp, out, args, cfg, {"scene": args.scene, "cameras": args.cameras, "act": args.act})
    print(f"render: {len(cams)} frames -> {out}")
    return EXIT_OK


def _pngs(d: Path) -> dict:
    return {p.stem: p for p in sorted(d.glob("*.png")) if not p.stem.endswith(("_depth", "_valid"))}


def cmd_eval(args, cfg: PipelineConfig) -> int:
    renders = _pngs(Path(args.renders))
    refs = _pngs(Path(args.references))
    if not refs:
        raise UsageError(f"no reference images in {args.references}")
    if set(renders) != set(refs):
        raise UsageError(f"render/reference sets differ: {len(renders)} renders vs {len(refs)} references")
    masks = _pngs(Path(args.masks)) if args.masks else {}
    rows = []
    for vid in sorted(refs):
        a = load_image(renders[vid])
        b = load_image(refs[vid], a.shape[:2])
        m = load_mask(masks[vid], a.shape[:2]) if vid in masks else None
        rows.append((vid, psnr(a, b, m), ssim(a, b, m)))
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["view_id", "psnr", "ssim"])
        for vid, p, s in rows:
            w.writerow([vid, repr(p), repr(s)])
        w.writerow(["mean", repr(mean_p), repr(mean_s)])
    finally:
        if args.out:
            fh.close()
    if args.out:
        print(f"eval: {len(rows)} views, mean PSNR {mean_p:.2f} dB, mean SSIM {mean_s:.4f} -> {args.out}")
    return EXIT_OK


def cmd_act_export(args, cfg: PipelineConfig) -> int:
    acts = load_act_json(args.act)
    avg = average_act(acts.values())
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(avg.to_dict(), indent=1))
    print(f"act-export: averaged {len(acts)} views -> {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap the number of worker threads")
    common.add_argument("--force", action="store_true", help="replace an existing output")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="splatcolor", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic colored-splat dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--gaussians", type=int)
    s.add_argument("--gain-range", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--bias-range", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--occluded-spot", type=float, metavar="DEG", help="add the occluded/twin spot pair")
    s.add_argument("--holdout", action="store_true", help="also write cameras_holdout.json")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-gray", parents=[common], help="fit SH (+ per-view ACT) to grayscale images")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-act", action="store_true")
    s.set_defaults(func=cmd_fit_gray)

    s = sub.add_parser("pseudo", parents=[common], help="pseudo-color maps from colorized views")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--colored", nargs="+", required=True, metavar="VIEW_ID")
    s.add_argument("--color-dir", help="directory of <view_id>.png colorized images (default: <cameras dir>/color)")
    s.add_argument("--radius", type=float, help="absolute radius in world units")
    s.add_argument("--benchmark", type=int, nargs="?", const=100_000, default=0, metavar="N",
                   help="time N queries against the linear-scan oracle")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudo)

    s = sub.add_parser("colorize", parents=[common], help="propagate reference colors to the whole scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--pseudo", required=True, help="output directory of the pseudo stage")
    s.add_argument("--colored", nargs="+", metavar="VIEW_ID", help="default: the pseudo stage's list")
    s.add_argument("--color-dir")
    s.add_argument("--ablate", choices=["tcm", "ccm", "act"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_colorize)

    s = sub.add_parser("render", parents=[common], help="render cameras or an interpolated trajectory")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--act", help="ACT json (per view, or a single averaged block)")
    s.add_argument("--novel", action="store_true", help="apply the averaged ACT to every camera")
    s.add_argument("--trajectory", type=int, metavar="N", help="N frames interpolated along the cameras")
    s.add_argument("--depth", action="store_true", help="also write depth maps")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of renders against references")
    s.add_argument("--renders", required=True)
    s.add_argument("--references", required=True)
    s.add_argument("--masks")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("act-export", parents=[common], help="write the averaged ACT used for novel views")
    s.add_argument("--act", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_act_export)
    return p


def _set_threads(n):
    if n is None:
        return
    import numba
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.gray.seed = args.seed
            cfg.colorize.seed = args.seed
        _set_threads(args.threads)
        return args.func(args, cfg)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvalidInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
