"""Synthetic pollen-like splat scenes with known color, used as ground truth.

The generator places tangent-aligned disks on a spheroid with Gaussian bumps,
paints them with a seeded procedural color field (shading baked into the DC
term, a little view dependence in the higher bands), and renders grayscale and
color views along a lateral arc and a vertical arc.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .act import ACTParams
from .camera import CameraView, load_cameras, look_at, save_cameras
from .errors import InvalidInputError
from .images import load_gray, load_image, load_mask, save_image, save_mask
from .render import DEFAULT_SETTINGS, render_view
from .scene import SplatScene, load_scene_ply, rotmat_to_quat, save_scene_ply
from .sh import C0, num_coeffs

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class SynthSpec:
    gaussian_count: int = 5000
    radius: float = 1.0
    protrusion_count: int = 24
    protrusion_amplitude: float = 0.22
    protrusion_width: float = 0.16  # angular std-dev of each bump, radians
    view_count: int = 24
    lateral_span_deg: float = 140.0
    vertical_span_deg: float = 80.0
    distance: float = 4.0
    fov_deg: float = 40.0
    resolution: int = 256
    two_tone: float = 1.0  # contrast of the low-frequency warm/cool base; 0 gives one flat tone
    shading: float = 1.0  # strength of the fixed key light; 0 leaves bare albedo
    gain_range: tuple = (1.0, 1.0)
    bias_range: tuple = (0.0, 0.0)
    sh_degree: int = 3
    view_dependence: float = 0.015
    opacity: float = 0.97
    disk_scale: float = 0.55  # disk sigma as a fraction of the mean point spacing
    # a ringed spot of this angular radius around ``occluded_dir`` (seen only
    # from the upper arc) plus an identical twin at ``twin_dir`` facing the
    # frontal views; 0 disables both
    occluded_spot_deg: float = 0.0
    spot_rings: float = 2.5  # ring periods across the spot radius
    occluded_dir: tuple = (0.0, 0.9, 0.44)
    twin_dir: tuple = (0.35, 0.2, -0.9)

    def validate(self) -> None:
        if self.gaussian_count <= 0 or self.view_count <= 0 or self.protrusion_count < 0:
            raise InvalidInputError("counts must be positive")
        if self.radius <= 0:
            raise InvalidInputError("surface radius must be positive")
        if self.resolution < 64:
            raise InvalidInputError("resolution must be at least 64")
        if not 0 <= self.sh_degree <= 3:
            raise InvalidInputError("sh_degree must be in 0..3")


@dataclass
class SynthDataset:
    spec: SynthSpec
    seed: int
    scene: SplatScene
    gray_scene: SplatScene
    cameras: list
    gray_images: list
    color_images: list
    masks: list
    act_truth: list
    holdout: list = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]

    def index(self, view_id: str) -> int:
        return self.ids.index(view_id)


# -- geometry -----------------------------------------------------------------


def _fibonacci_dirs(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class _Surface:
    def __init__(self, spec: SynthSpec, rng):
        self.radius = spec.radius
        self.amp = spec.protrusion_amplitude
        self.width = spec.protrusion_width
        if spec.protrusion_count:
            self.bumps = _fibonacci_dirs(spec.protrusion_count) @ _random_rotation(rng).T
        else:
            self.bumps = np.zeros((0, 3))

    def bump_field(self, dirs) -> np.ndarray:
        if len(self.bumps) == 0:
            return np.zeros(len(dirs))
        cos = np.clip(dirs @ self.bumps.T, -1, 1)
        return np.exp(-(1 - cos) / self.width ** 2).sum(axis=1)

    def point(self, dirs) -> np.ndarray:
        return dirs * (self.radius * (1 + self.amp * self.bump_field(dirs)))[:, None]


def _tangents(dirs):
    ref = np.where(np.abs(dirs[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(ref, dirs)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(dirs, e1)
    return e1, e2


def _surface_frames(surface: _Surface, dirs, h=1e-4):
    e1, e2 = _tangents(dirs)

    def at(d):
        return surface.point(d / np.linalg.norm(d, axis=1, keepdims=True))

    T1 = at(dirs + h * e1) - at(dirs - h * e1)
    T2 = at(dirs + h * e2) - at(dirs - h * e2)
    n = np.cross(T1, T2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    n *= np.sign((n * dirs).sum(axis=1, keepdims=True))
    tu = T1 - (T1 * n).sum(axis=1, keepdims=True) * n
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    return tu, tv, n


# -- color --------------------------------------------------------------------


def _color_field(spec: SynthSpec, surface: _Surface, dirs, normals, rng):
    """Albedo times a fixed key light; values stay well inside (0, 1)."""
    # smooth two-tone base from a few random low-frequency lobes
    lobes = rng.normal(size=(4, 3))
    lobes /= np.linalg.norm(lobes, axis=1, keepdims=True)
    t = 0.5 + 0.5 * np.tanh(1.5 * spec.two_tone * (dirs @ lobes.T) @ rng.uniform(-1, 1, size=4))
    warm = np.array([0.85, 0.62, 0.22])
    cool = np.array([0.35, 0.55, 0.75])
    albedo = warm * t[:, None] + cool * (1 - t[:, None])
    # bump tips red with a dark rim
    b = np.clip(surface.bump_field(dirs), 0, 1)
    tip = np.array([0.85, 0.18, 0.15])
    albedo = albedo * (1 - b[:, None]) + tip * b[:, None]
    rim = np.exp(-((b - 0.35) / 0.08) ** 2)
    albedo *= (1 - 0.6 * rim)[:, None]
    if spec.occluded_spot_deg > 0:
        for d in (spec.occluded_dir, spec.twin_dir):
            od = np.asarray(d, dtype=np.float64)
            od = od / np.linalg.norm(od)
            ang = np.degrees(np.arccos(np.clip(dirs @ od, -1, 1)))
            s = np.clip((spec.occluded_spot_deg - ang) / 4.0, 0, 1)
            # rings give the spot a gray-level signature that correspondence can latch onto
            rings = 0.6 + 0.4 * np.cos(2 * np.pi * ang * spec.spot_rings / spec.occluded_spot_deg)
            spot = np.array([0.2, 0.75, 0.3])[None, :] * rings[:, None]
            albedo = albedo * (1 - s[:, None]) + spot * s[:, None]
    light = np.array([-0.4, 0.6, -0.7])
    light /= np.linalg.norm(light)
    shade = 1.0 - spec.shading * (0.65 - 0.55 * np.clip(normals @ light, 0, 1))
    return np.clip(albedo * shade[:, None], 0.02, 0.8)


def desaturate(scene: SplatScene) -> SplatScene:
    """Replace every channel's SH with the Rec. 709 luminance combination."""
    gray = np.einsum("c,nck->nk", LUMA, scene.sh)
    return scene.with_sh(np.repeat(gray[:, None, :], 3, axis=1))


# -- cameras ------------------------------------------------------------------


def _camera(view_id, spec: SynthSpec, azim_deg, elev_deg) -> CameraView:
    a, e = np.radians(azim_deg), np.radians(elev_deg)
    eye = spec.distance * np.array([np.sin(a) * np.cos(e), np.sin(e), -np.cos(a) * np.cos(e)])
    R, t = look_at(eye, np.zeros(3), up=(0.0, 1.0, 0.0))
    res = spec.resolution
    f = 0.5 * res / np.tan(np.radians(spec.fov_deg) / 2)
    c = (res - 1) / 2
    return CameraView(view_id, res, res, f, f, c, c, R, t, quat=rotmat_to_quat(R))


def trajectory_angles(spec: SynthSpec, holdout: bool = False):
    """``(azimuth, elevation)`` pairs: a lateral arc then a vertical arc.

    The split mirrors a 20:12 lateral:vertical capture. Held-out positions sit
    halfway between neighbouring training positions.
    """
    n_lat = max(1, int(round(spec.view_count * 20 / 32)))
    n_ver = spec.view_count - n_lat
    half = spec.lateral_span_deg / 2
    lat = np.linspace(-half, half, n_lat) if n_lat > 1 else np.zeros(1)
    ver = spec.vertical_span_deg * np.arange(1, n_ver + 1) / max(n_ver, 1)
    if not holdout:
        return [(float(a), 0.0) for a in lat] + [(0.0, float(e)) for e in ver]
    lat_mid = (lat[:-1] + lat[1:]) / 2
    ver_all = np.concatenate([[0.0], ver])
    ver_mid = (ver_all[:-1] + ver_all[1:]) / 2
    return [(float(a), 0.0) for a in lat_mid[::2]] + [(0.0, float(e)) for e in ver_mid[1::2]]


def make_cameras(spec: SynthSpec, holdout: bool = False) -> list[CameraView]:
    prefix = "holdout" if holdout else "view"
    return [_camera(f"{prefix}_{i:03d}", spec, a, e)
            for i, (a, e) in enumerate(trajectory_angles(spec, holdout))]


def reference_ids(cameras, k: int, spec: SynthSpec | None = None) -> list[str]:
    """Colorized reference views for ``k`` in 1..5.

    1: frontal; 2: frontal + rightmost; 3: the lateral trio; 4: adds an angled
    view on the vertical arc; 5: adds the top view. ``k >= len(cameras)``
    returns every view.
    """
    ids = [c.id for c in cameras]
    if k >= len(ids):
        return ids
    if not 1 <= k <= 5:
        raise InvalidInputError("k must be in 1..5 or cover every view")
    n_lat = max(1, int(round(len(ids) * 20 / 32)))
    n_ver = len(ids) - n_lat
    named = {"left": 0, "center": n_lat // 2, "right": n_lat - 1}
    if n_ver:
        named["angled"] = n_lat + (n_ver - 1) // 2
        named["top"] = len(ids) - 1
    choice = {1: ["center"], 2: ["center", "right"], 3: ["left", "center", "right"],
              4: ["left", "center", "right", "angled"],
              5: ["left", "center", "right", "angled", "top"]}[k]
    return [ids[i] for i in sorted({named[n] for n in choice if n in named})]


# -- generator ----------------------------------------------------------------


def build_scenes(spec: SynthSpec, seed: int) -> tuple[SplatScene, SplatScene]:
    spec.validate()
    rng = np.random.default_rng(seed)
    surface = _Surface(spec, rng)
    dirs = _fibonacci_dirs(spec.gaussian_count) @ _random_rotation(rng).T
    centers = surface.point(dirs)
    tu, tv, n = _surface_frames(surface, dirs)
    quats = np.array([rotmat_to_quat(np.stack([a, b, c], axis=1)) for a, b, c in zip(tu, tv, n)])
    area = 4 * np.pi * spec.radius ** 2 * (1 + spec.protrusion_amplitude) ** 2
    spacing = np.sqrt(area / spec.gaussian_count)
    # stretch disks with the local surface dilation so bumps stay closed
    stretch = np.linalg.norm(centers, axis=1) / spec.radius
    sigma = spec.disk_scale * spacing * stretch
    scales = np.stack([sigma, sigma], axis=1)
    colors = _color_field(spec, surface, dirs, n, rng)
    k = num_coeffs(spec.sh_degree)
    sh = np.zeros((spec.gaussian_count, 3, k))
    sh[:, :, 0] = (colors - 0.5) / C0
    if k > 1:
        sh[:, :, 1:] = rng.normal(0, spec.view_dependence, size=(spec.gaussian_count, 3, k - 1))
    opac = np.full(spec.gaussian_count, spec.opacity)
    # round-trip through float32 so the in-memory scene equals what lands in the PLY
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    scene = SplatScene.from_activated(centers, quats, scales, opac, sh)
    scene = SplatScene(f32(scene.centers), f32(scene.rotations), f32(scene.log_scales),
                       f32(scene.opacity_logits), f32(scene.sh))
    gray = desaturate(scene)
    gray = gray.with_sh(f32(gray.sh))
    return scene, gray


def generate_scene(spec: SynthSpec | None = None, seed: int = 0, holdout: bool = True,
                   settings=DEFAULT_SETTINGS) -> SynthDataset:
    spec = spec or SynthSpec()
    scene, gray = build_scenes(spec, seed)
    rng = np.random.default_rng([seed, 1])
    cameras = make_cameras(spec)
    act_truth = []
    gray_images, color_images, masks = [], [], []
    for cam in cameras:
        gain = rng.uniform(*spec.gain_range)
        bias = rng.uniform(*spec.bias_range)
        act = ACTParams(np.full(3, gain), np.full(3, bias))
        act_truth.append(act)
        color = render_view(scene, cam, settings=settings)
        g = render_view(gray, cam, act=None if act.is_identity() else act, settings=settings)
        color_images.append(color.color)
        gray_images.append(g.color[..., 0].copy())
        masks.append(color.accum > 0.5)
    return SynthDataset(spec, seed, scene, gray, cameras, gray_images, color_images, masks,
                        act_truth, make_cameras(spec, holdout=True) if holdout else [])


# -- dataset directory ---------------------------------------------------------


def save_dataset(ds: SynthDataset, out_dir, holdout: bool = False) -> None:
    out = Path(out_dir)
    for sub in ("gray", "color", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_scene_ply(ds.scene, out / "scene_color.ply")
    save_scene_ply(ds.gray_scene, out / "scene_gray.ply")
    for cam, g, c, m in zip(ds.cameras, ds.gray_images, ds.color_images, ds.masks):
        save_image(out / "gray" / f"{cam.id}.png", g)
        save_image(out / "color" / f"{cam.id}.png", c)
        save_mask(out / "masks" / f"{cam.id}.png", m)
        cam.image_path = str(out / "gray" / f"{cam.id}.png")
        cam.mask_path = str(out / "masks" / f"{cam.id}.png")
    save_cameras(ds.cameras, out / "cameras.json")
    truth = {cam.id: a.to_dict() for cam, a in zip(ds.cameras, ds.act_truth)}
    (out / "act_truth.json").write_text(json.dumps(truth, indent=1))
    if holdout and ds.holdout:
        save_cameras(ds.holdout, out / "cameras_holdout.json")


def load_dataset(root, spec: SynthSpec | None = None, seed: int = 0) -> SynthDataset:
    root = Path(root)
    cameras = load_cameras(root / "cameras.json")
    truth = json.loads((root / "act_truth.json").read_text())
    holdout = load_cameras(root / "cameras_holdout.json") if (root / "cameras_holdout.json").exists() else []
    return SynthDataset(
        spec or SynthSpec(view_count=len(cameras)), seed,
        load_scene_ply(root / "scene_color.ply"), load_scene_ply(root / "scene_gray.ply"), cameras,
        [load_gray(root / "gray" / f"{c.id}.png", c.shape) for c in cameras],
        [load_image(root / "color" / f"{c.id}.png", c.shape) for c in cameras],
        [load_mask(root / "masks" / f"{c.id}.png", c.shape) for c in cameras],
        [ACTParams(truth[c.id]["w"], truth[c.id]["b"]) for c in cameras],
        holdout,
    )


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
