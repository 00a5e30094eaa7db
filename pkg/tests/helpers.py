"""Shared builders and slow reference implementations for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.special import sph_harm_y

from splatcolor.camera import CameraView, look_at
from splatcolor.render import DEFAULT_SETTINGS
from splatcolor.scene import SplatScene, quat_to_rotmat, rotmat_to_quat
from splatcolor.sh import num_coeffs


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n=40, degree=3, spread=0.6, scale=(0.05, 0.2), sh_scale=0.3, opacity=(0.3, 0.95)):
    """Disks scattered in a box around the origin, loosely facing +-z."""
    centers = rng.uniform(-spread, spread, (n, 3))
    centers[:, 2] *= 0.5
    # tilt each disk at most ~50 degrees away from the z axis so most are visible
    axis = rng.normal(size=(n, 3))
    axis[:, 2] = 0
    axis /= np.linalg.norm(axis, axis=1, keepdims=True) + 1e-12
    ang = rng.uniform(-0.9, 0.9, n)
    quats = np.column_stack([np.cos(ang / 2), axis * np.sin(ang / 2)[:, None]])
    scales = rng.uniform(*scale, (n, 2))
    opac = rng.uniform(*opacity, n)
    sh = rng.normal(0, sh_scale, (n, 3, num_coeffs(degree)))
    sh[:, :, 0] = rng.uniform(-1.2, 1.2, (n, 3))
    return SplatScene.from_activated(centers, quats, scales, opac, sh)


def front_camera(size=32, distance=3.0, fov_deg=40.0, eye=None, view_id="cam"):
    eye = np.array([0.0, 0.0, -distance]) if eye is None else np.asarray(eye, dtype=float)
    R, t = look_at(eye, np.zeros(3))
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    return CameraView(view_id, size, size, f, f, (size - 1) / 2, (size - 1) / 2, R, t)


def random_camera(rng, size=32, view_id="cam"):
    d = rng.normal(size=3)
    d[2] = -abs(d[2]) - 0.5
    d /= np.linalg.norm(d)
    return front_camera(size, rng.uniform(2.5, 3.5), rng.uniform(30, 50), eye=d * rng.uniform(2.5, 3.5),
                        view_id=view_id)


def scipy_real_sh(dirs, degree):
    """Real SH (splat-trainer sign convention) from scipy's complex harmonics."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = dirs.T
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), theta, phi)  # includes the Condon-Shortley phase
            if m < 0:
                cols.append(np.sqrt(2) * Y.imag)
            elif m == 0:
                cols.append(Y.real)
            else:
                cols.append(np.sqrt(2) * Y.real)
    return np.stack(cols, axis=-1)


def brute_render(scene: SplatScene, cam: CameraView, act=None, settings=DEFAULT_SETTINGS):
    """Per-pixel loop over every disk: intersect, sort, composite.

    Uses only numpy and the SH oracle above. Culling mirrors the documented
    renderer rules: hits beyond the sigma cutoff or below the alpha floor are
    dropped, and blending stops once transmittance falls below ``t_min``.
    Returns (color, depth, accum, per-pixel list of (gaussian, weight)).
    """
    H, W = cam.height, cam.width
    frames = quat_to_rotmat(scene.rotations / np.linalg.norm(scene.rotations, axis=1, keepdims=True))
    scales = scene.scales
    opac = scene.opacities
    origin = cam.center
    bg = np.asarray(settings.background, float)
    K = scene.sh.shape[2]
    degree = int(np.sqrt(K)) - 1
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    accum = np.zeros((H, W))
    lists = {}
    cut2 = settings.sigma_cutoff ** 2
    for i in range(H):
        for j in range(W):
            d_cam = np.array([(j - cam.cx) / cam.fx, (i - cam.cy) / cam.fy, 1.0])
            d = cam.R.T @ d_cam
            d /= np.linalg.norm(d)
            hits = []
            for g in range(len(scene)):
                tu, tv, n = frames[g][:, 0], frames[g][:, 1], frames[g][:, 2]
                den = n @ d
                if abs(den) < 1e-9:
                    continue
                t = n @ (scene.centers[g] - origin) / den
                if t <= settings.near:
                    continue
                rel = origin + t * d - scene.centers[g]
                u = rel @ tu / scales[g, 0]
                v = rel @ tv / scales[g, 1]
                r2 = u * u + v * v
                if r2 > cut2:
                    continue
                a = min(settings.alpha_max, opac[g] * np.exp(-0.5 * r2))
                if a < settings.alpha_min:
                    continue
                hits.append((t, g, a))
            hits.sort(key=lambda h: (h[0], h[1]))
            T = 1.0
            c = np.zeros(3)
            dep = 0.0
            contrib = []
            basis = scipy_real_sh(d, degree)[0]
            for t, g, a in hits:
                w = a * T
                col = np.maximum(0.5 + scene.sh[g] @ basis, 0.0)
                if act is not None:
                    col = act.w * col + act.b
                c += w * col
                dep += w * t * (cam.R @ d)[2]
                contrib.append((g, w))
                T *= 1 - a
                if T < settings.t_min:
                    break
            acc = 1 - T
            color[i, j] = c + T * bg
            accum[i, j] = acc
            depth[i, j] = dep / acc if acc > 0 else 0.0
            lists[(i, j)] = contrib
    return color, depth, accum, lists


def disk_facing(center, normal, scale, opacity, dc_rgb, degree=0):
    """Scene with one disk whose normal is ``normal``."""
    from splatcolor.sh import rgb_to_dc

    n = np.asarray(normal, float)
    n /= np.linalg.norm(n)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    tu = np.cross(a, n)
    tu /= np.linalg.norm(tu)
    tv = np.cross(n, tu)
    q = rotmat_to_quat(np.column_stack([tu, tv, n]))
    sh = np.zeros((1, 3, num_coeffs(degree)))
    sh[0, :, 0] = rgb_to_dc(dc_rgb)
    return SplatScene.from_activated([center], [q], [[scale, scale]], [opacity], sh)


def loss_views(r, scene, cam):
    """A grayscale view and an uncolored view (random pseudo-colors, real matches)
    plus two random colored references, all at the camera's size."""
    from splatcolor.correspondence import extract_features_builtin, match_features
    from splatcolor.optim import ReferenceSet, ViewData
    from splatcolor.pseudo import PseudoColorMap
    from splatcolor.render import render_view

    h, w = cam.height, cam.width
    rendered = render_view(scene, cam).color
    mask = r.uniform(size=(h, w)) < 0.8
    valid = r.uniform(size=(h, w)) < 0.6
    pc = PseudoColorMap(np.where(valid[..., None], r.uniform(size=(h, w, 3)), 0.0), valid)
    ref_ids = ["r0", "r1"]
    colors = [r.uniform(size=(h, w, 3)) for _ in ref_ids]
    refs = ReferenceSet.build(ref_ids, colors)
    ref_feats = [extract_features_builtin(c.mean(axis=2), view_id=i) for c, i in zip(colors, ref_ids)]
    corr = match_features(extract_features_builtin(rendered.mean(axis=2) + r.normal(0, 0.05, (h, w))), ref_feats)
    gray = ViewData(cam, r.uniform(size=(h, w)), mask)
    unc = ViewData(cam, None, mask, pc, corr)
    return gray, unc, refs


ACCEPTANCE_LINES = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
