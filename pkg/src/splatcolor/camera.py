"""Pinhole cameras, projection, and the JSON camera manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .act import ACTParams
from .errors import CalibrationError, InvalidInputError, SchemaError
from .scene import quat_to_rotmat, rotmat_to_quat

ORTHO_TOL = 1e-4


@dataclass
class CameraView:
    """Pinhole camera with a world-to-camera pose ``x_cam = R @ x_world + t``.

    Pixel coordinates put pixel centers on integers: column ``j`` of row ``i``
    sits at ``(j, i)``. Camera axes follow the OpenCV convention (x right,
    y down, z forward).
    """

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_path: str | None = None
    mask_path: str | None = None
    act: ACTParams | None = None
    quat: np.ndarray | None = None  # as given in the manifest, kept for round trips

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.quat is None:
            self.quat = rotmat_to_quat(self.R)
        self.validate()

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CalibrationError(f"camera {self.id}: principal point outside the image")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise CalibrationError(f"camera {self.id}: rotation is not orthonormal (error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer pixel coordinates ``(u, v)`` of every pixel, each ``(H, W)``."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def camera_rays(self) -> np.ndarray:
        """Unit ray directions in camera space, ``(H, W, 3)``."""
        u, v = self.pixel_grid()
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def world_rays(self) -> np.ndarray:
        """Unit ray directions in world space, ``(H, W, 3)``."""
        return self.camera_rays() @ self.R

    def scaled(self, factor: float) -> CameraView:
        """Camera for an image resized by ``factor`` (pixel centers stay on integers)."""
        return CameraView(
            self.id, int(round(self.width * factor)), int(round(self.height * factor)),
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            self.R.copy(), self.t.copy(), act=self.act, quat=self.quat.copy(),
        )


class Projection(NamedTuple):
    pixel: np.ndarray
    depth: float
    behind: bool


def project(camera: CameraView, point) -> Projection:
    """Project a world point. Points with camera-space ``z <= 0`` come back tagged ``behind``."""
    pc = camera.R @ np.asarray(point, dtype=np.float64) + camera.t
    z = pc[2]
    if z <= 0:
        return Projection(np.array([np.nan, np.nan]), float(z), True)
    pix = np.array([camera.fx * pc[0] / z + camera.cx, camera.fy * pc[1] / z + camera.cy])
    return Projection(pix, float(z), False)


def unproject(camera: CameraView, pixel, depth):
    """World point at camera-space depth ``z`` behind ``pixel``.

    Vectorized over leading dimensions: ``pixel`` is ``(..., 2)`` and ``depth``
    broadcasts against ``(...)``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise InvalidInputError("unproject needs depth > 0")
    x = (pixel[..., 0] - camera.cx) / camera.fx * depth
    y = (pixel[..., 1] - camera.cy) / camera.fy * depth
    pc = np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)
    return (pc - camera.t) @ camera.R


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear toward the top of the
    image (negative camera y).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


# -- manifest -----------------------------------------------------------------

_REQUIRED = ("id", "width", "height", "fx", "fy", "cx", "cy", "rotation", "translation")


def camera_from_record(rec: dict, base: Path | None = None, source: str = "<record>") -> CameraView:
    for key in _REQUIRED:
        if key not in rec:
            raise SchemaError(f"{source}: camera record missing '{key}'")
    rot = np.asarray(rec["rotation"], dtype=np.float64)
    if rot.shape == (4,):
        norm = np.linalg.norm(rot)
        if abs(norm - 1.0) > ORTHO_TOL:
            raise CalibrationError(f"{source}: camera {rec['id']} quaternion norm {norm:.6f} is not 1")
        R = quat_to_rotmat(rot)
        quat = rot
    elif rot.shape in ((3, 3), (9,)):
        R = rot.reshape(3, 3)
        quat = None
    else:
        raise SchemaError(f"{source}: camera {rec['id']} rotation must be [qw,qx,qy,qz] or 3x3")
    act = None
    if rec.get("act") is not None:
        a = rec["act"]
        if "w" not in a or "b" not in a:
            raise SchemaError(f"{source}: camera {rec['id']} act block needs 'w' and 'b'")
        act = ACTParams(a["w"], a["b"])

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return str(p if p.is_absolute() or base is None else base / p)

    return CameraView(
        str(rec["id"]), int(rec["width"]), int(rec["height"]),
        float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
        R, np.asarray(rec["translation"], dtype=np.float64),
        image_path=resolve(rec.get("image")), mask_path=resolve(rec.get("mask")),
        act=act, quat=quat,
    )


def camera_to_record(cam: CameraView, base: Path | None = None) -> dict:
    def rel(p):
        if p is None:
            return None
        if base is not None:
            # relative even across directories so outputs do not embed absolute paths
            return os.path.relpath(Path(p).resolve(), Path(base).resolve())
        return str(p)

    rec = {
        "id": cam.id, "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": [float(x) for x in cam.quat],
        "translation": [float(x) for x in cam.t],
        "image": rel(cam.image_path),
    }
    if cam.mask_path is not None:
        rec["mask"] = rel(cam.mask_path)
    if cam.act is not None:
        rec["act"] = cam.act.to_dict()
    return rec


def load_cameras(path) -> list[CameraView]:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(records, list):
        raise SchemaError(f"{path}: camera manifest must be a JSON array")
    cams = [camera_from_record(r, path.parent, str(path)) for r in records]
    ids = [c.id for c in cams]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate camera ids")
    return cams


def save_cameras(cameras, path, base=None) -> None:
    """``base`` is the directory the file will finally live in (default: its parent)."""
    path = Path(path)
    records = [camera_to_record(c, base or path.parent) for c in cameras]
    path.write_text(json.dumps(records, indent=1))
