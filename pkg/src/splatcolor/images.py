"""PNG / raw image I/O. Everything in memory is linear float64 in [0, 1]."""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .errors import DimensionError, InvalidInputError


def _read(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InvalidInputError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise InvalidInputError(f"{path}: unsupported pixel type {img.dtype}")
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        img = img[..., ::-1]  # BGR -> RGB
    return np.ascontiguousarray(img)


def load_image(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """RGB image ``(H, W, 3)``; single-channel files are replicated to three channels."""
    img = _read(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if shape is not None and img.shape[:2] != tuple(shape):
        raise DimensionError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, camera expects {shape[1]}x{shape[0]}")
    return img


def load_gray(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    img = _read(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if shape is not None and img.shape != tuple(shape):
        raise DimensionError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, camera expects {shape[1]}x{shape[0]}")
    return img


def load_mask(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean foreground mask; any nonzero value is foreground."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InvalidInputError(f"cannot read mask {path}")
    if img.ndim == 3:
        img = img.max(axis=2)
    mask = img != 0
    if shape is not None and mask.shape != tuple(shape):
        raise DimensionError(f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, camera expects {shape[1]}x{shape[0]}")
    return mask


def to_uint(img, bits: int = 16) -> np.ndarray:
    if bits not in (8, 16):
        raise InvalidInputError("bits must be 8 or 16")
    peak = 255.0 if bits == 8 else 65535.0
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * peak)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def save_image(path, img, bits: int = 16) -> None:
    """Write a gray ``(H, W)`` or RGB ``(H, W, 3)`` image, clamped to [0, 1]."""
    q = to_uint(img, bits)
    if q.ndim == 3:
        q = np.ascontiguousarray(q[..., ::-1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write {path}")


def save_mask(path, mask) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.asarray(mask, dtype=np.uint8) * 255):
        raise OSError(f"cannot write {path}")


def save_depth(path, depth, fmt: str = "png16") -> dict:
    """Write a depth map plus ``<path>.json`` describing how to decode it.

    ``png16`` maps ``[min, max]`` of the positive depths linearly onto 1..65535
    (0 marks pixels without coverage); ``raw`` writes little-endian float32.
    """
    depth = np.asarray(depth, dtype=np.float64)
    path = Path(path)
    valid = depth > 0
    lo = float(depth[valid].min()) if valid.any() else 0.0
    hi = float(depth[valid].max()) if valid.any() else 0.0
    meta = {"format": fmt, "height": depth.shape[0], "width": depth.shape[1], "min": lo, "max": hi}
    if fmt == "png16":
        span = hi - lo if hi > lo else 1.0
        q = np.where(valid, 1 + np.round((depth - lo) / span * 65534), 0).astype(np.uint16)
        cv2.imwrite(str(path), q)
    elif fmt == "raw":
        depth.astype("<f4").tofile(path)
    else:
        raise InvalidInputError(f"unknown depth format {fmt!r}")
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))
    return meta


def load_depth(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta["format"] == "raw":
        return np.fromfile(path, dtype="<f4").astype(np.float64).reshape(meta["height"], meta["width"])
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED).astype(np.float64)
    span = meta["max"] - meta["min"] if meta["max"] > meta["min"] else 1.0
    return np.where(q > 0, meta["min"] + (q - 1) / 65534 * span, 0.0)


def downscale(img, factor: int) -> np.ndarray:
    """Box-filter downscale by an integer factor (trailing rows/cols are dropped)."""
    img = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return img
    h = img.shape[0] // factor
    w = img.shape[1] // factor
    cropped = img[: h * factor, : w * factor]
    shape = (h, factor, w, factor) + img.shape[2:]
    return cropped.reshape(shape).mean(axis=(1, 3))


def downscale_grad(grad_small, factor: int, full_shape) -> np.ndarray:
    """Adjoint of :func:`downscale`: spread each coarse gradient over its block."""
    grad_small = np.asarray(grad_small, dtype=np.float64)
    if factor == 1:
        return grad_small
    up = np.repeat(np.repeat(grad_small, factor, axis=0), factor, axis=1) / (factor * factor)
    out = np.zeros(full_shape)
    out[: up.shape[0], : up.shape[1]] = up
    return out
