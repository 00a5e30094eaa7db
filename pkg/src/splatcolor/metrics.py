"""Image quality metrics on linear [0, 1] images."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError, InvalidInputError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    a, b = _check_pair(a, b)
    diff = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InvalidInputError("psnr mask selects no pixels")
        diff = diff[mask]
    mse = float(np.mean(diff))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.2126 + img[..., 1] * 0.7152 + img[..., 2] * 0.0722


def ssim_map(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    x = luminance(a)
    y = luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

    def blur(img):
        return gaussian_filter(img, SSIM_SIGMA, mode="reflect", truncate=truncate)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, mask=None) -> float:
    """Mean local SSIM on luminance (Gaussian window 11, sigma 1.5)."""
    smap = ssim_map(a, b)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InvalidInputError("ssim mask selects no pixels")
        return float(smap[mask].mean())
    return float(smap.mean())
