"""Real spherical harmonics in the layout used by Gaussian-splat trainers.

Coefficients are stored per channel as ``(..., 3, K)`` with ``K = (degree + 1) ** 2``.
The basis carries a ``(-1)**m`` sign relative to the textbook real SH so that
coefficients exported by splat trainers decode identically here.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import InvalidInputError

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_coeffs(k: int) -> int:
    d = int(round(np.sqrt(k))) - 1
    if d < 0 or (d + 1) ** 2 != k or d > MAX_DEGREE:
        raise InvalidInputError(f"{k} is not a valid SH coefficient count")
    return d


def rgb_to_dc(rgb):
    """Inverse of the DC decode: the f_dc value that renders as ``rgb``."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


@njit(cache=True, fastmath=False)
def sh_basis_into(x, y, z, degree, out):
    out[0] = C0
    if degree < 1:
        return
    out[1] = -C1 * y
    out[2] = C1 * z
    out[3] = -C1 * x
    if degree < 2:
        return
    xx = x * x
    yy = y * y
    zz = z * z
    xy = x * y
    yz = y * z
    xz = x * z
    out[4] = 1.0925484305920792 * xy
    out[5] = -1.0925484305920792 * yz
    out[6] = 0.31539156525252005 * (2.0 * zz - xx - yy)
    out[7] = -1.0925484305920792 * xz
    out[8] = 0.5462742152960396 * (xx - yy)
    if degree < 3:
        return
    out[9] = -0.5900435899266435 * y * (3.0 * xx - yy)
    out[10] = 2.890611442640554 * xy * z
    out[11] = -0.4570457994644658 * y * (4.0 * zz - xx - yy)
    out[12] = 0.3731763325901154 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = -0.4570457994644658 * x * (4.0 * zz - xx - yy)
    out[14] = 1.445305721320277 * z * (xx - yy)
    out[15] = -0.5900435899266435 * x * (xx - 3.0 * yy)


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Evaluate the basis for unit directions ``dirs`` of shape ``(..., 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    flat = dirs.reshape(-1, 3)
    out = np.zeros((flat.shape[0], num_coeffs(degree)))
    for i in range(flat.shape[0]):
        sh_basis_into(flat[i, 0], flat[i, 1], flat[i, 2], degree, out[i])
    return out.reshape(dirs.shape[:-1] + (num_coeffs(degree),))


def sh_eval_raw(coeffs, direction, degree: int | None = None) -> np.ndarray:
    """Pre-clamp color ``0.5 + sum_k c_k Y_k(dir)`` for coefficients ``(3, K)``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[0] != 3:
        raise InvalidInputError(f"expected coefficients of shape (3, K), got {coeffs.shape}")
    k = coeffs.shape[1]
    if degree is None:
        degree = degree_from_coeffs(k)
    if k != num_coeffs(degree):
        raise InvalidInputError(f"degree {degree} needs {num_coeffs(degree)} coefficients per channel, got {k}")
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-6:
        raise InvalidInputError(f"direction must be unit length (|dir| = {norm})")
    basis = sh_basis(direction, degree)
    return 0.5 + coeffs @ basis


def sh_eval(coeffs, direction, degree: int | None = None) -> np.ndarray:
    """Decoded RGB, clamped at zero per channel."""
    return np.maximum(sh_eval_raw(coeffs, direction, degree), 0.0)
