"""Real spherical-harmonic color basis up to degree 3.

Colors are evaluated as `basis(dir) @ coeffs + 0.5`, clamped at zero,
matching the common Gaussian-splat export convention where the degree-0
coefficient stores (rgb - 0.5) / C0.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Basis values for unit directions; (..., 3) -> (..., 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    b = np.empty(d.shape[:-1] + (16,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * x * y
    b[..., 5] = SH_C2[1] * y * z
    b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * x * z
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = SH_C3[1] * x * y * z
    b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_jacobian(dirs: np.ndarray) -> np.ndarray:
    """Partials of each basis value w.r.t. the direction; (..., 3) -> (..., 16, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    j = np.zeros(d.shape[:-1] + (16, 3), dtype=np.float64)

    def put(i, gx, gy, gz):
        j[..., i, 0] = gx
        j[..., i, 1] = gy
        j[..., i, 2] = gz

    put(1, zero, -SH_C1, zero)
    put(2, zero, zero, SH_C1)
    put(3, -SH_C1, zero, zero)
    put(4, SH_C2[0] * y, SH_C2[0] * x, zero)
    put(5, zero, SH_C2[1] * z, SH_C2[1] * y)
    put(6, -2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z)
    put(7, SH_C2[3] * z, zero, SH_C2[3] * x)
    put(8, 2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, zero)
    put(9, SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), zero)
    put(10, SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y)
    put(11, -2.0 * SH_C3[2] * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        SH_C3[2] * 8.0 * y * z)
    put(12, -6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z,
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy))
    put(13, SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * SH_C3[4] * x * y,
        SH_C3[4] * 8.0 * x * z)
    put(14, 2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z,
        SH_C3[5] * (xx - yy))
    put(15, SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, zero)
    return j


def eval_colors(sh: np.ndarray, dirs: np.ndarray):
    """Colors for per-primitive coefficients (M, 16, 3) and directions (M, 3).

    Returns (colors (M, 3) clamped at zero, positive mask (M, 3)).
    """
    basis = sh_basis(dirs)
    raw = np.einsum("mk,mkc->mc", basis, np.asarray(sh, dtype=np.float64)) + 0.5
    positive = raw > 0
    return np.where(positive, raw, 0.0), positive


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficients that reproduce the given colors exactly."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5
