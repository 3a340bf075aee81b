"""Laplacian-constrained fill of masked image/depth regions.

Inside the mask the solution u minimizes

    sum_{x in mask} || lap(u)(x) - g(x) ||^2 + lam * || lap(u)(x) ||^2

with the 5-point discrete Laplacian and Dirichlet boundary values taken
from the surrounding known pixels. The stationarity condition is the
sparse normal-equation system L^T L u = L^T (g / (1 + lam) - b0), solved
with conjugate gradients (incomplete-LU preconditioned) to a relative
residual of 1e-8.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

CG_RTOL = 1e-8


class FillError(ValueError):
    """Masked region cannot be filled (bad boundary or arguments)."""


def laplacian(img: np.ndarray) -> np.ndarray:
    """5-point Laplacian with zero padding outside the frame."""
    out = -4.0 * img
    out[1:, :] += img[:-1, :]
    out[:-1, :] += img[1:, :]
    out[:, 1:] += img[:, :-1]
    out[:, :-1] += img[:, 1:]
    return out


def _masked_laplacian_system(mask: np.ndarray):
    """Sparse operator rows: lap(u) at masked pixels, split known/unknown.

    Returns (L, boundary_ops) where L maps interior unknowns to
    Laplacian values and boundary_ops maps a known-values image to the
    constant contribution b0 of each equation.
    """
    h, w = mask.shape
    n = int(mask.sum())
    ids = np.full((h, w), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    ids[ys, xs] = np.arange(n)

    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, -4.0)]
    b_rows, b_pix = [], []
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        if not inside.all():
            raise FillError(
                f"mask touches the image border at "
                f"({ys[~inside][0]}, {xs[~inside][0]})")
        nid = ids[ny, nx]
        interior = nid >= 0
        rows.append(np.flatnonzero(interior))
        cols.append(nid[interior])
        vals.append(np.ones(int(interior.sum())))
        b_rows.append(np.flatnonzero(~interior))
        b_pix.append((ny[~interior], nx[~interior]))

    L = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    return L, ids, (ys, xs), b_rows, b_pix


def fill_masked(base: np.ndarray, mask: np.ndarray, guidance_lap: np.ndarray,
                lam: float = 0.0, x0: np.ndarray | None = None) -> np.ndarray:
    """Fill base[mask] so its Laplacian tracks guidance_lap; returns a copy.

    base supplies both the output values outside the mask and the
    Dirichlet boundary ring; guidance_lap holds the target Laplacian at
    masked pixels. lam >= 0 adds the quadratic smoothness term.
    """
    if lam < 0:
        raise FillError(f"lambda must be non-negative, got {lam}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.array(base, dtype=np.float64, copy=True)

    L, ids, (ys, xs), b_rows, b_pix = _masked_laplacian_system(mask)
    n = L.shape[0]
    base = np.asarray(base, dtype=np.float64)
    b0 = np.zeros(n)
    for rows, (ny, nx) in zip(b_rows, b_pix):
        if rows.size:
            np.add.at(b0, rows, base[ny, nx])

    g = np.asarray(guidance_lap, dtype=np.float64)[ys, xs]
    rhs = L.T @ (g / (1.0 + lam) - b0)
    A = (L.T @ L).tocsc()

    guess = None
    if x0 is not None:
        guess = np.asarray(x0, dtype=np.float64)[ys, xs]
    try:
        ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        precond = spla.LinearOperator(A.shape, ilu.solve)
    except RuntimeError:
        precond = None
    sol, info = spla.cg(A, rhs, x0=guess, rtol=CG_RTOL, atol=0.0,
                        maxiter=20 * n + 200, M=precond)
    if info != 0:
        raise FillError(f"conjugate gradients did not converge (info={info})")

    out = np.array(base, dtype=np.float64, copy=True)
    out[ys, xs] = sol
    return out
