"""Z-buffered triangle depth rendering.

Pixels sample at their centers; triangles are binned into screen tiles,
barycentric coordinates are evaluated in screen space, and camera depth
is interpolated perspective-correct (linear in 1/z). The nearest hit
along each pixel ray wins, which matches exact per-ray triangle
intersection for triangles entirely in front of the camera; triangles
crossing the near plane are dropped.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh
from .scene import Camera, DepthMap

ZNEAR = 1e-6
_TILE = 64


def render_mesh_depth(mesh: TriangleMesh, camera: Camera) -> DepthMap:
    """Depth of the nearest mesh surface per pixel; invalid where missed."""
    h, w = camera.height, camera.width
    zbuf = np.full((h, w), np.inf)
    if mesh.is_empty:
        return DepthMap(values=np.zeros((h, w)), valid=np.zeros((h, w), bool))

    cam_v = mesh.vertices @ camera.R.T + camera.t
    z = cam_v[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam_v[:, 0] / z + camera.cx
        v = camera.fy * cam_v[:, 1] / z + camera.cy
    tri = mesh.triangles
    tz = z[tri]                      # (T, 3)
    front = np.all(tz > ZNEAR, axis=1)
    tu, tv = u[tri], v[tri]
    x0 = np.min(tu, axis=1)
    x1 = np.max(tu, axis=1)
    y0 = np.min(tv, axis=1)
    y1 = np.max(tv, axis=1)
    alive = front & (x1 >= 0) & (x0 < w) & (y1 >= 0) & (y0 < h)
    idx = np.flatnonzero(alive)
    if idx.size == 0:
        return DepthMap(values=np.zeros((h, w)), valid=np.zeros((h, w), bool))

    ntx = (w + _TILE - 1) // _TILE
    nty = (h + _TILE - 1) // _TILE
    tx0 = np.clip(np.floor(x0[idx] / _TILE), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x1[idx] / _TILE), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y0[idx] / _TILE), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y1[idx] / _TILE), 0, nty - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    reps = nx * ny
    total = int(reps.sum())
    tri_rep = np.repeat(idx, reps)
    starts = np.concatenate([[0], np.cumsum(reps)[:-1]])
    local = np.arange(total) - np.repeat(starts, reps)
    nx_rep = np.repeat(nx, reps)
    tile_id = (np.repeat(ty0, reps) + local // nx_rep) * ntx \
        + np.repeat(tx0, reps) + local % nx_rep
    order = np.argsort(tile_id, kind="stable")
    tile_sorted = tile_id[order]
    tri_sorted = tri_rep[order]
    bounds = np.searchsorted(tile_sorted, np.arange(ntx * nty + 1))

    inv_z = 1.0 / tz
    for tile in range(ntx * nty):
        cand = tri_sorted[bounds[tile]:bounds[tile + 1]]
        if cand.size == 0:
            continue
        ty, tx = divmod(tile, ntx)
        ys = np.arange(ty * _TILE, min((ty + 1) * _TILE, h))
        xs = np.arange(tx * _TILE, min((tx + 1) * _TILE, w))
        px = xs[None, :, None] + 0.5          # (1, X, 1)
        py = ys[:, None, None] + 0.5          # (Y, 1, 1)
        au, av = tu[cand, 0], tv[cand, 0]
        bu, bv = tu[cand, 1], tv[cand, 1]
        cu, cv = tu[cand, 2], tv[cand, 2]
        area = (bu - au) * (cv - av) - (bv - av) * (cu - au)
        ok = np.abs(area) > 1e-12
        inv_area = np.where(ok, 1.0 / np.where(ok, area, 1.0), 0.0)
        # Signed sub-areas give barycentric weights of the pixel center.
        w0 = ((bu - px) * (cv - py) - (bv - py) * (cu - px)) * inv_area
        w1 = ((cu - px) * (av - py) - (cv - py) * (au - px)) * inv_area
        w2 = 1.0 - w0 - w1
        inside = ok & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        iz = (w0 * inv_z[cand, 0] + w1 * inv_z[cand, 1]
              + w2 * inv_z[cand, 2])
        depth = np.where(inside & (iz > 0), 1.0 / np.where(iz > 0, iz, 1.0),
                         np.inf)
        zbuf[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = np.minimum(
            zbuf[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1], depth.min(axis=2))

    valid = np.isfinite(zbuf)
    return DepthMap(values=np.where(valid, zbuf, 0.0), valid=valid)
