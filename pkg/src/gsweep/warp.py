"""View clustering and mesh-guided backward warping between views.

Views are grouped by k-means over camera centers with the group medoid
as anchor. Warping gathers destination pixels: each masked pixel is
lifted to 3-D with the destination mesh depth, reprojected into the
source view, checked against the source mesh depth for occlusion, and
bilinearly sampled on success.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .geometry import TriangleMesh
from .meshrender import render_mesh_depth
from .scene import Camera, DepthMap


@dataclass(frozen=True)
class ViewGroups:
    """Partition of views with one anchor view per group."""

    assignments: np.ndarray  # (N,) group id per view
    anchors: np.ndarray      # (L,) view index per group

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        anc = np.asarray(self.anchors, dtype=np.int64)
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "anchors", anc)
        for g, view in enumerate(anc):
            if a[view] != g:
                raise ValueError(f"anchor {view} not inside group {g}")

    @property
    def group_count(self) -> int:
        return len(self.anchors)

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == group)


def _kmeans_once(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(points)
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for g in range(k):  # re-seed empty clusters with the farthest point
            if not np.any(new_assign == g):
                far = np.argmax(d2[np.arange(n), new_assign])
                new_assign[far] = g
        if np.array_equal(new_assign, assign) and _ > 0:
            break
        assign = new_assign
        for g in range(k):
            centers[g] = points[assign == g].mean(axis=0)
    return assign


def cluster_views(cameras: Sequence[Camera], groups: int,
                  restarts: int = 20, seed: int = 0) -> ViewGroups:
    """K-means over camera centers; anchors are group medoids.

    Runs the given number of seeded restarts and keeps the assignment
    with the lowest within-cluster sum of squares. The medoid minimizes
    the summed Euclidean distance to its group, ties broken by the
    lowest view index.
    """
    n = len(cameras)
    if not (1 <= groups <= n):
        raise ValueError(f"cannot make {groups} groups from {n} views")
    points = np.stack([cam.center for cam in cameras])
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        assign = _kmeans_once(points, groups, rng)
        centers = np.stack([points[assign == g].mean(axis=0)
                            for g in range(groups)])
        inertia = float(((points - centers[assign]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best_inertia, best_assign = inertia, assign

    anchors = np.zeros(groups, dtype=np.int64)
    for g in range(groups):
        members = np.flatnonzero(best_assign == g)
        dists = np.linalg.norm(
            points[members][:, None, :] - points[members][None, :, :],
            axis=2).sum(axis=1)
        anchors[g] = members[np.argmin(dists)]  # argmin takes the first tie
    return ViewGroups(assignments=best_assign, anchors=anchors)


def kmeans_inertia(cameras: Sequence[Camera], groups: ViewGroups) -> float:
    points = np.stack([cam.center for cam in cameras])
    total = 0.0
    for g in range(groups.group_count):
        pts = points[groups.members(g)]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


@dataclass
class WarpResult:
    warped: np.ndarray    # (H, W, C)
    valid: np.ndarray     # (H, W) bool
    src_uv: np.ndarray    # (H, W, 2) source sample coords, NaN where invalid
    missing_depth: int    # masked pixels without destination mesh depth


def bilinear_sample(image: np.ndarray, uv: np.ndarray):
    """Sample (H, W, C) at continuous coords (N, 2); returns (values, inside).

    Coordinates follow the pixel-center convention: (col + 0.5, row + 0.5)
    hits pixel (row, col) exactly. Samples needing neighbors outside the
    frame are reported as not inside.
    """
    h, w = image.shape[:2]
    x = np.asarray(uv[..., 0], dtype=np.float64) - 0.5
    y = np.asarray(uv[..., 1], dtype=np.float64) - 0.5
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, w - 2) if w > 1 else \
        np.zeros_like(xc, dtype=np.int64)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, h - 2) if h > 1 else \
        np.zeros_like(yc, dtype=np.int64)
    fx = xc - x0
    fy = yc - y0
    if image.ndim == 2:
        img = image[..., None]
    else:
        img = image
    v00 = img[y0, x0]
    v01 = img[y0, np.minimum(x0 + 1, w - 1)]
    v10 = img[np.minimum(y0 + 1, h - 1), x0]
    v11 = img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    fx = fx[..., None]
    fy = fy[..., None]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    if image.ndim == 2:
        out = out[..., 0]
    return out, inside


def warp_image(src_image: np.ndarray, src_camera: Camera, dst_camera: Camera,
               mesh: TriangleMesh, dst_mask: np.ndarray,
               depth_tol: float = 0.01,
               init: Optional[np.ndarray] = None,
               src_depth: Optional[DepthMap] = None,
               dst_depth: Optional[DepthMap] = None) -> WarpResult:
    """Backward-warp source content onto masked destination pixels.

    A destination pixel is valid when the mesh provides depth there, the
    lifted point lands inside the source frame, and its source-camera
    depth agrees with the source mesh depth within the relative
    tolerance (occlusion test). Invalid pixels keep the init content
    (zeros when not given) for a downstream refiner to fill.
    """
    h, w = dst_camera.height, dst_camera.width
    mask = np.asarray(dst_mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} != {(h, w)}")
    channels = 1 if src_image.ndim == 2 else src_image.shape[2]
    if init is None:
        warped = np.zeros((h, w, channels)) if src_image.ndim == 3 \
            else np.zeros((h, w))
    else:
        warped = np.array(init, dtype=np.float64, copy=True)
    valid = np.zeros((h, w), dtype=bool)
    uv_map = np.full((h, w, 2), np.nan)
    if not mask.any():
        return WarpResult(warped=warped, valid=valid, src_uv=uv_map,
                          missing_depth=0)

    if dst_depth is None:
        dst_depth = render_mesh_depth(mesh, dst_camera)
    if src_depth is None:
        src_depth = render_mesh_depth(mesh, src_camera)

    ys, xs = np.nonzero(mask)
    has_depth = dst_depth.valid[ys, xs]
    missing = int((~has_depth).sum())
    ys, xs = ys[has_depth], xs[has_depth]
    if ys.size == 0:
        return WarpResult(warped=warped, valid=valid, src_uv=uv_map,
                          missing_depth=missing)

    uv_dst = np.column_stack([xs + 0.5, ys + 0.5])
    points = dst_camera.unproject(uv_dst, dst_depth.values[ys, xs])
    uv_src, z_src = src_camera.project(points)
    in_front = z_src > 1e-9

    # Occlusion: the reprojected depth must match the source mesh depth.
    col = np.clip(np.floor(uv_src[:, 0]).astype(np.int64), 0,
                  src_camera.width - 1)
    row = np.clip(np.floor(uv_src[:, 1]).astype(np.int64), 0,
                  src_camera.height - 1)
    src_d = src_depth.values[row, col]
    src_ok = src_depth.valid[row, col]
    visible = in_front & src_ok & (
        np.abs(z_src - src_d) <= depth_tol * np.maximum(src_d, 1e-12))

    sampled, inside = bilinear_sample(src_image, uv_src)
    good = visible & inside
    warped[ys[good], xs[good]] = sampled[good]
    valid[ys[good], xs[good]] = True
    uv_map[ys[good], xs[good]] = uv_src[good]
    return WarpResult(warped=warped, valid=valid, src_uv=uv_map,
                      missing_depth=missing)


def propagate_reference(reference_image: np.ndarray, ref_camera: Camera,
                        groups: ViewGroups, cameras: Sequence[Camera],
                        mesh: TriangleMesh, masks: Sequence[np.ndarray],
                        depth_tol: float = 0.01,
                        inits: Optional[Sequence[np.ndarray]] = None,
                        depths: Optional[Sequence[DepthMap]] = None,
                        ref_depth: Optional[DepthMap] = None
                        ) -> Dict[int, WarpResult]:
    """Warp the inpainted reference into every anchor view's mask."""
    if ref_depth is None:
        ref_depth = render_mesh_depth(mesh, ref_camera)
    out = {}
    for g in range(groups.group_count):
        a = int(groups.anchors[g])
        out[a] = warp_image(
            reference_image, ref_camera, cameras[a], mesh, masks[a],
            depth_tol=depth_tol,
            init=None if inits is None else inits[a],
            src_depth=ref_depth,
            dst_depth=None if depths is None else depths[a])
    return out


def propagate_anchors(anchor_images: Dict[int, np.ndarray],
                      groups: ViewGroups, cameras: Sequence[Camera],
                      mesh: TriangleMesh, masks: Sequence[np.ndarray],
                      depth_tol: float = 0.01,
                      inits: Optional[Sequence[np.ndarray]] = None,
                      depths: Optional[Sequence[DepthMap]] = None
                      ) -> Dict[int, WarpResult]:
    """Warp each group's refined anchor into the remaining member views.

    The anchor itself maps to an identity result covering its mask.
    """
    out = {}
    for g in range(groups.group_count):
        a = int(groups.anchors[g])
        a_img = anchor_images[a]
        a_depth = depths[a] if depths is not None else \
            render_mesh_depth(mesh, cameras[a])
        for v in groups.members(g):
            v = int(v)
            if v == a:
                mask = np.asarray(masks[v], dtype=bool)
                if inits is None:
                    warped = np.where(mask[..., None], a_img, 0.0) \
                        if a_img.ndim == 3 else np.where(mask, a_img, 0.0)
                else:
                    warped = np.array(inits[v], dtype=np.float64, copy=True)
                    warped[mask] = a_img[mask]
                uv = np.full(mask.shape + (2,), np.nan)
                ys, xs = np.nonzero(mask)
                uv[ys, xs, 0] = xs + 0.5
                uv[ys, xs, 1] = ys + 0.5
                out[v] = WarpResult(warped=warped, valid=mask.copy(),
                                    src_uv=uv, missing_depth=0)
                continue
            out[v] = warp_image(
                a_img, cameras[a], cameras[v], mesh, masks[v],
                depth_tol=depth_tol,
                init=None if inits is None else inits[v],
                src_depth=a_depth,
                dst_depth=None if depths is None else depths[v])
    return out
