"""Depth alignment/completion, TSDF fusion, and mesh extraction.

The reference view's monocular depth is brought to scene scale with a
least-squares affine fit in a band around the fill mask, the masked
depths are completed by Laplacian-constrained filling, and all valid
depths are integrated into a truncated signed-distance volume whose zero
level set becomes the triangle mesh used for cross-view warping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes

from .poisson import FillError, fill_masked, laplacian
from .scene import Camera, DepthMap, SceneError

MIN_BAND_PIXELS = 16


class GeometryError(ValueError):
    """Degenerate inputs to depth alignment or fusion."""


@dataclass(frozen=True)
class DepthScale:
    """Affine map taking monocular depth to scene scale: a * d + b."""

    a: float
    b: float

    def __post_init__(self):
        if not np.isfinite(self.a) or self.a == 0:
            raise GeometryError(f"degenerate depth gain {self.a}")

    def apply(self, depth: np.ndarray) -> np.ndarray:
        return self.a * np.asarray(depth, dtype=np.float64) + self.b


@dataclass
class TsdfVolume:
    """Regular voxel grid of truncated signed distances and weights."""

    origin: np.ndarray      # (3,)
    voxel_size: float
    tsdf: np.ndarray        # (nx, ny, nz) in [-1, 1]
    weight: np.ndarray      # (nx, ny, nz) >= 0

    @property
    def dims(self):
        return self.tsdf.shape


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise GeometryError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return len(self.triangles) == 0


def disk_footprint(radius: int) -> np.ndarray:
    """Boolean disk of the given pixel radius (Euclidean distance)."""
    r = int(radius)
    if r <= 0:
        return np.ones((1, 1), dtype=bool)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def align_depth_scale(mono: DepthMap, rendered: DepthMap,
                      inpaint_mask: np.ndarray, band: int = 10):
    """Fit (a, b) minimizing sum((a*mono + b - rendered)^2) near the mask.

    The fit runs over the band dilate(mask, band) \\ mask restricted to
    pixels where both depths are valid. Returns (DepthScale, scaled
    DepthMap over the full frame, valid wherever mono is valid).
    """
    mask = np.asarray(inpaint_mask, dtype=bool)
    ring = ndimage.binary_dilation(mask, structure=disk_footprint(band)) & ~mask
    use = ring & mono.valid & rendered.valid
    n = int(use.sum())
    if n < MIN_BAND_PIXELS:
        raise GeometryError(
            f"alignment band has only {n} usable pixels "
            f"(needs {MIN_BAND_PIXELS})")
    x = mono.values[use]
    y = rendered.values[use]
    sx, sxx = x.sum(), (x * x).sum()
    sy, sxy = y.sum(), (x * y).sum()
    det = n * sxx - sx * sx
    if abs(det) < 1e-12 * max(n * sxx, 1.0):
        raise GeometryError("monocular depth is constant in the band")
    a = (n * sxy - sx * sy) / det
    b = (sy * sxx - sx * sxy) / det
    scale = DepthScale(a=float(a), b=float(b))
    scaled = DepthMap(values=scale.apply(mono.values), valid=mono.valid.copy())
    return scale, scaled


def complete_depth(rendered: DepthMap, guidance: DepthMap,
                   inpaint_mask: np.ndarray, lam: float = 0.01,
                   name: str = "") -> DepthMap:
    """Fill masked depths from the guidance Laplacian (hard outside the mask).

    Pixels outside the mask keep the rendered depth untouched; inside,
    the fill matches the guidance depth's Laplacian in least squares with
    a lam-weighted smoothness term, with boundary values from the
    rendered depth.
    """
    tag = f" ({name})" if name else ""
    if lam < 0:
        raise FillError(f"lambda must be non-negative{tag}")
    mask = np.asarray(inpaint_mask, dtype=bool)
    if mask.shape != rendered.shape or mask.shape != guidance.shape:
        raise SceneError(f"mask/depth resolution mismatch{tag}")
    if not mask.any():
        return rendered

    boundary = ndimage.binary_dilation(mask) & ~mask
    if not rendered.valid[boundary].all():
        bad = int((boundary & ~rendered.valid).sum())
        raise FillError(
            f"{bad} boundary pixels lack valid rendered depth{tag}")
    if not guidance.valid[mask | boundary].all():
        raise FillError(f"guidance depth invalid inside the fill region{tag}")
    border = np.zeros_like(mask)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    if (mask & border).any():
        raise FillError(f"fill mask touches the image border{tag}")

    g_lap = laplacian(guidance.values)
    filled = fill_masked(rendered.values, mask, g_lap, lam=lam,
                         x0=guidance.values)
    return DepthMap(values=filled, valid=rendered.valid | mask)


def _auto_bounds(depths: Sequence[DepthMap], cameras: Sequence[Camera],
                 margin: float):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for depth, cam in zip(depths, cameras):
        ys, xs = np.nonzero(depth.valid)
        if ys.size == 0:
            continue
        step = max(1, ys.size // 5000)
        ys, xs = ys[::step], xs[::step]
        uv = np.column_stack([xs + 0.5, ys + 0.5])
        pts = cam.unproject(uv, depth.values[ys, xs])
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise GeometryError("no valid depth to bound the volume")
    return lo - margin, hi + margin


def fuse_tsdf(depths: Sequence[DepthMap], cameras: Sequence[Camera],
              voxel_size: float, trunc: float,
              bounds=None, max_voxels: int = 128_000_000) -> TsdfVolume:
    """Weighted TSDF integration of per-view depth maps.

    Per voxel and view, the projective signed distance (depth sample
    minus voxel camera depth) is clamped to [-trunc, trunc], normalized,
    and averaged with unit weight per observing view. Voxels more than
    trunc behind an observed surface, or seen only through invalid
    pixels, are untouched.
    """
    if len(depths) == 0 or len(depths) != len(cameras):
        raise GeometryError("need one camera per depth map")
    if trunc < 2 * voxel_size:
        raise GeometryError(
            f"trunc {trunc} must be at least 2 * voxel_size ({voxel_size})")
    if bounds is None:
        lo, hi = _auto_bounds(depths, cameras, margin=2 * trunc)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2)
    if int(np.prod(dims)) > max_voxels:
        raise GeometryError(
            f"volume of {dims} voxels exceeds the budget of {max_voxels}")

    tsdf = np.ones(tuple(dims), dtype=np.float32)
    weight = np.zeros(tuple(dims), dtype=np.float32)
    grid = np.stack(np.meshgrid(
        lo[0] + voxel_size * np.arange(dims[0]),
        lo[1] + voxel_size * np.arange(dims[1]),
        lo[2] + voxel_size * np.arange(dims[2]),
        indexing="ij"), axis=-1).reshape(-1, 3)

    flat_t = tsdf.reshape(-1)
    flat_w = weight.reshape(-1)
    for depth, cam in zip(depths, cameras):
        if not depth.valid.any():
            continue
        cam_pts = grid @ cam.R.T + cam.t
        z = cam_pts[:, 2]
        front = z > 1e-9
        u = np.zeros_like(z)
        v = np.zeros_like(z)
        np.divide(cam.fx * cam_pts[:, 0], z, out=u, where=front)
        np.divide(cam.fy * cam_pts[:, 1], z, out=v, where=front)
        col = np.floor(u + cam.cx).astype(np.int64)
        row = np.floor(v + cam.cy).astype(np.int64)
        inside = front & (col >= 0) & (col < cam.width) \
            & (row >= 0) & (row < cam.height)
        col, row = col[inside], row[inside]
        ok = depth.valid[row, col]
        sel = np.flatnonzero(inside)[ok]
        sdf = depth.values[row[ok], col[ok]] - z[sel]
        upd = sdf > -trunc
        sel = sel[upd]
        val = np.minimum(sdf[upd] / trunc, 1.0).astype(np.float32)
        w_old = flat_w[sel]
        flat_t[sel] = (flat_t[sel] * w_old + val) / (w_old + 1.0)
        flat_w[sel] = w_old + 1.0

    return TsdfVolume(origin=lo, voxel_size=float(voxel_size),
                      tsdf=tsdf, weight=weight)


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching-cubes surface of the zero level set.

    Cells with any unobserved (zero-weight) corner are skipped. An empty
    surface yields an empty mesh rather than an error.
    """
    observed = volume.weight > 0
    if not observed.any() or volume.tsdf.min() > 0 or volume.tsdf.max() < 0:
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            triangles=np.zeros((0, 3), dtype=np.int64))
    # Cell (x, y, z)..(x+1, y+1, z+1) is processed only when all 8 corners
    # were observed; the library indexes its per-cell mask at the upper
    # corner of each cube.
    cell_ok = observed[:-1, :-1, :-1]
    for dx, dy, dz in ((0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0),
                       (1, 0, 1), (1, 1, 0), (1, 1, 1)):
        cell_ok = cell_ok & observed[dx:dx + cell_ok.shape[0],
                                     dy:dy + cell_ok.shape[1],
                                     dz:dz + cell_ok.shape[2]]
    cube_mask = np.zeros_like(observed)
    cube_mask[1:, 1:, 1:] = cell_ok
    if not cube_mask.any():
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            triangles=np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = marching_cubes(
            volume.tsdf.astype(np.float64), level=0.0,
            spacing=(volume.voxel_size,) * 3,
            mask=cube_mask, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            triangles=np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(vertices=verts + volume.origin[None, :],
                        triangles=faces)


def save_mesh_obj(mesh: TriangleMesh, path) -> None:
    """ASCII OBJ export."""
    with open(path, "w") as f:
        f.write("# gsweep mesh\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_mesh_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        triangles=np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh_stl(mesh: TriangleMesh, path) -> None:
    """Binary STL export."""
    tris = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    n = len(tris)
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(lengths > 1e-12, normals / np.maximum(lengths, 1e-12), 0.0)
    rec = np.zeros(n, dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)),
                             ("attr", "<u2")])
    rec["n"] = normals
    rec["v"] = tris
    with open(path, "wb") as f:
        f.write(b"\x00" * 80)
        f.write(np.uint32(n).tobytes())
        f.write(rec.tobytes())
