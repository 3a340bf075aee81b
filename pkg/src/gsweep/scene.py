"""Scene, camera, and view containers.

A Gaussian scene is stored struct-of-arrays: each primitive is a flat
elliptical disk (surfel) with a world-space center, a unit quaternion
whose rotated x/y axes span the disk and whose z axis is the disk
normal, two axis lengths, an opacity, degree-3 spherical-harmonic
color coefficients, and a removal score used by the object-removal
and mask-detection stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SH_COEFFS = 16  # degree 0..3 per color channel
QUAT_TOL = 1e-6
ROT_TOL = 1e-6


class SceneError(ValueError):
    """Invalid scene, camera, or view data."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GaussianPrimitive:
    """Single-surfel view, mainly for tests and debugging."""

    center: np.ndarray        # (3,)
    tangent_frame: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    scale: np.ndarray         # (2,) disk axis lengths, > 0
    opacity: float            # in [0, 1]
    sh_coeffs: np.ndarray     # (16, 3)
    removal_score: float      # in [0, 1]


@dataclass(frozen=True)
class GaussianScene:
    """Ordered collection of surfel primitives plus global scene data."""

    centers: np.ndarray         # (M, 3)
    quats: np.ndarray           # (M, 4) (w, x, y, z), unit norm
    scales: np.ndarray          # (M, 2), > 0
    opacities: np.ndarray       # (M,) in [0, 1]
    sh: np.ndarray              # (M, 16, 3)
    removal_scores: np.ndarray  # (M,) in [0, 1]
    background: np.ndarray = field(
        default_factory=lambda: np.zeros(3, dtype=np.float32))
    extent: float = 1.0

    def __post_init__(self):
        m = len(self.centers)
        shapes = {
            "centers": (m, 3), "quats": (m, 4), "scales": (m, 2),
            "opacities": (m,), "sh": (m, SH_COEFFS, 3),
            "removal_scores": (m,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != want:
                raise SceneError(f"{name} has shape {arr.shape}, expected {want}")
            object.__setattr__(self, name, _freeze(arr))
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        object.__setattr__(self, "background", _freeze(bg))
        if not (self.extent > 0):
            raise SceneError(f"extent must be positive, got {self.extent}")

    def __len__(self) -> int:
        return len(self.centers)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[i].copy(),
            tangent_frame=self.quats[i].copy(),
            scale=self.scales[i].copy(),
            opacity=float(self.opacities[i]),
            sh_coeffs=self.sh[i].copy(),
            removal_score=float(self.removal_scores[i]),
        )

    def validate(self) -> None:
        """Raise SceneError on the first primitive violating an invariant."""
        if len(self) == 0:
            return
        bad = np.flatnonzero((self.opacities < 0) | (self.opacities > 1))
        if bad.size:
            raise SceneError(f"opacity out of [0,1] at primitive {bad[0]}")
        bad = np.flatnonzero((self.removal_scores < 0) | (self.removal_scores > 1))
        if bad.size:
            raise SceneError(f"removal_score out of [0,1] at primitive {bad[0]}")
        bad = np.flatnonzero(np.any(self.scales <= 0, axis=1))
        if bad.size:
            raise SceneError(f"non-positive scale at primitive {bad[0]}")
        norms = np.linalg.norm(self.quats.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_TOL)
        if bad.size:
            raise SceneError(f"non-unit quaternion at primitive {bad[0]}")
        if not np.all(np.isfinite(self.centers)):
            raise SceneError("non-finite center")

    def with_scores(self, scores: np.ndarray) -> "GaussianScene":
        """Copy of the scene with removal scores replaced, all else shared."""
        scores = np.asarray(scores, dtype=self.removal_scores.dtype)
        return replace(self, removal_scores=scores)

    def subset(self, index: np.ndarray) -> "GaussianScene":
        """Scene restricted to the given primitive indices (order kept)."""
        return replace(
            self,
            centers=self.centers[index],
            quats=self.quats[index],
            scales=self.scales[index],
            opacities=self.opacities[index],
            sh=self.sh[index],
            removal_scores=self.removal_scores[index],
        )

    def appended(self, centers, quats, scales, opacities, sh,
                 removal_scores) -> "GaussianScene":
        """Scene with extra primitives appended after the existing ones."""
        dt = self.centers.dtype
        return replace(
            self,
            centers=np.concatenate([self.centers, np.asarray(centers, dt)]),
            quats=np.concatenate([self.quats, np.asarray(quats, dt)]),
            scales=np.concatenate([self.scales, np.asarray(scales, dt)]),
            opacities=np.concatenate(
                [self.opacities, np.asarray(opacities, dt)]),
            sh=np.concatenate([self.sh, np.asarray(sh, dt)]),
            removal_scores=np.concatenate(
                [self.removal_scores, np.asarray(removal_scores, dt)]),
        )


def quat_to_rot(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); (..., 4) -> (..., 3, 3).

    Columns of the result are the rotated basis vectors: columns 0 and 1
    span the surfel disk, column 2 is the disk normal.
    """
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - z * w)
    rot[..., 0, 2] = 2 * (x * z + y * w)
    rot[..., 1, 0] = 2 * (x * y + z * w)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - x * w)
    rot[..., 2, 0] = 2 * (x * z - y * w)
    rot[..., 2, 1] = 2 * (y * z + x * w)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (3, 3)."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; extrinsics map world to camera coordinates, +z forward.

    Pixel (row, col) is sampled at continuous image coordinates
    (col + 0.5, row + 0.5); projection is u = fx * X/Z + cx, v = fy * Y/Z + cy.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # (3, 3) world -> camera rotation
    t: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", _freeze(R))
        object.__setattr__(self, "t", _freeze(t))
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneError("principal point outside the image")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("non-positive resolution")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > ROT_TOL or np.linalg.det(R) < 0:
            raise SceneError(f"rotation not orthonormal (max error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def pixel_dirs(self) -> np.ndarray:
        """World-space ray directions per pixel, (H, W, 3).

        Scaled so that camera-space depth equals the ray parameter:
        point(z) = center + z * dir.
        """
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        dx, dy = np.meshgrid(xs, ys)
        d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
        return d_cam @ self.R  # (R^T d)^T rows

    def project(self, points: np.ndarray):
        """Project world points (N, 3); returns (uv (N, 2), z (N,))."""
        p = np.asarray(points, dtype=np.float64)
        cam = p @ self.R.T + self.t
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[..., 0] / z + self.cx
            v = self.fy * cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World points from continuous image coords (N, 2) and depths (N,)."""
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1) * depth[..., None]
        return (d_cam - self.t) @ self.R

    def scaled(self, factor: float) -> "Camera":
        """Camera for a resolution scaled by `factor` (same field of view)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return Camera(fx=self.fx * sx, fy=self.fy * sy,
                      cx=self.cx * sx, cy=self.cy * sy,
                      width=w, height=h, R=self.R, t=self.t)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth with validity; depths are camera-space z, > 0 where valid."""

    values: np.ndarray  # (H, W) float
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if v.shape != m.shape or v.ndim != 2:
            raise SceneError("depth values/valid shape mismatch")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "valid", _freeze(m))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class View:
    """One captured view: image, camera, object mask, optional extras."""

    image: np.ndarray              # (H, W, 3) float in [0, 1]
    camera: Camera
    object_mask: np.ndarray        # (H, W) bool
    inpaint_mask: Optional[np.ndarray] = None  # (H, W) bool
    mono_depth: Optional[DepthMap] = None

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        img = np.asarray(self.image)
        if img.shape != (h, w, 3):
            raise SceneError(
                f"image shape {img.shape} does not match camera {h}x{w}")
        object.__setattr__(self, "image", _freeze(img))
        mask = np.asarray(self.object_mask, dtype=bool)
        if mask.shape != (h, w):
            raise SceneError("object mask resolution mismatch")
        object.__setattr__(self, "object_mask", _freeze(mask))
        if self.inpaint_mask is not None:
            pm = np.asarray(self.inpaint_mask, dtype=bool)
            if pm.shape != (h, w):
                raise SceneError("inpaint mask resolution mismatch")
            object.__setattr__(self, "inpaint_mask", _freeze(pm))
        if self.mono_depth is not None and self.mono_depth.shape != (h, w):
            raise SceneError("mono depth resolution mismatch")


@dataclass(frozen=True)
class ViewSet:
    """Views sorted by index plus an optional reference-view index."""

    views: tuple
    reference_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if self.reference_index is not None and not (
                0 <= self.reference_index < len(self.views)):
            raise SceneError(
                f"reference index {self.reference_index} out of range")

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> View:
        return self.views[i]

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    def object_masks(self):
        return [v.object_mask for v in self.views]

    def inpaint_masks(self):
        return [v.inpaint_mask for v in self.views]
