"""Synthetic labeled benchmark scenes with analytic oracles.

A textured background (plane disk, or floor plus wall for rooms) is
tiled with surfels and a labeled object (box or blob) is planted on it.
Cameras sit on a configurable arc. Everything downstream of the scene is
analytic: object masks come from exact ray-shape intersection against an
object expanded enough to cover splat tails, never-before-seen masks
from brute-force multi-view visibility of the background point behind
each masked pixel, and depth oracles from ray-plane intersection.
Background surfels invisible from every camera are not generated, so
ground truth and reconstructable content agree.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .render import RenderSettings, render
from .scene import Camera, DepthMap, GaussianScene, SceneError, View, \
    ViewSet, rot_to_quat
from .sceneio import save_image, save_mask, save_scene, save_view_set, \
    depth_to_pfm
from .sh import rgb_to_dc


@dataclass
class SyntheticSceneSpec:
    layout: str = "ring"            # ring | plane | room
    camera_arc: float = 360.0       # degrees
    view_count: int = 36
    object_kind: str = "box"        # box | blob
    texture_seed: int = 0
    resolution: Tuple[int, int] = (240, 135)   # width, height

    # Geometry knobs (world units). Defaults give ~3k background surfels.
    plane_radius: float = 6.0
    cam_radius: float = 4.0
    cam_height: float = 2.4
    bg_spacing: float = 0.20
    obj_spacing: float = 0.09
    box_half: Tuple[float, float, float] = (0.55, 0.45, 0.5)
    blob_radius: float = 0.55
    mask_margin: float = 0.15
    opacity: float = 0.92

    def __post_init__(self):
        if not (0 < self.camera_arc <= 360):
            raise SceneError(f"camera arc {self.camera_arc} not in (0, 360]")
        if self.view_count < 4:
            raise SceneError("need at least 4 views")
        if self.layout not in ("ring", "plane", "room"):
            raise SceneError(f"unknown layout '{self.layout}'")
        if self.object_kind not in ("box", "blob"):
            raise SceneError(f"unknown object '{self.object_kind}'")


@dataclass
class SyntheticOracle:
    gt_background: List[np.ndarray]
    nbs_masks: List[np.ndarray]
    bg_depths: List[DepthMap]
    object_indices: np.ndarray
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Analytic shapes


class _Box:
    """Axis-aligned box resting on z=0, given half extents (hx, hy, hz)."""

    def __init__(self, half, margin: float = 0.0):
        half = np.asarray(half, dtype=np.float64)
        self.lo = np.array([-half[0] - margin, -half[1] - margin, -margin])
        self.hi = np.array([half[0] + margin, half[1] + margin,
                            2 * half[2] + margin])

    def ray_t(self, origin, dirs):
        """Entry parameter of each ray, inf when missing the box."""
        d = np.asarray(dirs, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        t0 = (self.lo[None, :] - origin[None, :]) * inv
        t1 = (self.hi[None, :] - origin[None, :]) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        # Parallel rays: component bounds collapse to +-inf correctly
        # except when the origin sits inside the slab; patch those.
        par = np.abs(d) < 1e-15
        inside = (origin[None, :] >= self.lo) & (origin[None, :] <= self.hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        enter = tmin.max(axis=1)
        exit_ = tmax.min(axis=1)
        hit = (enter <= exit_) & (exit_ > 1e-9)
        return np.where(hit, np.maximum(enter, 0.0), np.inf)

    def blocks_segment(self, start, points):
        """True where the segment start -> point passes through the box."""
        d = points - start[None, :]
        t = self.ray_t(start, d)
        return t < 1.0 - 1e-9


class _Sphere:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def ray_t(self, origin, dirs):
        d = np.asarray(dirs, dtype=np.float64)
        oc = origin[None, :] - self.center[None, :]
        a = (d * d).sum(axis=1)
        b = 2.0 * (d * oc[0][None, :]).sum(axis=1)
        c = (oc * oc).sum() - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - sq) / (2 * a)
        t_far = (-b + sq) / (2 * a)
        enter = np.where(t_near > 1e-9, t_near, t_far)
        ok = hit & (enter > 1e-9)
        return np.where(ok, enter, np.inf)

    def blocks_segment(self, start, points):
        d = points - start[None, :]
        t = self.ray_t(start, d)
        return t < 1.0 - 1e-9


class _Patch:
    """Textured rectangle (or disk) spanned by two orthonormal axes."""

    def __init__(self, origin, ux, uy, lu, lv, disk=False):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.ux = np.asarray(ux, dtype=np.float64)
        self.uy = np.asarray(uy, dtype=np.float64)
        self.normal = np.cross(self.ux, self.uy)
        self.lu, self.lv = float(lu), float(lv)
        self.disk = disk

    def ray_t(self, origin, dirs):
        d = np.asarray(dirs, dtype=np.float64)
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - origin) @ self.normal) / denom
        pts = origin[None, :] + t[:, None] * d
        rel = pts - self.origin[None, :]
        a = rel @ self.ux
        b = rel @ self.uy
        if self.disk:
            inside = a * a + b * b <= self.lu * self.lu
        else:
            inside = (np.abs(a) <= self.lu) & (np.abs(b) <= self.lv)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & inside
        return np.where(ok, t, np.inf)

    def grid_points(self, spacing, rng):
        """Jittered grid of (points, (a, b) parameters) covering the patch."""
        na = max(2, int(round(2 * self.lu / spacing)))
        nb = max(2, int(round(2 * self.lv / spacing)))
        a = (np.arange(na) + 0.5) / na * 2 * self.lu - self.lu
        b = (np.arange(nb) + 0.5) / nb * 2 * self.lv - self.lv
        aa, bb = np.meshgrid(a, b)
        aa = aa.reshape(-1) + rng.uniform(-0.35, 0.35, aa.size) * spacing
        bb = bb.reshape(-1) + rng.uniform(-0.35, 0.35, bb.size) * spacing
        if self.disk:
            keep = aa * aa + bb * bb <= self.lu ** 2
            aa, bb = aa[keep], bb[keep]
        pts = self.origin[None, :] + aa[:, None] * self.ux[None, :] \
            + bb[:, None] * self.uy[None, :]
        return pts, np.column_stack([aa, bb])


def _texture(rng, reddish=False):
    """Smooth periodic color field over 2-D patch coordinates."""
    waves = 5
    freq = rng.uniform(0.6, 2.8, size=(waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(waves, 3))
    amp = rng.uniform(0.04, 0.11, size=(waves, 3))
    base = np.array([0.55, 0.35, 0.3]) if reddish else \
        rng.uniform(0.35, 0.65, size=3)

    def colors(params):
        arg = params @ freq.T                            # (N, waves)
        s = np.sin(arg[:, :, None] + phase[None, :, :])  # (N, waves, 3)
        return np.clip(base[None, :] + (s * amp[None, :, :]).sum(axis=1),
                       0.08, 0.92)

    return colors


def _look_at_camera(position, target, width, height):
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # world -> camera rows
    fx = 0.85 * width
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, R=rot, t=-rot @ position)


def _cameras(spec: SyntheticSceneSpec) -> List[Camera]:
    w, h = spec.resolution
    n = spec.view_count
    arc = np.deg2rad(spec.camera_arc)
    full = spec.camera_arc >= 360 - 1e-9
    az = np.linspace(0.0, arc, n, endpoint=not full)
    if spec.layout == "plane":
        radius, height = 0.45 * spec.cam_radius, 1.4 * spec.cam_height
        target = np.array([0.0, 0.0, 0.0])
        az = az - arc / 2.0 - np.pi / 2.0
    elif spec.layout == "room":
        radius, height = spec.cam_radius, spec.cam_height
        target = np.array([0.0, 0.0, 0.3])
        az = az - arc / 2.0 - np.pi / 2.0
    else:
        radius, height = spec.cam_radius, spec.cam_height
        target = np.array([0.0, 0.0, 0.25])
    cams = []
    for a in az:
        pos = np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(_look_at_camera(pos, target, w, h))
    return cams


def _background_patches(spec: SyntheticSceneSpec) -> List[_Patch]:
    ground = _Patch(origin=np.zeros(3), ux=np.array([1.0, 0, 0]),
                    uy=np.array([0, 1.0, 0]), lu=spec.plane_radius,
                    lv=spec.plane_radius, disk=True)
    if spec.layout != "room":
        return [ground]
    wall = _Patch(origin=np.array([0.0, 0.55 * spec.plane_radius, 1.5]),
                  ux=np.array([1.0, 0, 0]), uy=np.array([0, 0, 1.0]),
                  lu=0.8 * spec.plane_radius, lv=1.5)
    return [ground, wall]


def _object_surfels(spec: SyntheticSceneSpec, rng):
    """Surfel positions/frames/params tiling the object's visible surface."""
    tex = _texture(rng, reddish=True)
    pts, quats, colors = [], [], []
    if spec.object_kind == "box":
        hx, hy, hz = spec.box_half
        faces = [
            # origin, ux, uy, lu, lv (outward normal = ux x uy)
            ([0, -hy, hz], [0, 0, 1.0], [1.0, 0, 0], hz, hx),   # -y
            ([0, hy, hz], [1.0, 0, 0], [0, 0, 1.0], hx, hz),    # +y
            ([-hx, 0, hz], [0, 1.0, 0], [0, 0, 1.0], hy, hz),   # -x
            ([hx, 0, hz], [0, 0, 1.0], [0, 1.0, 0], hz, hy),    # +x
            ([0, 0, 2 * hz], [1.0, 0, 0], [0, 1.0, 0], hx, hy),  # top
        ]
        for origin, ux, uy, lu, lv in faces:
            patch = _Patch(np.array(origin, dtype=np.float64),
                           np.array(ux), np.array(uy), lu, lv)
            p, params = patch.grid_points(spec.obj_spacing, rng)
            q = rot_to_quat(np.column_stack(
                [patch.ux, patch.uy, patch.normal]))
            pts.append(p)
            quats.append(np.tile(q, (len(p), 1)))
            colors.append(tex(params + 3.0))
    else:
        r = spec.blob_radius
        center = np.array([0.0, 0.0, r])
        count = max(16, int(4 * np.pi * r * r / spec.obj_spacing ** 2))
        k = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * k / count)
        theta = np.pi * (1 + 5 ** 0.5) * k
        normal = np.column_stack([np.sin(phi) * np.cos(theta),
                                  np.sin(phi) * np.sin(theta), np.cos(phi)])
        p = center[None, :] + r * normal
        keep = p[:, 2] > 0.02 * r  # drop the contact cap
        p, normal = p[keep], normal[keep]
        qs = []
        for n in normal:
            up = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else \
                np.array([1.0, 0.0, 0.0])
            t0 = np.cross(up, n)
            t0 /= np.linalg.norm(t0)
            t1 = np.cross(n, t0)
            qs.append(rot_to_quat(np.column_stack([t0, t1, n])))
        pts.append(p)
        quats.append(np.asarray(qs))
        colors.append(tex(np.column_stack([theta[keep], phi[keep]])))
    return (np.concatenate(pts), np.concatenate(quats),
            np.concatenate(colors))


def _obstacle(spec: SyntheticSceneSpec, margin: float):
    if spec.object_kind == "box":
        return _Box(spec.box_half, margin=margin)
    return _Sphere([0.0, 0.0, spec.blob_radius], spec.blob_radius + margin)


def _visible_somewhere(points: np.ndarray, cameras: Sequence[Camera],
                       obstacle) -> np.ndarray:
    seen = np.zeros(len(points), dtype=bool)
    for cam in cameras:
        todo = ~seen
        if not todo.any():
            break
        pts = points[todo]
        uv, z = cam.project(pts)
        inside = (z > 1e-6) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) \
            & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        blocked = obstacle.blocks_segment(cam.center, pts)
        seen[np.flatnonzero(todo)[inside & ~blocked]] = True
    return seen


def generate_synthetic_scene(spec: SyntheticSceneSpec,
                             settings: Optional[RenderSettings] = None):
    """Build the labeled scene, its views, and the analytic oracle bundle.

    Returns (scene, views, oracle); deterministic for a fixed spec.
    """
    rng = np.random.default_rng(spec.texture_seed)
    settings = settings or RenderSettings()
    cameras = _cameras(spec)
    patches = _background_patches(spec)
    obstacle = _obstacle(spec, spec.mask_margin)

    # Background surfels: textured patches, dropping points no camera sees.
    bg_pts, bg_quats, bg_colors = [], [], []
    for patch in patches:
        tex = _texture(rng)
        p, params = patch.grid_points(spec.bg_spacing, rng)
        q = rot_to_quat(np.column_stack([patch.ux, patch.uy, patch.normal]))
        bg_pts.append(p)
        bg_quats.append(np.tile(q, (len(p), 1)))
        bg_colors.append(tex(params))
    bg_pts = np.concatenate(bg_pts)
    bg_quats = np.concatenate(bg_quats)
    bg_colors = np.concatenate(bg_colors)
    seen = _visible_somewhere(bg_pts, cameras, obstacle)
    bg_pts, bg_quats, bg_colors = bg_pts[seen], bg_quats[seen], bg_colors[seen]

    obj_pts, obj_quats, obj_colors = _object_surfels(spec, rng)
    n_bg, n_obj = len(bg_pts), len(obj_pts)

    centers = np.concatenate([bg_pts, obj_pts]).astype(np.float32)
    quats = np.concatenate([bg_quats, obj_quats]).astype(np.float32)
    sig_bg = 0.65 * spec.bg_spacing
    sig_obj = 0.65 * spec.obj_spacing
    scales = np.concatenate([
        np.full((n_bg, 2), sig_bg), np.full((n_obj, 2), sig_obj)
    ]).astype(np.float32)
    sh = np.zeros((n_bg + n_obj, 16, 3), dtype=np.float32)
    sh[:, 0, :] = rgb_to_dc(np.concatenate([bg_colors, obj_colors]))
    scene = GaussianScene(
        centers=centers, quats=quats, scales=scales,
        opacities=np.full(n_bg + n_obj, spec.opacity, dtype=np.float32),
        sh=sh, removal_scores=np.full(n_bg + n_obj, 0.5, dtype=np.float32),
        background=np.array([0.06, 0.06, 0.08]),
        extent=float(np.linalg.norm(centers, axis=1).max()))
    background_scene = scene.subset(np.arange(n_bg))

    views = []
    gt_bg, nbs_masks, depths = [], [], []
    depth_cap = 6.0 * spec.cam_radius
    for cam in cameras:
        dirs = cam.pixel_dirs().reshape(-1, 3)
        origin = cam.center
        t_obj = obstacle.ray_t(origin, dirs)
        t_bg = np.full(len(dirs), np.inf)
        for patch in patches:
            t_bg = np.minimum(t_bg, patch.ray_t(origin, dirs))
        obj_mask = np.isfinite(t_obj) & (t_obj < t_bg)

        # The depth oracle continues the ground plane under the object.
        t_plane = _Patch(np.zeros(3), np.array([1.0, 0, 0]),
                         np.array([0, 1.0, 0]), 1e9, 1e9).ray_t(origin, dirs)
        t_depth = t_bg.copy()
        miss = ~np.isfinite(t_bg)
        t_depth[miss] = t_plane[miss]
        cam_z = dirs @ cam.R[2]  # dir scaled so ray parameter = depth
        depth_vals = t_depth * cam_z
        depth_ok = np.isfinite(t_depth) & (depth_vals > 0) \
            & (depth_vals < depth_cap)
        depths.append(DepthMap(
            values=np.where(depth_ok, depth_vals, 0.0).reshape(
                cam.height, cam.width),
            valid=depth_ok.reshape(cam.height, cam.width)))

        nbs = obj_mask.copy()
        masked = np.flatnonzero(obj_mask)
        if masked.size:
            behind_ok = np.isfinite(t_bg[masked])
            pts = origin[None, :] + t_bg[masked[behind_ok], None] \
                * dirs[masked[behind_ok]]
            vis = _visible_somewhere(pts, cameras, obstacle)
            nbs[masked[behind_ok]] = ~vis
        nbs_masks.append(nbs.reshape(cam.height, cam.width))

        img = render(scene, cam, mode="color", settings=settings).color
        gt = render(background_scene, cam, mode="color",
                    settings=settings).color
        gt_bg.append(np.clip(gt, 0.0, 1.0))
        views.append(View(image=np.clip(img, 0.0, 1.0).astype(np.float32),
                          camera=cam,
                          object_mask=obj_mask.reshape(cam.height, cam.width),
                          mono_depth=depths[-1]))

    oracle = SyntheticOracle(
        gt_background=gt_bg, nbs_masks=nbs_masks, bg_depths=depths,
        object_indices=np.arange(n_bg, n_bg + n_obj),
        info={"layout": spec.layout, "arc": spec.camera_arc,
              "n_background": n_bg, "n_object": n_obj})
    return scene, ViewSet(views=views), oracle


def write_synthetic_scene(spec: SyntheticSceneSpec, out_dir,
                          settings: Optional[RenderSettings] = None):
    """Generate and store scene.ply, views/, and oracle/ under out_dir."""
    out = Path(out_dir)
    scene, views, oracle = generate_synthetic_scene(spec, settings=settings)
    os.makedirs(out, exist_ok=True)
    save_scene(scene, out / "scene.ply")
    save_view_set(views, out / "views")
    odir = out / "oracle"
    for sub in ("gt_background", "nbs_masks", "depth"):
        os.makedirs(odir / sub, exist_ok=True)
    for i in range(len(views)):
        save_image(oracle.gt_background[i],
                   odir / "gt_background" / f"{i:04d}.png")
        save_mask(oracle.nbs_masks[i], odir / "nbs_masks" / f"{i:04d}.png")
        depth_to_pfm(oracle.bg_depths[i], odir / "depth" / f"{i:04d}.pfm")
    with open(odir / "labels.json", "w") as f:
        json.dump({"object_indices": oracle.object_indices.tolist(),
                   **oracle.info}, f)
    return scene, views, oracle
