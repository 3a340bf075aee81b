"""Scene fine-tuning against composited targets, plus SSIM.

New surfels are seeded in the fill region by back-projecting the
completed reference depth, then appearance (SH), opacity, and centers
are optimized with Adam against per-view targets under an L1 plus
weighted (1 - SSIM) objective; disk shape stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .optim import Adam
from .render import DEFAULT_SETTINGS, PixelGradients, RenderSettings, \
    render, render_backward
from .scene import Camera, DepthMap, GaussianScene, SceneError, rot_to_quat
from .sh import rgb_to_dc

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW) - half
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL = _ssim_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering restricted to full windows."""
    half = SSIM_WINDOW // 2
    out = ndimage.convolve1d(img, _KERNEL, axis=0, mode="constant")
    out = ndimage.convolve1d(out, _KERNEL, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _filter_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filter_valid: zero-pad back to shape, then convolve."""
    half = SSIM_WINDOW // 2
    full = np.zeros(shape)
    full[half:-half, half:-half] = grad
    out = ndimage.convolve1d(full, _KERNEL, axis=0, mode="constant")
    return ndimage.convolve1d(out, _KERNEL, axis=1, mode="constant")


def _ssim_channel(a: np.ndarray, b: np.ndarray, with_grad: bool):
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    qa = _filter_valid(a * a)
    qb = _filter_valid(b * b)
    rab = _filter_valid(a * b)
    var_a = qa - mu_a * mu_a
    var_b = qb - mu_b * mu_b
    cov = rab - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())
    if not with_grad:
        return value, None
    # d mean(S) w.r.t. the first image via the filtered moment maps.
    npos = s.size
    d = b1 * b2
    ds_dmu = (2.0 * mu_b * (a2 - a1) - s * 2.0 * mu_a * (b2 - b1) * 1.0) / d
    # quotient rule: dS/dmu_a = [2 mu_b (A2 - A1) - S * 2 mu_a (B2 - B1)] / D
    ds_dq = -s / b2
    ds_dr = 2.0 * a1 / d
    ga = _filter_adjoint(ds_dmu, a.shape) \
        + 2.0 * a * _filter_adjoint(ds_dq, a.shape) \
        + b * _filter_adjoint(ds_dr, a.shape)
    return value, ga / npos


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over full 11x11 Gaussian windows.

    Channels are averaged; inputs must be the same resolution, at least
    the window size, with values in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SceneError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise SceneError("ssim needs images at least the window size")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = [_ssim_channel(a[..., c], b[..., c], False)[0]
            for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """SSIM value and its gradient with respect to the first image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SceneError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[..., None], b[..., None]
    grad = np.zeros_like(a)
    vals = []
    for c in range(a.shape[2]):
        v, g = _ssim_channel(a[..., c], b[..., c], True)
        vals.append(v)
        grad[..., c] = g / a.shape[2]
    value = float(np.mean(vals))
    return value, (grad[..., 0] if squeeze else grad)


def seed_primitives_from_depth(pruned: GaussianScene, depth: DepthMap,
                               mask: np.ndarray, camera: Camera,
                               image: np.ndarray, stride: int = 4
                               ) -> GaussianScene:
    """Back-project completed reference depth into new surfels.

    One camera-facing disk per stride-spaced masked pixel, sized to
    cover its pixel footprint, colored from the reference image, with
    opacity 0.5 and removal score 0; appended after existing primitives.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return pruned
    if not depth.valid[mask].all():
        raise SceneError("seeding needs valid depth on every masked pixel")
    off = stride // 2
    ys, xs = np.nonzero(mask)
    on_grid = (ys % stride == off) & (xs % stride == off)
    ys, xs = ys[on_grid], xs[on_grid]
    if ys.size == 0:  # mask thinner than the stride; fall back to all pixels
        ys, xs = np.nonzero(mask)
    uv = np.column_stack([xs + 0.5, ys + 0.5])
    z = depth.values[ys, xs]
    centers = camera.unproject(uv, z)

    origin = camera.center
    normals = centers - origin[None, :]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    quats = np.empty((len(centers), 4))
    for i, n in enumerate(normals):
        up = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 \
            else np.array([1.0, 0.0, 0.0])
        t0 = np.cross(up, n)
        t0 /= np.linalg.norm(t0)
        t1 = np.cross(n, t0)
        quats[i] = rot_to_quat(np.column_stack([t0, t1, n]))

    scale = (stride * z / camera.fx)[:, None].repeat(2, axis=1)
    rgb = np.asarray(image, dtype=np.float64)[ys, xs]
    sh = np.zeros((len(centers), 16, 3))
    sh[:, 0, :] = rgb_to_dc(rgb)
    return pruned.appended(
        centers=centers, quats=quats, scales=scale,
        opacities=np.full(len(centers), 0.5), sh=sh,
        removal_scores=np.zeros(len(centers)))


@dataclass
class FinetuneResult:
    scene: GaussianScene
    loss_trace: np.ndarray


def finetune(scene: GaussianScene, targets: Sequence[np.ndarray],
             cameras: Sequence[Camera], steps: int = 7000,
             sh_lr: float = 2.5e-3, opacity_lr: float = 5e-2,
             center_lr_scale: float = 1.6e-4, ssim_weight: float = 0.2,
             seed: int = 0, settings: RenderSettings = DEFAULT_SETTINGS
             ) -> FinetuneResult:
    """Optimize appearance, opacity, and centers against target images.

    One uniformly sampled view per step; loss is mean L1 plus
    ssim_weight * (1 - SSIM). Primitive count, disk shape, and removal
    scores are untouched.
    """
    if len(targets) != len(cameras) or len(cameras) == 0:
        raise SceneError("finetune needs one target per camera")
    for i, (img, cam) in enumerate(zip(targets, cameras)):
        if img.shape != (cam.height, cam.width, 3):
            raise SceneError(
                f"target {i} shape {img.shape} does not match its camera")
    if steps <= 0 or len(scene) == 0:
        return FinetuneResult(scene=scene, loss_trace=np.zeros(0))

    rng = np.random.default_rng(seed)
    sh = scene.sh.astype(np.float64).copy()
    opac = scene.opacities.astype(np.float64).copy()
    centers = scene.centers.astype(np.float64).copy()
    opt_sh = Adam(sh_lr)
    opt_op = Adam(opacity_lr)
    opt_ct = Adam(center_lr_scale * scene.extent)
    trace = np.zeros(steps)

    current = replace(scene, sh=sh, opacities=opac, centers=centers)
    for it in range(steps):
        v = int(rng.integers(len(cameras)))
        cam = cameras[v]
        target = np.asarray(targets[v], dtype=np.float64)
        out = render(current, cam, mode="color", settings=settings)
        resid = out.color - target
        n_vals = resid.size
        loss = float(np.abs(resid).mean())
        d_color = np.sign(resid) / n_vals
        if ssim_weight > 0:
            s_val, s_grad = ssim_with_grad(out.color, target)
            loss += ssim_weight * (1.0 - s_val)
            d_color = d_color - ssim_weight * s_grad
        trace[it] = loss

        grads = render_backward(current, cam, PixelGradients(d_color=d_color),
                                params=("sh", "opacity", "center"),
                                settings=settings)
        sh = opt_sh.step(sh, grads.sh)
        opac = np.clip(opt_op.step(opac, grads.opacity), 0.0, 1.0)
        centers = opt_ct.step(centers, grads.center)
        current = replace(scene, sh=sh, opacities=opac, centers=centers)

    return FinetuneResult(scene=current, loss_trace=trace)
