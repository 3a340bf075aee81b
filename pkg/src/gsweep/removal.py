"""Mapping 2-D masks onto primitives via rendered-score optimization.

Blending weights depend only on geometry and opacity, so the rendered
score map of a view is `W @ scores` for a fixed sparse weight matrix.
The optimization therefore renders each view's weights once and runs the
remaining steps as sparse mat-vecs, which is exactly equivalent to
re-rendering every step while only the scores change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .optim import Adam
from .render import DEFAULT_SETTINGS, RenderSettings, render, \
    render_contribution_matrix
from .scene import Camera, GaussianScene, SceneError

FULL_BATCH_LIMIT = 32   # views; beyond this sample minibatches
MINIBATCH_VIEWS = 8


@dataclass
class MappingResult:
    scene: GaussianScene
    loss_trace: np.ndarray  # per-step mean L1 over the sampled views


def _downscale_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Area-average a boolean mask to (height, width), re-binarized at 0.5."""
    h, w = mask.shape
    if (w, h) == (width, height):
        return mask.astype(np.float64)
    ys = np.minimum((np.arange(h) * height) // h, height - 1)
    xs = np.minimum((np.arange(w) * width) // w, width - 1)
    acc = np.zeros((height, width))
    cnt = np.zeros((height, width))
    np.add.at(acc, (ys[:, None], xs[None, :]), mask.astype(np.float64))
    np.add.at(cnt, (ys[:, None], xs[None, :]), 1.0)
    return (acc / np.maximum(cnt, 1)) >= 0.5


def map_masks_to_primitives(
        scene: GaussianScene,
        masks: Sequence[np.ndarray],
        cameras: Sequence[Camera],
        steps: int = 1000,
        step_size: float = 0.05,
        betas=(0.9, 0.999),
        downscale: float = 1.0,
        seed: int = 0,
        settings: RenderSettings = DEFAULT_SETTINGS,
) -> MappingResult:
    """Optimize per-primitive removal scores against per-view binary masks.

    Minimizes the mean L1 difference between each view's rendered score
    map and its mask with Adam, clamping scores into [0, 1] after every
    step. Geometry, opacity, and appearance are returned bit-identical.
    """
    if len(cameras) == 0:
        raise SceneError("mask mapping needs at least one view")
    if len(masks) != len(cameras):
        raise SceneError(f"{len(masks)} masks for {len(cameras)} cameras")
    for i, (mask, cam) in enumerate(zip(masks, cameras)):
        if mask.shape != (cam.height, cam.width):
            raise SceneError(
                f"view {i}: mask shape {mask.shape} does not match camera "
                f"{cam.height}x{cam.width}")
    if len(scene) == 0:
        return MappingResult(scene=scene, loss_trace=np.zeros(0))

    weights = []
    targets = []
    for mask, cam in zip(masks, cameras):
        cam_s = cam.scaled(downscale) if downscale != 1.0 else cam
        weights.append(render_contribution_matrix(scene, cam_s, settings))
        targets.append(
            _downscale_mask(np.asarray(mask, dtype=bool),
                            cam_s.width, cam_s.height)
            .astype(np.float64).reshape(-1))

    n_views = len(cameras)
    rng = np.random.default_rng(seed)
    scores = scene.removal_scores.astype(np.float64).copy()
    opt = Adam(step_size, betas)
    trace = np.zeros(steps)
    for it in range(steps):
        if n_views <= FULL_BATCH_LIMIT:
            batch = np.arange(n_views)
        else:
            batch = rng.choice(n_views, size=MINIBATCH_VIEWS, replace=False)
        grad = np.zeros_like(scores)
        loss = 0.0
        for v in batch:
            resid = weights[v] @ scores - targets[v]
            npix = resid.size
            loss += np.abs(resid).mean()
            grad += weights[v].T @ np.sign(resid) / npix
        grad /= len(batch)
        trace[it] = loss / len(batch)
        scores = np.clip(opt.step(scores, grad), 0.0, 1.0)

    return MappingResult(
        scene=scene.with_scores(scores.astype(scene.removal_scores.dtype)),
        loss_trace=trace)


def prune(scene: GaussianScene, tau: float):
    """Split the scene at the score threshold; score >= tau means removed.

    Returns (pruned, removed); together they partition the primitives
    with the original order preserved inside each part.
    """
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    removed_idx = np.flatnonzero(scene.removal_scores >= tau)
    kept_idx = np.flatnonzero(scene.removal_scores < tau)
    return scene.subset(kept_idx), scene.subset(removed_idx)


def render_object_masks(scene: GaussianScene,
                        cameras: Sequence[Camera],
                        settings: RenderSettings = DEFAULT_SETTINGS
                        ) -> List[np.ndarray]:
    """Binary masks from the score channel at held-out cameras (>= 0.5)."""
    out = []
    for cam in cameras:
        rendered = render(scene, cam, mode="attribute", settings=settings)
        out.append(rendered.attribute >= 0.5)
    return out
