"""Inpainting-mask detection on the pruned scene.

Object masks usually cover far more than the region that actually needs
new content: much of the background behind an object is exposed in other
views. The detector dilates the object masks, maps them onto the pruned
scene by score optimization, and keeps only pixels that are either
geometry holes (low coverage) or strongly mapped neighbors, restricted
to a padded bounding box and the dilated mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .geometry import disk_footprint
from .removal import map_masks_to_primitives
from .render import DEFAULT_SETTINGS, RenderSettings, render
from .scene import Camera, GaussianScene

BBox = Tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive upper bounds)


def dilate_masks(masks: Sequence[np.ndarray], radius: int
                 ) -> List[np.ndarray]:
    """Morphological dilation of each mask with a disk of the given radius."""
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return [np.asarray(m, dtype=bool).copy() for m in masks]
    footprint = disk_footprint(radius)
    return [ndimage.binary_dilation(np.asarray(m, dtype=bool),
                                    structure=footprint)
            for m in masks]


def mask_bbox(mask: np.ndarray, pad: int, shape) -> Optional[BBox]:
    """Tight bounding box of true pixels, padded and clipped; None if empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    h, w = shape
    return (max(int(xs.min()) - pad, 0), max(int(ys.min()) - pad, 0),
            min(int(xs.max()) + 1 + pad, w), min(int(ys.max()) + 1 + pad, h))


@dataclass
class DetectionResult:
    masks: List[np.ndarray]
    bboxes: List[Optional[BBox]]
    neighbor_renders: List[np.ndarray]  # raw score renders per view
    empty_views: List[int] = field(default_factory=list)
    loss_trace: Optional[np.ndarray] = None


def detect_inpaint_masks(pruned: GaussianScene,
                         dilated_masks: Sequence[np.ndarray],
                         cameras: Sequence[Camera],
                         steps: int = 1000,
                         bbox_pad: int = 8,
                         step_size: float = 0.05,
                         downscale: float = 1.0,
                         coverage_threshold: float = 0.5,
                         seed: int = 0,
                         settings: RenderSettings = DEFAULT_SETTINGS,
                         external_masks: Optional[Sequence[np.ndarray]] = None
                         ) -> DetectionResult:
    """Derive per-view inpainting masks covering only unseen regions.

    Maps the dilated object masks onto the pruned scene (scores reset to
    0.5 first), renders the mapped scores per view, and inside the
    padded bounding box of strong responses keeps pixels that are
    coverage holes or strong responses, intersected with the dilated
    mask. When external_masks is given (e.g. from a segmentation model
    prompted with the boxes), it replaces that final masking rule.
    """
    fresh = pruned.with_scores(
        np.full(len(pruned), 0.5, dtype=pruned.removal_scores.dtype))
    mapped = map_masks_to_primitives(
        fresh, dilated_masks, cameras, steps=steps, step_size=step_size,
        downscale=downscale, seed=seed, settings=settings)

    result = DetectionResult(masks=[], bboxes=[], neighbor_renders=[],
                             loss_trace=mapped.loss_trace)
    for i, cam in enumerate(cameras):
        out = render(mapped.scene, cam, mode="attribute", settings=settings)
        strong = out.attribute >= 0.5
        result.neighbor_renders.append(out.attribute)
        box = mask_bbox(strong, bbox_pad, (cam.height, cam.width))
        result.bboxes.append(box)
        dil = np.asarray(dilated_masks[i], dtype=bool)
        if external_masks is not None:
            result.masks.append(np.asarray(external_masks[i], dtype=bool))
            continue
        if box is None:
            result.masks.append(np.zeros((cam.height, cam.width), bool))
            result.empty_views.append(i)
            continue
        x0, y0, x1, y1 = box
        in_box = np.zeros((cam.height, cam.width), bool)
        in_box[y0:y1, x0:x1] = True
        hole = out.alpha < coverage_threshold
        result.masks.append((hole | strong) & dil & in_box)
    return result
