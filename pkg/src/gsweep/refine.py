"""Refinement backends and adaptation-pair synthesis.

Warped content usually carries seams and color mismatch against its
surroundings. The built-in backend corrects these classically:
gradient-domain compositing solves for masked pixels whose Laplacian
matches the warped content while boundary values come from the
surrounding context. External (e.g. neural) backends are driven through
a directory protocol so they can run out of process.

Pair synthesis fabricates supervised corruption/target pairs from the
captured views themselves, either by warping a masked reference through
the scene mesh (optionally jittered) or by elastic/color augmentations,
for backends that adapt per scene.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import TriangleMesh
from .meshrender import render_mesh_depth
from .poisson import fill_masked, laplacian
from .scene import Camera, ViewSet
from .sceneio import load_image, save_image, save_mask, load_mask
from .warp import warp_image


@dataclass
class RefinementPair:
    """Supervised corruption/target training pair for one view."""

    corrupted: np.ndarray  # (H, W, 3)
    mask: np.ndarray       # (H, W) bool, corruption support
    target: np.ndarray     # (H, W, 3)
    reference: np.ndarray  # (H, W, 3) reference view content
    view_index: int

    def check(self) -> None:
        outside = ~self.mask
        if not np.array_equal(self.corrupted[outside], self.target[outside]):
            raise ValueError("pair differs from its target outside the mask")
        if self.corrupted.shape != self.target.shape:
            raise ValueError("pair buffers disagree in resolution")


@dataclass
class RefinementItem:
    item_id: str
    warped: np.ndarray        # (H, W, 3)
    valid: np.ndarray         # (H, W) bool
    inpaint_mask: np.ndarray  # (H, W) bool
    camera_id: int
    context: Optional[np.ndarray] = None  # fallback: the warped buffer


@dataclass
class RefinementJob:
    reference: np.ndarray
    items: List[RefinementItem]
    shuffle_seed: Optional[int] = None

    def __post_init__(self):
        if not self.items:
            raise ValueError("a refinement job needs at least one item")


@dataclass
class MaskSpec:
    """Blob-mask generation: a random walk of overlapping disks."""

    min_disks: int = 4
    max_disks: int = 12
    radius_frac: tuple = (0.03, 0.09)  # of the image diagonal
    jitter: float = 0.0                # mesh vertex noise, world units


@dataclass
class AugSpec:
    """Elastic + color corruption magnitudes."""

    elastic: float = 6.0        # px displacement std after smoothing
    smooth_sigma: float = 8.0   # px
    gain: float = 0.15
    bias: float = 0.10
    mask: MaskSpec = field(default_factory=MaskSpec)


def random_blob_mask(height: int, width: int, rng,
                     spec: MaskSpec, region: Optional[np.ndarray] = None
                     ) -> np.ndarray:
    """Blobby binary mask; disk centers walk inside the optional region."""
    diag = float(np.hypot(height, width))
    r_lo, r_hi = (max(2.0, f * diag) for f in spec.radius_frac)
    if region is not None and region.any():
        ys, xs = np.nonzero(region)
        k = rng.integers(len(ys))
        cy, cx = float(ys[k]), float(xs[k])
    else:
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
    mask = np.zeros((height, width), dtype=bool)
    yy, xx = np.mgrid[0:height, 0:width]
    n_disks = int(rng.integers(spec.min_disks, spec.max_disks + 1))
    for _ in range(n_disks):
        r = rng.uniform(r_lo, r_hi)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        step = rng.normal(scale=r, size=2)
        cy = float(np.clip(cy + step[0], 0, height - 1))
        cx = float(np.clip(cx + step[1], 0, width - 1))
    return mask


def _jittered_mesh(mesh: TriangleMesh, amplitude: float, rng) -> TriangleMesh:
    if amplitude <= 0:
        return mesh
    noise = rng.normal(scale=amplitude, size=mesh.vertices.shape)
    return TriangleMesh(vertices=mesh.vertices + noise,
                        triangles=mesh.triangles)


def synthesize_warp_pairs(views: ViewSet, mesh: TriangleMesh, count: int,
                          mask_spec: Optional[MaskSpec] = None,
                          group_size: int = 5, seed: int = 0,
                          depth_tol: float = 0.01,
                          min_coverage: float = 0.2,
                          max_retries: int = 20,
                          include_identity: bool = False
                          ) -> List[RefinementPair]:
    """Reference-to-view warping pairs over the original scene mesh.

    Each round samples group_size + 1 views, picks one as the reference,
    draws a blob mask near its object region, and warps the reference
    image and mask into the remaining views; the captured images are the
    targets. Rounds whose warp covers less than min_coverage of the
    warped mask are resampled, up to max_retries per round.
    """
    if len(views) < 2:
        raise ValueError("warp-pair synthesis needs at least two views")
    spec = mask_spec or MaskSpec()
    rng = np.random.default_rng(seed)
    pairs: List[RefinementPair] = []
    n = len(views)
    k = min(group_size + 1, n)
    retries = 0
    while len(pairs) < count:
        chosen = rng.choice(n, size=k, replace=False)
        ref = int(chosen[0])
        ref_view = views[ref]
        region = ndimage.binary_dilation(
            ref_view.object_mask, structure=np.ones((9, 9), dtype=bool))
        blob = random_blob_mask(ref_view.camera.height, ref_view.camera.width,
                                rng, spec, region=region)
        warp_mesh = _jittered_mesh(mesh, spec.jitter, rng)
        ref_depth = render_mesh_depth(warp_mesh, ref_view.camera)
        ref_payload = np.concatenate(
            [ref_view.image.astype(np.float64), blob[..., None]], axis=2)
        for tgt in chosen[1:]:
            tgt = int(tgt)
            if tgt == ref and not include_identity:
                continue
            view = views[tgt]
            full = np.ones((view.camera.height, view.camera.width), bool)
            res = warp_image(ref_payload, ref_view.camera, view.camera,
                             warp_mesh, full, depth_tol=depth_tol,
                             src_depth=ref_depth)
            warped_mask = res.valid & (res.warped[..., 3] >= 0.5)
            area = int(np.asarray(blob, bool).sum())
            if warped_mask.sum() < min_coverage * max(area, 1):
                retries += 1
                if retries > max_retries * max(count, 1):
                    raise RuntimeError(
                        "warp-pair synthesis keeps failing coverage checks")
                continue
            corrupted = view.image.astype(np.float64).copy()
            corrupted[warped_mask] = res.warped[..., :3][warped_mask]
            pairs.append(RefinementPair(
                corrupted=corrupted, mask=warped_mask,
                target=view.image.astype(np.float64),
                reference=ref_view.image.astype(np.float64),
                view_index=tgt))
            if len(pairs) >= count:
                break
    return pairs


def synthesize_aug_pairs(views: ViewSet, count: int,
                         aug_spec: Optional[AugSpec] = None,
                         seed: int = 0) -> List[RefinementPair]:
    """Per-view elastic/color corruption pairs inside random blob masks."""
    if len(views) == 0:
        raise ValueError("augmentation-pair synthesis needs a view")
    spec = aug_spec or AugSpec()
    rng = np.random.default_rng(seed)
    pairs: List[RefinementPair] = []
    for _ in range(count):
        idx = int(rng.integers(len(views)))
        view = views[idx]
        h, w = view.camera.height, view.camera.width
        mask = random_blob_mask(h, w, rng, spec.mask,
                                region=view.object_mask)
        img = view.image.astype(np.float64)
        distorted = img
        if spec.elastic > 0:
            offsets = rng.normal(size=(2, h, w))
            dy = ndimage.gaussian_filter(offsets[0], spec.smooth_sigma)
            dx = ndimage.gaussian_filter(offsets[1], spec.smooth_sigma)
            for d in (dy, dx):
                std = d.std()
                if std > 1e-12:
                    d *= spec.elastic / std
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            coords = np.stack([yy + dy, xx + dx])
            distorted = np.stack(
                [ndimage.map_coordinates(img[..., c], coords, order=1,
                                         mode="reflect")
                 for c in range(3)], axis=-1)
        gain = 1.0 + rng.uniform(-spec.gain, spec.gain, size=3)
        bias = rng.uniform(-spec.bias, spec.bias, size=3)
        corrupted_vals = np.clip(distorted * gain + bias, 0.0, 1.0)
        corrupted = img.copy()
        corrupted[mask] = corrupted_vals[mask]
        pairs.append(RefinementPair(
            corrupted=corrupted, mask=mask, target=img,
            reference=img, view_index=idx))
    return pairs


def harmonize(warped: np.ndarray, mask: np.ndarray,
              context: np.ndarray) -> np.ndarray:
    """Seamlessly composite warped content into the context image.

    Solves the screened Poisson problem per channel: inside the mask the
    output's Laplacian matches the warped content's, with Dirichlet
    boundary values from the context; outside the mask the context is
    returned untouched.
    """
    mask = np.asarray(mask, dtype=bool)
    out = np.array(context, dtype=np.float64, copy=True)
    if not mask.any():
        return out
    if warped.shape != context.shape:
        raise ValueError("warped/context resolution mismatch")
    for c in range(context.shape[2]):
        g_lap = laplacian(np.asarray(warped[..., c], dtype=np.float64))
        out[..., c] = fill_masked(out[..., c], mask, g_lap, lam=0.0,
                                  x0=warped[..., c])
    return out


# ---------------------------------------------------------------------------
# Backend dispatch


def refine(job: RefinementJob, backend: str = "builtin",
           timeout: float = 300.0, poll: float = 0.05) -> List[np.ndarray]:
    """Run a refinement job; returns one image per item.

    backend is either "builtin" (gradient-domain harmonization using
    each item's context, falling back to the warped buffer itself) or
    "external:DIR" (directory protocol; see write_job/read_refined).
    Pixels outside each item's inpaint mask always pass through
    unchanged.
    """
    if backend == "builtin":
        out = []
        for item in job.items:
            context = item.context if item.context is not None else item.warped
            out.append(harmonize(item.warped, item.inpaint_mask, context))
        return out
    if backend.startswith("external:"):
        job_dir = Path(backend.split(":", 1)[1])
        write_job(job, job_dir)
        deadline = time.monotonic() + timeout
        done = job_dir / "DONE"
        while not done.exists():
            if time.monotonic() > deadline:
                raise TimeoutError(
                    f"external backend did not finish within {timeout}s "
                    f"({job_dir})")
            time.sleep(poll)
        return read_refined(job, job_dir)
    raise ValueError(f"unknown backend '{backend}'")


def write_job(job: RefinementJob, job_dir) -> None:
    """Materialize a job directory: job.json, PNGs, then the READY sentinel."""
    job_dir = Path(job_dir)
    if job_dir.exists():
        shutil.rmtree(job_dir)
    job_dir.mkdir(parents=True)
    manifest = {"shuffle_seed": job.shuffle_seed,
                "reference": "reference.png", "items": []}
    save_image(job.reference, job_dir / "reference.png")
    for item in job.items:
        names = {"warped": f"warped_{item.item_id}.png",
                 "valid_mask": f"valid_{item.item_id}.png",
                 "inpaint_mask": f"mask_{item.item_id}.png"}
        save_image(item.warped, job_dir / names["warped"])
        save_mask(item.valid, job_dir / names["valid_mask"])
        save_mask(item.inpaint_mask, job_dir / names["inpaint_mask"])
        manifest["items"].append({"id": item.item_id, **names,
                                  "camera_id": item.camera_id})
    with open(job_dir / "job.json", "w") as f:
        json.dump(manifest, f, indent=1)
    (job_dir / "READY").touch()


def read_refined(job: RefinementJob, job_dir) -> List[np.ndarray]:
    """Collect refined/<id>.png results; outside-mask pixels are restored."""
    job_dir = Path(job_dir)
    out = []
    for item in job.items:
        path = job_dir / "refined" / f"{item.item_id}.png"
        if not path.is_file():
            raise FileNotFoundError(f"backend produced no {path}")
        img = load_image(path).astype(np.float64)
        h, w = item.warped.shape[:2]
        if img.shape[:2] != (h, w):
            raise ValueError(
                f"refined {item.item_id} is {img.shape[1]}x{img.shape[0]}, "
                f"expected {w}x{h}")
        merged = np.array(item.warped, dtype=np.float64, copy=True)
        merged[item.inpaint_mask] = img[item.inpaint_mask]
        out.append(merged)
    return out


def run_copy_backend(job_dir) -> None:
    """Trivial echo backend: copies each warped input to refined/<id>.png.

    Waits for the READY sentinel, honors the manifest, writes DONE last.
    Useful for protocol tests and as a template for real backends.
    """
    job_dir = Path(job_dir)
    deadline = time.monotonic() + 60.0
    while not (job_dir / "READY").exists():
        if time.monotonic() > deadline:
            raise TimeoutError("no READY sentinel appeared")
        time.sleep(0.02)
    with open(job_dir / "job.json") as f:
        manifest = json.load(f)
    refined = job_dir / "refined"
    refined.mkdir(exist_ok=True)
    for item in manifest["items"]:
        shutil.copyfile(job_dir / item["warped"],
                        refined / f"{item['id']}.png")
    (job_dir / "DONE").touch()
