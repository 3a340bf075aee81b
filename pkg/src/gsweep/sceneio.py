"""File formats: scene PLY, cameras.json, PNG images/masks, PFM depth.

Scene files are binary little-endian PLY with a single `vertex` element
whose float32 properties appear in this exact order:

    x y z rot_w rot_x rot_y rot_z scale_0 scale_1 opacity
    f_dc_0..2 f_rest_0..44 removal_score

`f_rest` is stored channel-major (15 red coefficients, then green, then
blue). Files written with a lower SH degree (0, 9 or 24 rest values) are
accepted and padded with zeros; a missing `removal_score` defaults to 0.5.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .scene import Camera, DepthMap, GaussianScene, SceneError, View, ViewSet

_BASE_PROPS = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z",
               "scale_0", "scale_1", "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]
_REST_COUNTS = {0: 0, 1: 9, 2: 24, 3: 45}


class PlyFormatError(SceneError):
    """Malformed scene file header or payload."""


@dataclass
class LoadReport:
    """Repairs applied while loading a scene file."""

    clamped_opacity: int = 0
    clamped_score: int = 0
    renormalized_quats: int = 0
    messages: List[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.clamped_opacity or self.clamped_score
                    or self.renormalized_quats)


def _rest_names(count: int):
    return [f"f_rest_{i}" for i in range(count)]


def save_scene(scene: GaussianScene, path) -> None:
    """Write a scene to the binary PLY schema; lossless for float32 fields."""
    path = Path(path)
    m = len(scene)
    names = _BASE_PROPS + _rest_names(45) + ["removal_score"]
    header = ["ply", "format binary_little_endian 1.0",
              "comment sh_degree 3",
              f"comment background {scene.background[0]:.9g} "
              f"{scene.background[1]:.9g} {scene.background[2]:.9g}",
              f"comment extent {scene.extent:.9g}",
              f"element vertex {m}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")

    data = np.empty((m, len(names)), dtype="<f4")
    data[:, 0:3] = scene.centers
    data[:, 3:7] = scene.quats
    data[:, 7:9] = scene.scales
    data[:, 9] = scene.opacities
    # sh is (M, 16, 3); dc is row 0, rest is channel-major like common exports
    data[:, 10:13] = scene.sh[:, 0, :]
    data[:, 13:58] = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(m, 45)
    data[:, 58] = scene.removal_scores
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_scene(path, report: Optional[LoadReport] = None) -> GaussianScene:
    """Read a scene PLY; repairs out-of-range values and records them.

    Raises FileNotFoundError for a missing file and PlyFormatError for a
    malformed header or a payload whose size disagrees with the header.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scene file not found: {path}")
    rep = report if report is not None else LoadReport()

    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise PlyFormatError(f"{path}: missing end_header")
    header_lines = raw[:end].decode("ascii", "replace").splitlines()
    payload = raw[end + len(b"end_header\n"):]

    if not header_lines or header_lines[0].strip() != "ply":
        raise PlyFormatError(f"{path}: not a PLY file")
    fmt = next((l for l in header_lines if l.startswith("format")), "")
    if fmt.split() != ["format", "binary_little_endian", "1.0"]:
        raise PlyFormatError(f"{path}: unsupported format line '{fmt}'")

    count = None
    props: List[str] = []
    background = np.zeros(3)
    extent = 1.0
    for line in header_lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyFormatError(f"{path}: unexpected element '{parts[1]}'")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in ("float", "float32"):
                raise PlyFormatError(
                    f"{path}: property '{parts[2]}' is not float32")
            props.append(parts[2])
        elif parts[0] == "comment" and len(parts) >= 5 and parts[1] == "background":
            background = np.array([float(v) for v in parts[2:5]])
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "extent":
            extent = float(parts[2])
    if count is None:
        raise PlyFormatError(f"{path}: missing 'element vertex' line")

    # Determine the stored SH degree and whether removal_score is present.
    has_score = props and props[-1] == "removal_score"
    core = props[:-1] if has_score else props
    rest = len(core) - len(_BASE_PROPS)
    degree = next((d for d, n in _REST_COUNTS.items() if n == rest), None)
    if degree is None or core[:len(_BASE_PROPS)] != _BASE_PROPS \
            or core[len(_BASE_PROPS):] != _rest_names(rest):
        bad = next((p for p, want in zip(props, _BASE_PROPS) if p != want),
                   props[len(_BASE_PROPS)] if len(props) > len(_BASE_PROPS)
                   else "<missing>")
        raise PlyFormatError(
            f"{path}: property layout mismatch near '{bad}' "
            f"({len(props)} properties)")

    stride = len(props) * 4
    if len(payload) != count * stride:
        raise PlyFormatError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"expected {count * stride} for {count} records "
            f"of {len(props)} float32 fields")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, len(props))

    centers = data[:, 0:3].copy()
    quats = data[:, 3:7].copy()
    scales = data[:, 7:9].copy()
    opac = data[:, 9].copy()
    sh = np.zeros((count, 16, 3), dtype=np.float32)
    sh[:, 0, :] = data[:, 10:13]
    if rest:
        sh[:, 1:1 + rest // 3, :] = (
            data[:, 13:13 + rest].reshape(count, 3, rest // 3).transpose(0, 2, 1))
    if has_score:
        scores = data[:, 13 + rest].copy()
    else:
        scores = np.full(count, 0.5, dtype=np.float32)

    bad = np.flatnonzero(np.any(scales <= 0, axis=1))
    if bad.size:
        raise PlyFormatError(f"{path}: non-positive scale at record {bad[0]}")
    if not np.all(np.isfinite(data)):
        rec = np.flatnonzero(~np.isfinite(data).all(axis=1))[0]
        raise PlyFormatError(f"{path}: non-finite value at record {rec}")

    n_clamp = int(np.count_nonzero((opac < 0) | (opac > 1)))
    if n_clamp:
        np.clip(opac, 0.0, 1.0, out=opac)
        rep.clamped_opacity += n_clamp
        rep.messages.append(f"clamped opacity on {n_clamp} primitives")
    n_clamp = int(np.count_nonzero((scores < 0) | (scores > 1)))
    if n_clamp:
        np.clip(scores, 0.0, 1.0, out=scores)
        rep.clamped_score += n_clamp
        rep.messages.append(f"clamped removal_score on {n_clamp} primitives")
    norms = np.linalg.norm(quats.astype(np.float64), axis=1)
    off = np.abs(norms - 1.0) > 1e-6
    if np.any(off):
        zero = off & (norms < 1e-12)
        if np.any(zero):
            raise PlyFormatError(
                f"{path}: zero quaternion at record {np.flatnonzero(zero)[0]}")
        quats[off] = (quats[off].astype(np.float64)
                      / norms[off, None]).astype(np.float32)
        rep.renormalized_quats += int(np.count_nonzero(off))
        rep.messages.append(
            f"renormalized {rep.renormalized_quats} quaternions")

    scene = GaussianScene(centers=centers, quats=quats, scales=scales,
                          opacities=opac, sh=sh, removal_scores=scores,
                          background=background, extent=extent)
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# Images, masks, depth maps


def save_image(img: np.ndarray, path) -> None:
    """Save a float image in [0, 1] as 8-bit PNG (values are clipped)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path) -> np.ndarray:
    """Load an 8-bit image as (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask(mask: np.ndarray, path) -> None:
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path)


def load_mask(path, strict: bool = True) -> np.ndarray:
    """Load an 8-bit mask PNG, binarized at 0.5.

    With strict checking, values far from both 0 and 255 (beyond what
    8-bit quantization noise can explain) raise SceneError.
    """
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if strict:
        mid = np.count_nonzero((arr > 32) & (arr < 223))
        if mid:
            raise SceneError(
                f"{path}: {mid} mask pixels are neither 0 nor 255")
    return arr >= 128


def save_pfm(values: np.ndarray, path) -> None:
    """Write a single-channel PFM (little-endian float32, bottom-up rows)."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise SceneError("PFM writer expects a 2-D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a single-channel PFM into a (H, W) float32 array."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise SceneError(f"{path}: not a single-channel PFM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        payload = f.read(w * h * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float32)


def depth_to_pfm(depth: DepthMap, path) -> None:
    """Store a DepthMap as PFM; invalid pixels become 0 (depths are > 0)."""
    save_pfm(np.where(depth.valid, depth.values, 0.0), path)


def pfm_to_depth(path) -> DepthMap:
    vals = load_pfm(path)
    return DepthMap(values=vals, valid=vals > 0)


# ---------------------------------------------------------------------------
# Camera and view-set directories


def save_cameras(cameras: Sequence[Camera], path) -> None:
    records = []
    for i, cam in enumerate(cameras):
        records.append({
            "index": i, "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R": [float(v) for v in cam.R.reshape(-1)],
            "t": [float(v) for v in cam.t],
        })
    with open(path, "w") as f:
        json.dump(records, f, indent=1)


def load_cameras(path) -> List[Camera]:
    with open(path) as f:
        records = json.load(f)
    records = sorted(records, key=lambda r: r["index"])
    return [Camera(fx=r["fx"], fy=r["fy"], cx=r["cx"], cy=r["cy"],
                   width=r["width"], height=r["height"],
                   R=np.array(r["R"], dtype=np.float64).reshape(3, 3),
                   t=np.array(r["t"], dtype=np.float64))
            for r in records]


def _indexed_files(directory: Path, suffix: str):
    if not directory.is_dir():
        return {}
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix == suffix and p.stem.isdigit():
            out[int(p.stem)] = p
    return out


def load_view_set(views_dir) -> ViewSet:
    """Load a view directory: images/, cameras.json, masks/, optional extras.

    Optional per-view artifacts: inpaint_masks/NNNN.png, depth/NNNN.pfm
    (monocular or oracle depth). meta.json may carry a reference_index.
    """
    root = Path(views_dir)
    cam_path = root / "cameras.json"
    if not cam_path.is_file():
        raise FileNotFoundError(f"missing {cam_path}")
    cameras = load_cameras(cam_path)
    images = _indexed_files(root / "images", ".png")
    masks = _indexed_files(root / "masks", ".png")
    inpaint = _indexed_files(root / "inpaint_masks", ".png")
    depths = _indexed_files(root / "depth", ".pfm")

    if len(images) != len(cameras):
        raise SceneError(
            f"{root}: {len(images)} images but {len(cameras)} cameras")
    if sorted(images) != list(range(len(cameras))):
        raise SceneError(f"{root}: image indices are not dense from 0")
    if sorted(masks) != sorted(images):
        raise SceneError(f"{root}: object masks do not match images")

    views = []
    for i, cam in enumerate(cameras):
        views.append(View(
            image=load_image(images[i]),
            camera=cam,
            object_mask=load_mask(masks[i]),
            inpaint_mask=load_mask(inpaint[i]) if i in inpaint else None,
            mono_depth=pfm_to_depth(depths[i]) if i in depths else None,
        ))

    ref = None
    meta_path = root / "meta.json"
    if meta_path.is_file():
        with open(meta_path) as f:
            ref = json.load(f).get("reference_index")
    return ViewSet(views=views, reference_index=ref)


def save_view_set(views: ViewSet, root) -> None:
    """Write a ViewSet in the directory layout load_view_set expects."""
    root = Path(root)
    for sub in ("images", "masks"):
        os.makedirs(root / sub, exist_ok=True)
    has_inpaint = any(v.inpaint_mask is not None for v in views.views)
    has_depth = any(v.mono_depth is not None for v in views.views)
    if has_inpaint:
        os.makedirs(root / "inpaint_masks", exist_ok=True)
    if has_depth:
        os.makedirs(root / "depth", exist_ok=True)
    save_cameras(views.cameras, root / "cameras.json")
    for i, v in enumerate(views.views):
        save_image(v.image, root / "images" / f"{i:04d}.png")
        save_mask(v.object_mask, root / "masks" / f"{i:04d}.png")
        if v.inpaint_mask is not None:
            save_mask(v.inpaint_mask, root / "inpaint_masks" / f"{i:04d}.png")
        if v.mono_depth is not None:
            depth_to_pfm(v.mono_depth, root / "depth" / f"{i:04d}.pfm")
    if views.reference_index is not None:
        with open(root / "meta.json", "w") as f:
            json.dump({"reference_index": views.reference_index}, f)
