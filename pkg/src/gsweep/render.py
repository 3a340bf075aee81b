"""Tile-based surfel renderer with analytic gradients.

Each pixel ray is intersected exactly with every candidate surfel's
supporting plane; the hit point in the disk's scaled tangent coordinates
drives a Gaussian falloff, and hits are alpha-composited front to back
(nearest first, ties broken by primitive index) until the transmittance
drops below a floor. Depth is the alpha-weighted mean hit depth
normalized by accumulated alpha; the attribute channel composites the
per-primitive removal score instead of color and is therefore linear in
the score vector.

The backward pass returns exact gradients of the same composite for a
scalar loss given per-pixel gradients w.r.t. the color and/or attribute
outputs. Gradients flow to removal scores (attribute channel only, with
blending weights treated as constants, which is exact because the
attribute is linear in the scores), opacities, SH coefficients (including
the view-direction dependence), and centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .scene import Camera, DepthMap, GaussianScene, quat_to_rot
from .sh import eval_colors, sh_basis, sh_basis_jacobian

PARAM_NAMES = ("removal_score", "opacity", "sh", "center")


@dataclass(frozen=True)
class RenderSettings:
    """Knobs for the compositor; defaults match the pipeline configuration."""

    tile_size: int = 32
    alpha_clamp: float = 0.999        # keeps transmittance positive
    transmittance_min: float = 1e-4   # front-to-back termination
    coverage_threshold: float = 0.5   # min alpha for a valid depth pixel
    sigma_cut: Optional[float] = 3.0  # Gaussian support radius; None = unbounded
    znear: float = 1e-6
    depth_mode: str = "expected"      # alpha-blended expectation


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class RenderOutput:
    color: Optional[np.ndarray]      # (H, W, 3)
    depth: Optional[DepthMap]
    attribute: Optional[np.ndarray]  # (H, W)
    alpha: np.ndarray                # (H, W)


@dataclass
class PixelGradients:
    """Upstream loss gradients per pixel for the backward pass."""

    d_color: Optional[np.ndarray] = None      # (H, W, 3)
    d_attribute: Optional[np.ndarray] = None  # (H, W)


@dataclass
class RenderGradients:
    removal_score: Optional[np.ndarray] = None  # (M,)
    opacity: Optional[np.ndarray] = None        # (M,)
    sh: Optional[np.ndarray] = None             # (M, 16, 3)
    center: Optional[np.ndarray] = None         # (M, 3)


class _Prepared:
    """Per-(scene, camera) geometry shared by the passes over tiles."""

    def __init__(self, scene: GaussianScene, camera: Camera,
                 settings: RenderSettings):
        self.scene = scene
        self.camera = camera
        self.settings = settings
        self.h, self.w = camera.height, camera.width
        self.origin = camera.center
        self.dirs = camera.pixel_dirs().reshape(-1, 3)  # (H*W, 3)

        m = len(scene)
        self.m = m
        self.mu = scene.centers.astype(np.float64)
        rot = quat_to_rot(scene.quats)
        self.tan_u = rot[:, :, 0]
        self.tan_v = rot[:, :, 1]
        self.normal = rot[:, :, 2]
        self.su = scene.scales[:, 0].astype(np.float64)
        self.sv = scene.scales[:, 1].astype(np.float64)
        self.opac = scene.opacities.astype(np.float64)
        self.score = scene.removal_scores.astype(np.float64)

        delta = self.mu - self.origin
        self.view_dist = np.linalg.norm(delta, axis=1)
        safe = np.maximum(self.view_dist, 1e-12)
        self.view_dir = delta / safe[:, None]
        self.colors, self.color_pos = eval_colors(scene.sh, self.view_dir)

        # Plane-intersection constants: t = dot_n / (d . n) per ray.
        self.dot_n = np.einsum("mi,mi->m", delta, self.normal)
        self.off_u = -np.einsum("mi,mi->m", delta, self.tan_u)
        self.off_v = -np.einsum("mi,mi->m", delta, self.tan_v)

        self._bin_tiles()

    def _bin_tiles(self):
        ts = self.settings.tile_size
        self.ntx = (self.w + ts - 1) // ts
        self.nty = (self.h + ts - 1) // ts
        ntiles = self.ntx * self.nty
        if self.m == 0:
            self.tile_cands = [np.empty(0, dtype=np.int64)] * ntiles
            return
        if self.settings.sigma_cut is None:
            # Exact mode: every primitive is a candidate everywhere.
            allc = np.arange(self.m, dtype=np.int64)
            self.tile_cands = [allc] * ntiles
            return

        cam = self.camera
        mu_cam = self.mu @ cam.R.T + cam.t
        z = mu_cam[:, 2]
        radius = self.settings.sigma_cut * np.maximum(self.su, self.sv)
        znear = self.settings.znear
        alive = z + radius > znear
        z_close = np.maximum(z - radius, znear)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * mu_cam[:, 0] / np.maximum(z, znear) + cam.cx
            v = cam.fy * mu_cam[:, 1] / np.maximum(z, znear) + cam.cy
        pix_r = max(cam.fx, cam.fy) * radius / z_close + 2.0
        # Primitives straddling the near plane are conservative candidates
        # for the whole frame.
        straddle = alive & (z - radius <= znear)
        u = np.where(straddle, self.w / 2.0, u)
        v = np.where(straddle, self.h / 2.0, v)
        pix_r = np.where(straddle, float(max(self.w, self.h)), pix_r)

        tx0 = np.clip(np.floor((u - pix_r) / ts), 0, self.ntx - 1).astype(np.int64)
        tx1 = np.clip(np.floor((u + pix_r) / ts), 0, self.ntx - 1).astype(np.int64)
        ty0 = np.clip(np.floor((v - pix_r) / ts), 0, self.nty - 1).astype(np.int64)
        ty1 = np.clip(np.floor((v + pix_r) / ts), 0, self.nty - 1).astype(np.int64)
        alive &= (u + pix_r >= 0) & (u - pix_r < self.w) \
            & (v + pix_r >= 0) & (v - pix_r < self.h)

        idx = np.flatnonzero(alive)
        if idx.size == 0:
            self.tile_cands = [np.empty(0, dtype=np.int64)] * ntiles
            return
        nx = tx1[idx] - tx0[idx] + 1
        ny = ty1[idx] - ty0[idx] + 1
        reps = nx * ny
        total = int(reps.sum())
        prim = np.repeat(idx, reps)
        starts = np.concatenate([[0], np.cumsum(reps)[:-1]])
        local = np.arange(total) - np.repeat(starts, reps)
        nx_rep = np.repeat(nx, reps)
        dx = local % nx_rep
        dy = local // nx_rep
        tile = (np.repeat(ty0[idx], reps) + dy) * self.ntx \
            + np.repeat(tx0[idx], reps) + dx
        order = np.argsort(tile, kind="stable")
        tile_sorted = tile[order]
        prim_sorted = prim[order]
        bounds = np.searchsorted(tile_sorted, np.arange(ntiles + 1))
        self.tile_cands = [prim_sorted[bounds[i]:bounds[i + 1]]
                           for i in range(ntiles)]

    def tiles(self):
        """Yield (tile pixel index array (P,), candidate array (K,))."""
        ts = self.settings.tile_size
        for ty in range(self.nty):
            for tx in range(self.ntx):
                cand = self.tile_cands[ty * self.ntx + tx]
                y0, y1 = ty * ts, min((ty + 1) * ts, self.h)
                x0, x1 = tx * ts, min((tx + 1) * ts, self.w)
                rows = np.arange(y0, y1)
                cols = np.arange(x0, x1)
                pix = (rows[:, None] * self.w + cols[None, :]).reshape(-1)
                yield pix, cand

    def tile_geometry(self, pix: np.ndarray, cand: np.ndarray):
        """Ray-surfel quantities for one tile; arrays are (P, K)."""
        s = self.settings
        d = self.dirs[pix]                       # (P, 3)
        dn = d @ self.normal[cand].T             # (P, K)
        du = d @ self.tan_u[cand].T
        dv = d @ self.tan_v[cand].T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.dot_n[cand][None, :] / dn
        uu = (self.off_u[cand][None, :] + t * du) / self.su[cand][None, :]
        vv = (self.off_v[cand][None, :] + t * dv) / self.sv[cand][None, :]
        r2 = uu * uu + vv * vv
        valid = (np.abs(dn) > 1e-12) & (t > s.znear) & np.isfinite(r2)
        if s.sigma_cut is not None:
            valid &= r2 <= s.sigma_cut * s.sigma_cut
        gauss = np.where(valid, np.exp(-0.5 * np.where(valid, r2, 0.0)), 0.0)
        alpha_raw = self.opac[cand][None, :] * gauss
        clamped = alpha_raw > s.alpha_clamp
        alpha = np.where(clamped, s.alpha_clamp, alpha_raw)
        return {
            "t": t, "uu": uu, "vv": vv, "dn": dn, "du": du, "dv": dv,
            "gauss": gauss, "alpha": alpha, "valid": valid, "clamped": clamped,
        }

    def composite_order(self, geo):
        """Depth-sort contributions and derive blending weights."""
        s = self.settings
        t_key = np.where(geo["valid"], geo["t"], np.inf)
        order = np.argsort(t_key, axis=1, kind="stable")
        alpha_s = np.take_along_axis(geo["alpha"], order, axis=1)
        t_s = np.take_along_axis(geo["t"], order, axis=1)
        one_minus = 1.0 - alpha_s
        trans = np.cumprod(one_minus, axis=1)
        texcl = np.concatenate(
            [np.ones((trans.shape[0], 1)), trans[:, :-1]], axis=1)
        keep = texcl >= s.transmittance_min
        weight = alpha_s * texcl * keep
        return {"order": order, "alpha_s": alpha_s, "t_s": t_s,
                "texcl": texcl, "keep": keep, "weight": weight,
                "wsum": weight.sum(axis=1)}


def _want(mode: str, channel: str) -> bool:
    return mode == "all" or mode == channel


def render(scene: GaussianScene, camera: Camera, mode: str = "all",
           settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Composite the scene into color / depth / attribute / alpha maps."""
    if mode not in ("color", "depth", "attribute", "all"):
        raise ValueError(f"unknown render mode '{mode}'")
    h, w = camera.height, camera.width
    alpha_map = np.zeros(h * w)
    color = np.tile(np.asarray(scene.background, dtype=np.float64),
                    (h * w, 1)) if _want(mode, "color") else None
    depth_num = np.zeros(h * w) if _want(mode, "depth") else None
    attr = np.zeros(h * w) if _want(mode, "attribute") else None

    if len(scene) > 0:
        prep = _Prepared(scene, camera, settings)
        for pix, cand in prep.tiles():
            if cand.size == 0:
                continue
            geo = prep.tile_geometry(pix, cand)
            comp = prep.composite_order(geo)
            wgt, order = comp["weight"], comp["order"]
            alpha_map[pix] = comp["wsum"]
            if color is not None:
                c_s = _gather_vectors(prep.colors[cand], order)
                color[pix] = np.einsum("pk,pkc->pc", wgt, c_s) \
                    + (1.0 - comp["wsum"])[:, None] * np.asarray(scene.background)
            if depth_num is not None:
                depth_num[pix] = (wgt * comp["t_s"]).sum(axis=1)
            if attr is not None:
                p_s = np.take_along_axis(
                    np.broadcast_to(prep.score[cand], wgt.shape), order, axis=1)
                attr[pix] = (wgt * p_s).sum(axis=1)

    alpha_img = alpha_map.reshape(h, w)
    depth = None
    if depth_num is not None:
        covered = alpha_img >= settings.coverage_threshold
        vals = np.zeros((h, w))
        np.divide(depth_num.reshape(h, w), alpha_img, out=vals,
                  where=alpha_img > 0)
        depth = DepthMap(values=np.where(covered, vals, 0.0), valid=covered)
    return RenderOutput(
        color=color.reshape(h, w, 3) if color is not None else None,
        depth=depth,
        attribute=attr.reshape(h, w) if attr is not None else None,
        alpha=alpha_img,
    )


def _gather_vectors(values: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Gather per-candidate vectors (K, C) into sorted (P, K, C) layout."""
    expanded = np.broadcast_to(values[None, :, :],
                               order.shape + (values.shape[1],))
    return np.take_along_axis(expanded, order[:, :, None], axis=1)


def render_backward(scene: GaussianScene, camera: Camera,
                    upstream: PixelGradients,
                    params: Sequence[str] = PARAM_NAMES,
                    settings: RenderSettings = DEFAULT_SETTINGS
                    ) -> RenderGradients:
    """Gradients of sum(upstream * render_output) w.r.t. scene parameters."""
    params = tuple(params)
    unknown = [p for p in params if p not in PARAM_NAMES]
    if unknown:
        raise ValueError(f"unsupported parameters {unknown}; "
                         f"supported: {PARAM_NAMES}")
    h, w = camera.height, camera.width
    gc = upstream.d_color
    ga = upstream.d_attribute
    if gc is not None and gc.shape != (h, w, 3):
        raise ValueError(f"d_color shape {gc.shape} != {(h, w, 3)}")
    if ga is not None and ga.shape != (h, w):
        raise ValueError(f"d_attribute shape {ga.shape} != {(h, w)}")
    m = len(scene)
    grads = RenderGradients(
        removal_score=np.zeros(m) if "removal_score" in params else None,
        opacity=np.zeros(m) if "opacity" in params else None,
        sh=np.zeros((m, 16, 3)) if "sh" in params else None,
        center=np.zeros((m, 3)) if "center" in params else None,
    )
    if m == 0 or (gc is None and ga is None):
        return grads
    gc_flat = gc.reshape(-1, 3) if gc is not None else None
    ga_flat = ga.reshape(-1) if ga is not None else None

    prep = _Prepared(scene, camera, settings)
    bg = np.asarray(scene.background, dtype=np.float64)
    acc_dc = np.zeros((m, 3))   # dL/d(clamped color)
    need_geom = "opacity" in params or "center" in params

    for pix, cand in prep.tiles():
        if cand.size == 0:
            continue
        geo = prep.tile_geometry(pix, cand)
        comp = prep.composite_order(geo)
        order, wgt = comp["order"], comp["weight"]
        idx_s = np.broadcast_to(cand, order.shape)
        idx_s = np.take_along_axis(idx_s, order, axis=1)
        flat_idx = idx_s.ravel()
        gc_t = gc_flat[pix] if gc_flat is not None else None
        ga_t = ga_flat[pix] if ga_flat is not None else None

        if grads.removal_score is not None and ga_t is not None:
            contrib = (ga_t[:, None] * wgt).ravel()
            grads.removal_score += np.bincount(flat_idx, weights=contrib,
                                               minlength=m)
        if gc_t is not None and (grads.sh is not None
                                 or grads.center is not None):
            for ch in range(3):
                acc_dc[:, ch] += np.bincount(
                    flat_idx, weights=(gc_t[:, ch:ch + 1] * wgt).ravel(),
                    minlength=m)

        if not need_geom:
            continue
        # dL/d(alpha_k) = sum_ch g_ch * (value_k * T_k - suffix_k / (1-alpha_k))
        alpha_s, texcl, keep = comp["alpha_s"], comp["texcl"], comp["keep"]
        dl_dalpha = np.zeros_like(wgt)
        if gc_t is not None:
            c_s = _gather_vectors(prep.colors[cand], order)
            contrib_c = wgt[:, :, None] * c_s
            tail = (1.0 - comp["wsum"])[:, None] * bg[None, :]
            suffix = np.flip(np.cumsum(np.flip(contrib_c, 1), axis=1), 1) \
                - contrib_c + tail[:, None, :]
            direct = c_s * texcl[:, :, None]
            dl_dalpha += np.einsum(
                "pc,pkc->pk", gc_t,
                direct - suffix / (1.0 - alpha_s)[:, :, None])
        if ga_t is not None:
            p_s = np.take_along_axis(
                np.broadcast_to(prep.score[cand], wgt.shape), order, axis=1)
            contrib_p = wgt * p_s
            suffix_p = np.flip(np.cumsum(np.flip(contrib_p, 1), axis=1), 1) \
                - contrib_p
            dl_dalpha += ga_t[:, None] * (
                p_s * texcl - suffix_p / (1.0 - alpha_s))
        clamp_s = np.take_along_axis(geo["clamped"], order, axis=1)
        valid_s = np.take_along_axis(geo["valid"], order, axis=1)
        live = keep & valid_s & ~clamp_s
        dl_dalpha = np.where(live, dl_dalpha, 0.0)

        if grads.opacity is not None:
            g_s = np.take_along_axis(geo["gauss"], order, axis=1)
            grads.opacity += np.bincount(
                flat_idx, weights=(dl_dalpha * g_s).ravel(), minlength=m)
        if grads.center is not None:
            alpha_unc = np.take_along_axis(
                geo["gauss"] * prep.opac[cand][None, :], order, axis=1)
            dl_dr2 = -0.5 * dl_dalpha * alpha_unc
            uu_s = np.take_along_axis(geo["uu"], order, axis=1)
            vv_s = np.take_along_axis(geo["vv"], order, axis=1)
            dn_s = np.take_along_axis(geo["dn"], order, axis=1)
            du_s = np.take_along_axis(geo["du"], order, axis=1)
            dv_s = np.take_along_axis(geo["dv"], order, axis=1)
            su_s = prep.su[idx_s]
            sv_s = prep.sv[idx_s]
            a_u = 2.0 * dl_dr2 * uu_s / su_s
            a_v = 2.0 * dl_dr2 * vv_s / sv_s
            with np.errstate(divide="ignore", invalid="ignore"):
                b_n = np.where(live, (a_u * du_s + a_v * dv_s) / dn_s, 0.0)
            sum_au = np.bincount(flat_idx, weights=a_u.ravel(), minlength=m)
            sum_av = np.bincount(flat_idx, weights=a_v.ravel(), minlength=m)
            sum_bn = np.bincount(flat_idx, weights=b_n.ravel(), minlength=m)
            grads.center += (-sum_au[:, None] * prep.tan_u
                             - sum_av[:, None] * prep.tan_v
                             + sum_bn[:, None] * prep.normal)

    if gc_flat is not None and (grads.sh is not None
                                or grads.center is not None):
        dc_raw = np.where(prep.color_pos, acc_dc, 0.0)  # clamp at zero
        if grads.sh is not None:
            basis = sh_basis(prep.view_dir)
            grads.sh += basis[:, :, None] * dc_raw[:, None, :]
        if grads.center is not None:
            jac = sh_basis_jacobian(prep.view_dir)      # (M, 16, 3)
            sh_coef = scene.sh.astype(np.float64)       # (M, 16, 3ch)
            dcolor_ddir = np.einsum("mkd,mkc->mcd", jac, sh_coef)
            dl_ddir = np.einsum("mc,mcd->md", dc_raw, dcolor_ddir)
            proj = (np.eye(3)[None, :, :]
                    - prep.view_dir[:, :, None] * prep.view_dir[:, None, :])
            safe = np.maximum(prep.view_dist, 1e-12)
            grads.center += np.einsum("md,mdj->mj", dl_ddir, proj) / safe[:, None]
    return grads


def render_contribution_matrix(scene: GaussianScene, camera: Camera,
                               settings: RenderSettings = DEFAULT_SETTINGS
                               ) -> sp.csr_matrix:
    """Sparse per-pixel blending weights, shape (H * W, M).

    The attribute render equals `W @ removal_scores` and the accumulated
    alpha equals the row sums, so score optimization can reuse the
    geometry without re-rendering.
    """
    h, w = camera.height, camera.width
    m = len(scene)
    if m == 0:
        return sp.csr_matrix((h * w, 0))
    prep = _Prepared(scene, camera, settings)
    rows, cols, vals = [], [], []
    for pix, cand in prep.tiles():
        if cand.size == 0:
            continue
        geo = prep.tile_geometry(pix, cand)
        comp = prep.composite_order(geo)
        wgt = comp["weight"]
        idx_s = np.take_along_axis(
            np.broadcast_to(cand, comp["order"].shape), comp["order"], axis=1)
        nz = wgt > 0
        if not np.any(nz):
            continue
        pix_grid = np.broadcast_to(pix[:, None], wgt.shape)
        rows.append(pix_grid[nz])
        cols.append(idx_s[nz])
        vals.append(wgt[nz])
    if not rows:
        return sp.csr_matrix((h * w, m))
    mat = sp.coo_matrix(
        (np.concatenate(vals).astype(np.float32),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, m))
    return mat.tocsr()
