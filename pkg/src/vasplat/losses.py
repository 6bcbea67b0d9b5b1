"""Training objective: image, normal and multi-view alignment terms with their reverse modes.

Every term returns its value together with gradients on the maps it reads.
:func:`view_objective` composes them for one rendered view and pushes the
map gradients through :func:`render_backward`.

Discrete choices (validity masks, L1 signs, the normal-smoothing gate,
bilinear cells, visibility/occlusion weights) go through a
:class:`Branches` object. A fresh instance records them; passing the same
instance to a later evaluation replays them, which keeps finite-difference
probes on one smooth branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import BadConfig, ChannelMismatch, NoSourceViews, ShapeMismatch
from .geometry import Camera, relative_pose
from .imageproc import (bilinear_gather, gradient_magnitude, image_gradient, image_gradient_backward,
                        in_sample_domain, luminance, normals_from_depth, normals_from_depth_backward,
                        ssim, ssim_grad)
from .rasterizer import RenderBuffers, render_backward

TERMS = ("L_I", "L_nc", "L_ns", "L_p", "L_f")
NCC_VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.2
    beta2: float = 0.03
    lambda1: float = 0.015
    lambda2: float = 0.3
    lambda3: float = 0.15
    lambda4: float = 1.0
    tau: float = 0.01
    patch_size: int = 7
    n_sources: int = 3

    def __post_init__(self):
        for name in ("beta1", "beta2", "lambda1", "lambda2", "lambda3", "lambda4"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise BadConfig(f"{name} must be a finite value >= 0, got {v}")
        if not self.tau > 0:
            raise BadConfig("tau must be > 0")
        if self.patch_size < 1 or self.patch_size % 2 != 1:
            raise BadConfig("patch_size must be odd")
        if self.n_sources < 1:
            raise BadConfig("n_sources must be >= 1")

    def term_weight(self, name: str) -> float:
        return {"L_I": 1.0, "L_nc": self.lambda1, "L_ns": self.lambda2,
                "L_p": self.lambda3, "L_f": self.lambda4}[name]


@dataclass
class LossReport:
    terms: dict            # name -> float (0.0 for disabled terms)
    total: float
    visible: dict = field(default_factory=dict)   # source view id -> V_s of the photometric term
    grads: dict | None = None                     # parameter gradients
    enabled: frozenset = frozenset()


def total_loss(terms: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the terms; missing or ``None`` entries count as disabled."""
    vals = {}
    enabled = []
    total = 0.0
    for name in TERMS:
        v = terms.get(name)
        if v is None:
            vals[name] = 0.0
            continue
        vals[name] = float(v)
        enabled.append(name)
        total += weights.term_weight(name) * float(v)
    return LossReport(vals, total, enabled=frozenset(enabled))


class Branches:
    """Record/replay store for the discrete decisions of one objective evaluation."""

    def __init__(self):
        self._store = {}

    def pick(self, key, compute):
        if key not in self._store:
            self._store[key] = compute()
        return self._store[key]

    def __contains__(self, key):
        return key in self._store


def _pick(branches, key, compute):
    return compute() if branches is None else branches.pick(key, compute)


def _sign(x):
    return np.where(x >= 0, 1.0, -1.0)


# --- single-view terms ----------------------------------------------------------------

def _normalized_gradient(img, argmax):
    mag, _, _ = gradient_magnitude(luminance(img))
    m = mag.flat[argmax]
    return mag / m if m > 0 else np.zeros_like(mag)


def loss_image(rendered, gt, beta1: float = 0.2, beta2: float = 0.03, branches=None, gt_edges=None):
    """(1-b1) L1 + b1 (1 - SSIM) + b2 L1 between normalized gradient maps.

    Returns (value, d value / d rendered).
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape}")
    n = rendered.size
    r = rendered - gt
    s = _pick(branches, "li_sign", lambda: _sign(r))
    value = (1 - beta1) * float(np.sum(s * r)) / n
    grad = (1 - beta1) * s / n
    if beta1 > 0:
        value += beta1 * (1.0 - ssim(rendered, gt)[0])
        grad = grad - beta1 * ssim_grad(rendered, gt)
    if beta2 > 0:
        if gt_edges is None:
            gt_edges = image_gradient(gt)
        am = _pick(branches, "li_argmax",
                   lambda: int(np.argmax(gradient_magnitude(luminance(rendered))[0])))
        e = _normalized_gradient(rendered, am) - gt_edges
        se = _pick(branches, "li_edge_sign", lambda: _sign(e))
        value += beta2 * float(np.sum(se * e)) / e.size
        grad = grad + image_gradient_backward(rendered, beta2 * se / e.size, am)
    return value, grad


def edge_weight(gt_edges):
    """Per-pixel weight (1 - grad I)^2 from the normalized ground-truth gradient."""
    return (1.0 - gt_edges) ** 2


def loss_normal_consistency(n_rend, n_depth, gt_edges, valid, branches=None):
    """Mean over valid pixels of delta * |N_depth - N_rend|_1.

    Returns (value, d/d n_rend, d/d n_depth).
    """
    delta = edge_weight(gt_edges)
    m = int(valid.sum())
    if m == 0:
        z = np.zeros_like(n_rend)
        return 0.0, z, z.copy()
    diff = n_depth - n_rend
    s = _pick(branches, "nc_sign", lambda: _sign(diff))
    w = np.where(valid, delta, 0.0)[..., None]
    value = float(np.sum(w * s * diff)) / m
    g = w * s / m
    return value, -g, g


def loss_normal_smooth(n_rend, n_depth, gt_edges, valid, tau: float = 0.01, branches=None):
    """Edge-gated smoothness of the depth normals over right/down neighbour pairs.

    A pair contributes delta_k * relu(|dN_depth|_1 - tau^2) when the rendered
    normals differ by more than tau (L1); the gate carries no gradient.
    Returns (value, d/d n_depth).
    """
    delta = edge_weight(gt_edges)
    g = np.zeros_like(n_depth)
    pairs = []
    count = 0
    for name, a, b in (("r", np.s_[:, :-1], np.s_[:, 1:]), ("d", np.s_[:-1, :], np.s_[1:, :])):
        pv = valid[a] & valid[b]
        count += int(pv.sum())
        pairs.append((name, a, b, pv))
    if count == 0:
        return 0.0, g
    value = 0.0
    tau2 = tau * tau
    for name, a, b, pv in pairs:
        gate = _pick(branches, f"ns_gate_{name}",
                     lambda: np.sum(np.abs(n_rend[b] - n_rend[a]), axis=-1) > tau)
        dn = n_depth[b] - n_depth[a]
        s = _pick(branches, f"ns_sign_{name}", lambda: _sign(dn))
        gap = np.sum(s * dn, axis=-1) - tau2
        on = _pick(branches, f"ns_relu_{name}", lambda: gap > 0)
        w = np.where(pv & gate & on, delta[b], 0.0)
        value += float(np.sum(w * gap))
        gw = (w[..., None] * s) / count
        g[b] += gw
        g[a] -= gw
    return value / count, g


# --- visibility and occlusion ------------------------------------------------------------

def _to_source(pix, z, ref: Camera, src: Camera):
    """Ref pixels with depths -> source camera-frame points and source pixels."""
    R, T = relative_pose(ref, src)
    rays = np.concatenate([pix, np.ones(pix.shape[:-1] + (1,))], axis=-1) @ ref.K_inv.T
    Xs = (z[..., None] * rays) @ R.T + T
    h = Xs @ src.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ps = h[..., :2] / h[..., 2:3]
    return Xs, ps, rays


def omega_from_phi(phi):
    """exp(-phi) for phi < 1, else 0."""
    phi = np.asarray(phi, dtype=np.float64)
    out = np.where(phi < 1.0, np.exp(-np.where(phi < 1.0, phi, 0.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def _visible(Xs, ps, src: Camera):
    with np.errstate(invalid="ignore"):
        return ((Xs[..., 2] > 0) & (ps[..., 0] > 0) & (ps[..., 0] < src.width)
                & (ps[..., 1] > 0) & (ps[..., 1] < src.height))


def visibility_map(depth, valid, ref: Camera, src: Camera):
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W]
    pix = np.stack([u, v], axis=-1).astype(np.float64)
    Xs, ps, _ = _to_source(pix, np.where(valid, depth, 1.0), ref, src)
    return valid & (depth > 0) & _visible(Xs, ps, src)


def _phi(pix, z_r, ref, src, depth_s, valid_s):
    """Forward-backward reprojection error; inf where the source depth is unusable."""
    Xs, ps, _ = _to_source(pix, z_r, ref, src)
    phi = np.full(pix.shape[:-1], np.inf)
    vis = (z_r > 0) & _visible(Xs, ps, src)
    Hs, Ws = depth_s.shape
    ok = vis & in_sample_domain(ps[..., 0], ps[..., 1], Ws, Hs)
    if not ok.any():
        return phi, vis
    x, y = ps[ok, 0], ps[ok, 1]
    zs, _, _, cx, cy = bilinear_gather(depth_s, x, y)
    corners = valid_s[cy, cx] & valid_s[cy, cx + 1] & valid_s[cy + 1, cx] & valid_s[cy + 1, cx + 1]
    xs = Xs[ok] * (zs / Xs[ok, 2])[:, None]
    R, T = relative_pose(ref, src)
    xr = (xs - T) @ R
    h = xr @ ref.K.T
    good = corners & (zs > 0) & (h[:, 2] > 1e-9)
    pr = h[:, :2] / np.where(good, h[:, 2], 1.0)[:, None]
    err = np.linalg.norm(pr - pix[ok], axis=-1)
    phi[ok] = np.where(good, err, np.inf)
    return phi, vis


def multiview_weights(depth_r, valid_r, ref: Camera, src: Camera, depth_s, valid_s):
    """Per-pixel visibility, occlusion weight omega and their product for one source view."""
    H, W = depth_r.shape
    v, u = np.mgrid[0:H, 0:W]
    pix = np.stack([u, v], axis=-1).astype(np.float64)
    z = np.where(valid_r, depth_r, 0.0)
    phi, vis = _phi(pix, z, ref, src, depth_s, valid_s)
    vis &= valid_r
    omega = np.where(vis, omega_from_phi(np.where(np.isfinite(phi), phi, 2.0)), 0.0)
    return vis, omega, vis * omega


def visibility(p_r, depth_map, ref: Camera, src: Camera) -> int:
    """1 if the reference pixel reprojects inside the source image with positive depth."""
    u, v = int(round(p_r[0])), int(round(p_r[1]))
    H, W = depth_map.shape
    if not (0 <= u < W and 0 <= v < H):
        return 0
    z = float(depth_map[v, u])
    if not np.isfinite(z) or z <= 0:
        return 0
    Xs, ps, _ = _to_source(np.array([float(u), float(v)]), np.array(z), ref, src)
    return int(bool(_visible(Xs, ps, src)))


def occlusion_weight(p_r, ref_depth, src_depth, ref: Camera, src: Camera, src_valid=None) -> float:
    """omega at one reference pixel; 0 when invisible or the source depth is unusable."""
    if not visibility(p_r, ref_depth, ref, src):
        return 0.0
    u, v = int(round(p_r[0])), int(round(p_r[1]))
    if src_valid is None:
        src_valid = src_depth > 0
    phi, _ = _phi(np.array([[float(u), float(v)]]), np.array([float(ref_depth[v, u])]), ref, src,
                  src_depth, src_valid)
    return float(omega_from_phi(phi[0])) if np.isfinite(phi[0]) else 0.0


# --- multi-view terms ------------------------------------------------------------------------

def _homography_parts(ref: Camera, src: Camera):
    R, T = relative_pose(ref, src)
    return src.K @ R @ ref.K_inv, src.K @ T


def loss_photometric(ref_gray, src_grays, ref: Camera, srcs, normal_map, dist_map, weights, k: int = 7,
                     branches=None):
    """Sum over sources of the weighted mean of 1 - NCC between homography-warped patches.

    ``weights`` holds one per-pixel visibility*occlusion map per source. The
    plane at each pixel is (normal_map, dist_map) in the reference camera
    frame. Returns (value, d/d normal_map, d/d dist_map, [V_s]).
    """
    if len(srcs) == 0:
        raise NoSourceViews("photometric loss needs at least one source view")
    H, W = ref_gray.shape
    N = np.ascontiguousarray(normal_map, dtype=np.float64)
    D = np.ascontiguousarray(dist_map, dtype=np.float64)
    gN = np.zeros((H, W, 3))
    gD = np.zeros((H, W))
    value = 0.0
    counts = []
    for s, (src, gray, w) in enumerate(zip(srcs, src_grays, weights)):
        A, b = _homography_parts(ref, src)
        key = f"lp_cells_{s}"
        frozen = branches is not None and key in branches
        if frozen:
            cx, cy, sv = branches.pick(key, None)
        else:
            cx = np.zeros((H, W, k * k), dtype=np.int64)
            cy = np.zeros((H, W, k * k), dtype=np.int64)
            sv = np.zeros((H, W, k * k), dtype=np.bool_)
        cost, usable, gn, gd = _kernels.photometric(
            np.ascontiguousarray(ref_gray, dtype=np.float64), np.ascontiguousarray(gray, dtype=np.float64),
            A, b, ref.K_inv, N, D, np.ascontiguousarray(w, dtype=np.float64), k, frozen, cx, cy, sv,
            NCC_VAR_FLOOR)
        if branches is not None and not frozen:
            branches.pick(key, lambda: (cx, cy, sv))
        sel = usable & (w > 0)
        V = int(sel.sum())
        counts.append(V)
        if V == 0:
            continue
        ws = np.where(sel, w, 0.0)
        value += float(np.sum(ws * np.clip(cost, 0.0, 2.0))) / V
        gN += (ws / V)[..., None] * gn
        gD += ws / V * gd
    return value, gN, gD, counts


def loss_feature(feat_r, feat_srcs, ref: Camera, srcs, depth, weights, branches=None):
    """(1/N) sum over sources of the weighted mean of |1 - cos(F_r(p), F_s(p_s'))|.

    p_s' is the depth reprojection of p into the source. Returns
    (value, d/d depth, [V_s]).
    """
    if len(srcs) == 0:
        raise NoSourceViews("feature loss needs at least one source view")
    feat_r = np.asarray(feat_r, dtype=np.float64)
    C = feat_r.shape[-1]
    H, W = depth.shape
    g_depth = np.zeros((H, W))
    value = 0.0
    counts = []
    n_src = len(srcs)
    v_idx, u_idx = np.mgrid[0:H, 0:W]
    for s, (src, Fs, w) in enumerate(zip(srcs, feat_srcs, weights)):
        Fs = np.asarray(Fs, dtype=np.float64)
        if Fs.shape[-1] != C:
            raise ChannelMismatch(f"source {s} has {Fs.shape[-1]} channels, reference {C}")
        Hs, Ws = Fs.shape[:2]
        sel = w > 0
        pix = np.stack([u_idx[sel], v_idx[sel]], axis=-1).astype(np.float64)
        z = depth[sel]
        Xs, ps, rays = _to_source(pix, z, ref, src)

        def cells():
            ok = (Xs[:, 2] > 1e-9) & in_sample_domain(ps[:, 0], ps[:, 1], Ws, Hs)
            cx = np.clip(np.floor(np.where(ok, ps[:, 0], 0)), 0, Ws - 2).astype(np.int64)
            cy = np.clip(np.floor(np.where(ok, ps[:, 1], 0)), 0, Hs - 2).astype(np.int64)
            return cx, cy, ok
        cx, cy, ok = _pick(branches, f"lf_cells_{s}", cells)
        V = int(ok.sum())
        counts.append(V)
        if V == 0:
            continue
        fr = feat_r[sel][ok]
        fs, dfx, dfy, _, _ = bilinear_gather(Fs, ps[ok, 0], ps[ok, 1], cx[ok], cy[ok])
        na = np.linalg.norm(fr, axis=-1)
        nb = np.linalg.norm(fs, axis=-1)
        raw = na * nb
        den = np.maximum(raw, 1e-8)
        cos = np.sum(fr * fs, axis=-1) / den
        r = 1.0 - cos
        sg = _pick(branches, f"lf_sign_{s}", lambda: _sign(r))
        wv = w[sel][ok]
        value += float(np.sum(wv * sg * r)) / (V * n_src)
        # d cos / d fs
        nb2 = np.where(raw > 1e-8, nb * nb, 1.0)
        dcos = fr / den[:, None] - np.where(raw > 1e-8, cos / nb2, 0.0)[:, None] * fs
        g_c = -(wv * sg / (V * n_src))[:, None] * dcos
        g_u = np.sum(g_c * dfx, axis=-1)
        g_v = np.sum(g_c * dfy, axis=-1)
        Xo = Xs[ok]
        h = Xo @ src.K.T
        K = src.K
        du = (K[0][None, :] - (h[:, 0] / h[:, 2])[:, None] * K[2][None, :]) / h[:, 2:3]
        dv = (K[1][None, :] - (h[:, 1] / h[:, 2])[:, None] * K[2][None, :]) / h[:, 2:3]
        R, _ = relative_pose(ref, src)
        dX_dz = rays[ok] @ R.T
        gz = np.sum((g_u[:, None] * du + g_v[:, None] * dv) * dX_dz, axis=-1)
        flat = np.flatnonzero(sel.ravel())[ok]
        np.add.at(g_depth.reshape(-1), flat, gz)
    return value, g_depth, counts


# --- per-view composition ----------------------------------------------------------------------

@dataclass
class ViewData:
    """Constant per-view inputs derived from the ground-truth image."""
    cam: Camera
    image: np.ndarray            # (H, W, 3)
    gray: np.ndarray = None
    edges: np.ndarray = None     # normalized gradient magnitude of the image
    features: np.ndarray = None  # (H, W, C)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.gray is None:
            self.gray = luminance(self.image)
        if self.edges is None:
            self.edges = image_gradient(self.image)


@dataclass
class SourceData:
    view: ViewData
    depth: np.ndarray   # rendered depth of the source view (treated as constant)
    valid: np.ndarray


ACTIVE_ALL = frozenset({"L_I", "edge", "L_nc", "L_ns", "L_p", "L_f"})


def _depth_on_mask(buf: RenderBuffers, mask):
    if buf.settings.depth_mode == "blend":
        a = np.where(mask, buf.accumulated_alpha, 1.0)
        return np.where(mask, buf.blended_gaussian_depth / a, 0.0)
    rays = buf.cam.intrinsics.pixel_rays()
    den = np.where(mask, np.sum(buf.blended_normal * rays, axis=-1), 1.0)
    return np.where(mask, buf.blended_distance / den, 0.0)


def view_objective(buf: RenderBuffers, ref: ViewData, sources, weights: LossWeights,
                   active=ACTIVE_ALL, branches=None, backward: bool = True) -> LossReport:
    """All active terms for one rendered view, their weighted total and parameter gradients.

    ``active`` names the enabled terms (``L_I``, ``edge``, ``L_nc``, ``L_ns``,
    ``L_p``, ``L_f``); ``edge`` switches the gradient-map part of the image term.
    """
    active = frozenset(active)
    terms = {}
    g_color = None
    g_norm = np.zeros(buf.blended_normal.shape)
    g_dist = np.zeros(buf.blended_distance.shape)
    g_depth = np.zeros(buf.blended_distance.shape)
    visible = {}

    if "L_I" in active:
        beta2 = weights.beta2 if "edge" in active else 0.0
        v, g = loss_image(buf.color, ref.image, weights.beta1, beta2, branches, ref.edges)
        terms["L_I"] = v
        g_color = g

    geo = active & {"L_nc", "L_ns", "L_p", "L_f"}
    mask = None
    if geo:
        mask = _pick(branches, "depth_mask", lambda: buf.depth_valid.copy())
        depth = _depth_on_mask(buf, mask)

    if active & {"L_nc", "L_ns"}:
        sign = branches.pick("nd_sign", None) if branches is not None and "nd_sign" in branches else None
        dn = normals_from_depth(depth, mask, buf.cam, sign)
        if branches is not None:
            branches.pick("nd_sign", lambda: dn.sign)
        Nb = buf.blended_normal
        nrm = np.maximum(np.linalg.norm(Nb, axis=-1), 1e-12)
        n_rend = np.where(mask[..., None], Nb / nrm[..., None], 0.0)
        valid = mask & dn.valid
        g_rend = np.zeros_like(n_rend)
        g_nd = np.zeros_like(n_rend)
        if "L_nc" in active:
            v, gr, gd = loss_normal_consistency(n_rend, dn.normals, ref.edges, valid, branches)
            terms["L_nc"] = v
            g_rend += weights.lambda1 * gr
            g_nd += weights.lambda1 * gd
        if "L_ns" in active:
            v, gd = loss_normal_smooth(n_rend, dn.normals, ref.edges, valid, weights.tau, branches)
            terms["L_ns"] = v
            g_nd += weights.lambda2 * gd
        if backward:
            # d (N / |N|) = (I - n n^T) / |N|
            g_norm += np.where(mask[..., None],
                               (g_rend - n_rend * np.sum(n_rend * g_rend, axis=-1, keepdims=True)) / nrm[..., None],
                               0.0)
            g_depth += normals_from_depth_backward(g_nd, dn, buf.cam)

    if active & {"L_p", "L_f"}:
        if not sources:
            raise NoSourceViews("multi-view terms need source views")
        srcs = [s.view.cam for s in sources]
        wmaps = [_pick(branches, f"mv_w_{i}",
                       lambda s=s: multiview_weights(depth, mask, ref.cam, s.view.cam, s.depth, s.valid)[2])
                 for i, s in enumerate(sources)]
        if "L_p" in active:
            v, gn, gd, counts = loss_photometric(ref.gray, [s.view.gray for s in sources], ref.cam, srcs,
                                                 buf.blended_normal, buf.blended_distance, wmaps,
                                                 weights.patch_size, branches)
            terms["L_p"] = v
            visible = {c.view_id: n for c, n in zip(srcs, counts)}
            g_norm += weights.lambda3 * gn
            g_dist += weights.lambda3 * gd
        if "L_f" in active:
            v, gz, _ = loss_feature(ref.features, [s.view.features for s in sources], ref.cam, srcs,
                                    depth, wmaps, branches)
            terms["L_f"] = v
            g_depth += weights.lambda4 * gz

    report = total_loss(terms, weights)
    report.visible = visible
    if backward:
        grads = {"color": g_color, "blended_normal": g_norm, "blended_distance": g_dist}
        if mask is not None:
            grads["depth"] = g_depth
            grads["depth_mask"] = mask
        report.grads = render_backward(buf, grads)
    return report
