"""Differentiable splatting of a GaussianCloud into per-pixel buffers.

Forward: EWA projection of every primitive, depth sort, tile binning and
front-to-back alpha compositing of color, camera-frame normal, plane distance,
camera depth and coverage. Backward: exact reverse mode of the same
computation down to the cloud parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import Culled, InvalidCamera, MissingContributorRecords
from .gaussians import GaussianCloud, quat_to_rotmat, rotmat_grad_to_quat, sigmoid
from .geometry import Camera

# feature channel layout of the composited buffer
C_COLOR = slice(0, 3)
C_NORMAL = slice(3, 6)
C_DIST = 6
C_DEPTH = 7
C_ALPHA = 8
N_CHANNELS = 9

SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


@dataclass(frozen=True)
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    alpha_max: float = 0.99
    min_alpha: float = 1.0 / 255.0
    t_min: float = 1e-4
    dilation: float = 0.3
    near: float = 0.01
    alpha_floor: float = 0.5
    tile_size: int = 8
    depth_mode: str = "plane"  # or "blend"

    def smooth(self, **kw) -> "RenderSettings":
        """Variant without the hard cut-offs, for finite-difference checks."""
        opts = dict(self.__dict__, min_alpha=1e-10, t_min=0.0)
        opts.update(kw)
        return RenderSettings(**opts)


@dataclass
class SplatProjection:
    """Screen-space footprint of the visible primitives in one view."""

    index: np.ndarray        # indices into the cloud
    mean2d: np.ndarray       # (V, 2) pixels
    cov2d: np.ndarray        # (V, 2, 2), dilation included
    conic: np.ndarray        # (V, 3) upper triangle of cov2d^-1
    depth: np.ndarray        # (V,) camera z
    opacity: np.ndarray      # (V,)
    color: np.ndarray        # (V, 3)
    normal: np.ndarray       # (V, 3) camera frame, camera facing
    distance: np.ndarray     # (V,) plane distance d
    # cached intermediates for the reverse pass
    t: np.ndarray = None
    J: np.ndarray = None
    cov_cam: np.ndarray = None
    R: np.ndarray = None
    scales: np.ndarray = None
    axis: np.ndarray = None
    sign: np.ndarray = None
    sh_basis: np.ndarray = None
    view_dir: np.ndarray = None
    view_dist: np.ndarray = None
    bounds: np.ndarray = None  # (V, 4) inclusive pixel bbox x0, x1, y0, y1

    def __len__(self):
        return len(self.index)

    def features(self) -> np.ndarray:
        f = np.empty((len(self), N_CHANNELS))
        f[:, C_COLOR] = self.color
        f[:, C_NORMAL] = self.normal
        f[:, C_DIST] = self.distance
        f[:, C_DEPTH] = self.depth
        f[:, C_ALPHA] = 1.0
        return f


# --- spherical harmonics ---------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int):
    """Real SH basis (without the DC term) and its derivative w.r.t. the direction."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    Y, dY = [], []
    zero = np.zeros(n)
    if degree >= 1:
        Y += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
        dY += [(zero, -SH_C1 + zero, zero), (zero, zero, SH_C1 + zero), (-SH_C1 + zero, zero, zero)]
    if degree >= 2:
        c = SH_C2
        Y += [c[0] * x * y, c[1] * y * z, c[2] * (2 * z * z - x * x - y * y), c[3] * x * z, c[4] * (x * x - y * y)]
        dY += [(c[0] * y, c[0] * x, zero), (zero, c[1] * z, c[1] * y),
               (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z), (c[3] * z, zero, c[3] * x),
               (2 * c[4] * x, -2 * c[4] * y, zero)]
    if not Y:
        return np.zeros((n, 0)), np.zeros((n, 0, 3))
    return np.stack(Y, axis=1), np.stack([np.stack(d, axis=1) for d in dY], axis=1)


# --- projection ------------------------------------------------------------------

def _min_alpha_radius2(opacity, settings):
    """Mahalanobis^2 beyond which alpha drops below ``min_alpha``."""
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.maximum(opacity, 1e-300) / settings.min_alpha)


def project_cloud(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> SplatProjection:
    """Project all primitives; culled ones are dropped from the result."""
    intr = cam.intrinsics
    Rwc = cam.pose.R_wc
    W_rot = Rwc.T
    t_all = (cloud.positions - cam.pose.t_c) @ Rwc
    keep = t_all[:, 2] > settings.near
    opac_all = sigmoid(cloud.opacity_logits)
    m_cut_all = _min_alpha_radius2(opac_all, settings)
    keep &= m_cut_all > 0
    idx = np.nonzero(keep)[0]
    t = t_all[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = intr.fx, intr.fy
    mean2d = np.stack([fx * x / z + intr.cx, fy * y / z + intr.cy], axis=1)

    R = quat_to_rotmat(cloud.rotations[idx])
    scales = np.exp(cloud.log_scales[idx])
    M = R * scales[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    cov_cam = W_rot @ cov @ W_rot.T
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    m_cut = m_cut_all[idx]
    rx = np.sqrt(m_cut * a) + 1.0
    ry = np.sqrt(m_cut * c) + 1.0
    x0 = np.ceil(mean2d[:, 0] - rx)
    x1 = np.floor(mean2d[:, 0] + rx)
    y0 = np.ceil(mean2d[:, 1] - ry)
    y1 = np.floor(mean2d[:, 1] + ry)
    onscreen = (x1 >= 0) & (x0 <= intr.width - 1) & (y1 >= 0) & (y0 <= intr.height - 1) & (det > 0)
    sel = np.nonzero(onscreen)[0]
    bounds = np.stack([np.clip(x0, 0, intr.width - 1), np.clip(x1, 0, intr.width - 1),
                       np.clip(y0, 0, intr.height - 1), np.clip(y1, 0, intr.height - 1)], axis=1)

    axis = np.argmin(cloud.log_scales[idx], axis=1)
    n_world = R[np.arange(len(idx)), :, axis]
    n_cam = n_world @ W_rot.T
    sign = np.where(n_cam[:, 2] > 0, -1.0, 1.0)
    n_cam = n_cam * sign[:, None]
    dist = np.sum(t * n_cam, axis=1)

    color = cloud.colors[idx].copy()
    basis = view_dir = view_dist = None
    if cloud.sh_degree > 0:
        v = cloud.positions[idx] - cam.pose.t_c
        view_dist = np.linalg.norm(v, axis=1)
        view_dir = v / view_dist[:, None]
        basis, _ = sh_basis(view_dir, cloud.sh_degree)
        color += np.einsum("nk,nkc->nc", basis, cloud.sh_rest[idx])

    proj = SplatProjection(
        index=idx, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z.copy(), opacity=opac_all[idx],
        color=color, normal=n_cam, distance=dist, t=t, J=J, cov_cam=cov_cam, R=R, scales=scales,
        axis=axis, sign=sign, sh_basis=basis, view_dir=view_dir, view_dist=view_dist,
        bounds=bounds.astype(np.int64),
    )
    return _subset(proj, sel)


def _subset(p: SplatProjection, sel) -> SplatProjection:
    kw = {}
    for name, val in p.__dict__.items():
        kw[name] = None if val is None else val[sel]
    return SplatProjection(**kw)


def project_gaussian(cloud: GaussianCloud, i: int, cam: Camera, settings: RenderSettings = None) -> SplatProjection:
    """Projection of primitive ``i`` alone; raises Culled when it is not drawn."""
    settings = settings or RenderSettings()
    proj = project_cloud(cloud.select([i]), cam, settings)
    if len(proj) == 0:
        raise Culled(f"primitive {i} is behind the near plane or off-screen")
    proj.index = np.array([i])
    return proj


def project_backward(cloud: GaussianCloud, cam: Camera, proj: SplatProjection, g: np.ndarray) -> dict:
    """Chain per-primitive screen gradients back to the cloud parameters.

    ``g`` has rows [d mean(2), d conic(3), d opacity, d features(9)] for each
    visible primitive.
    """
    intr = cam.intrinsics
    fx, fy = intr.fx, intr.fy
    W_rot = cam.pose.R_wc.T
    V = len(proj)
    idx = proj.index
    t = proj.t
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    g_mean = g[:, 0:2]
    g_conic = g[:, 2:5]
    g_opac = g[:, 5]
    g_feat = g[:, 6:]

    # conic -> cov2d
    ca, cb, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    A = np.empty((V, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = ca, cb, cb, cc
    GA = np.empty((V, 2, 2))
    GA[:, 0, 0] = g_conic[:, 0]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * g_conic[:, 1]
    GA[:, 1, 1] = g_conic[:, 2]
    G2 = -A @ GA @ A

    J = proj.J
    Jt = np.swapaxes(J, 1, 2)
    G_cov_cam = Jt @ G2 @ J
    G_J = 2.0 * G2 @ J @ proj.cov_cam
    G_cov = W_rot.T @ G_cov_cam @ W_rot

    R = proj.R
    s = proj.scales
    M = R * s[:, None, :]
    G_M = 2.0 * G_cov @ M
    G_R = G_M * s[:, None, :]
    G_s = np.einsum("nij,nij->nj", R, G_M)
    G_logs = G_s * s

    # camera-frame position: mean2d, J, distance, depth
    g_t = np.zeros((V, 3))
    g_t[:, 0] += g_mean[:, 0] * fx / z
    g_t[:, 2] += -g_mean[:, 0] * fx * x / (z * z)
    g_t[:, 1] += g_mean[:, 1] * fy / z
    g_t[:, 2] += -g_mean[:, 1] * fy * y / (z * z)
    g_t[:, 2] += -G_J[:, 0, 0] * fx / (z * z)
    g_t[:, 0] += -G_J[:, 0, 2] * fx / (z * z)
    g_t[:, 2] += G_J[:, 0, 2] * 2.0 * fx * x / z ** 3
    g_t[:, 2] += -G_J[:, 1, 1] * fy / (z * z)
    g_t[:, 1] += -G_J[:, 1, 2] * fy / (z * z)
    g_t[:, 2] += G_J[:, 1, 2] * 2.0 * fy * y / z ** 3
    g_n = g_feat[:, C_NORMAL] + g_feat[:, C_DIST][:, None] * t
    g_t += g_feat[:, C_DIST][:, None] * proj.normal
    g_t[:, 2] += g_feat[:, C_DEPTH]
    # n_cam = sign * W R[:, axis]
    g_col = (g_n * proj.sign[:, None]) @ W_rot
    G_R[np.arange(V), :, proj.axis] += g_col
    g_pos = g_t @ W_rot

    P = len(cloud)
    out = {
        "positions": np.zeros((P, 3)),
        "rotations": np.zeros((P, 4)),
        "log_scales": np.zeros((P, 3)),
        "opacity_logits": np.zeros(P),
        "colors": np.zeros((P, 3)),
        "sh_rest": np.zeros_like(cloud.sh_rest),
        "mean2d": np.zeros((P, 2)),
    }
    g_color = g_feat[:, C_COLOR]
    if cloud.sh_degree > 0:
        basis, dbasis = sh_basis(proj.view_dir, cloud.sh_degree)
        out["sh_rest"][idx] = basis[:, :, None] * g_color[:, None, :]
        # color depends on the view direction through the SH basis
        g_basis = np.einsum("nkc,nc->nk", cloud.sh_rest[idx], g_color)
        g_dir = np.einsum("nk,nkd->nd", g_basis, dbasis)
        d = proj.view_dir
        g_v = (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / proj.view_dist[:, None]
        g_pos += g_v
    out["positions"][idx] = g_pos
    out["rotations"][idx] = rotmat_grad_to_quat(cloud.rotations[idx], G_R)
    out["log_scales"][idx] = G_logs
    op = proj.opacity
    out["opacity_logits"][idx] = g_opac * op * (1.0 - op)
    out["colors"][idx] = g_color
    out["mean2d"][idx] = g_mean
    return out


# --- buffers ---------------------------------------------------------------------

@dataclass
class RenderBuffers:
    color: np.ndarray               # (H, W, 3)
    accumulated_alpha: np.ndarray   # (H, W)
    blended_normal: np.ndarray      # (H, W, 3) camera frame, unnormalised
    blended_distance: np.ndarray    # (H, W)
    plane_depth: np.ndarray         # (H, W), 0 where invalid
    plane_valid: np.ndarray         # (H, W) bool
    blended_gaussian_depth: np.ndarray  # (H, W) sum of z * weight
    final_T: np.ndarray
    n_contrib: np.ndarray
    cam: Camera
    settings: RenderSettings
    _ctx: dict = field(default=None, repr=False)

    @property
    def depth(self) -> np.ndarray:
        """Depth map for the configured depth mode (0 where invalid)."""
        if self.settings.depth_mode == "blend":
            z, _ = blended_depth(self.blended_gaussian_depth, self.accumulated_alpha, self.settings.alpha_floor)
            return z
        return self.plane_depth

    @property
    def depth_valid(self) -> np.ndarray:
        if self.settings.depth_mode == "blend":
            return self.accumulated_alpha > self.settings.alpha_floor
        return self.plane_valid

    @property
    def has_records(self) -> bool:
        return self._ctx is not None

    def contributors(self, u: int, v: int):
        """Ordered contributor records (cloud index, alpha, transmittance before) at pixel (u, v)."""
        if self._ctx is None:
            raise MissingContributorRecords("buffers were produced without contributor records")
        c = self._ctx
        ts = self.settings.tile_size
        tile = (v // ts) * c["tiles_x"] + (u // ts)
        proj = c["proj"]
        cut = _kernels.alpha_cut(proj.opacity, self.settings.min_alpha)
        loc, a, T = _kernels.pixel_contributors(proj.mean2d, proj.conic, proj.opacity, cut, c["ranges"], c["entries"],
                                                tile, float(u), float(v), int(c["n_last"][v, u]),
                                                self.settings.alpha_max, self.settings.min_alpha)
        return [(int(proj.index[i]), float(ai), float(Ti)) for i, ai, Ti in zip(loc, a, T)]


def depth_from_plane_maps(blended_distance, blended_normal, cam: Camera, alpha=None, alpha_floor=0.5):
    """Per-pixel ray/plane intersection depth and its validity mask."""
    rays = cam.intrinsics.pixel_rays()
    den = np.sum(blended_normal * rays, axis=-1)
    valid = np.abs(den) >= 1e-6
    if alpha is not None:
        valid &= alpha > alpha_floor
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(valid, blended_distance / np.where(valid, den, 1.0), 0.0)
    valid &= depth > 0
    depth = np.where(valid, depth, 0.0)
    return depth, valid


def plane_depth_raw(blended_distance, blended_normal, cam: Camera, mask):
    """Plane depth evaluated on a fixed pixel mask (no re-thresholding)."""
    rays = cam.intrinsics.pixel_rays()
    den = np.sum(blended_normal * rays, axis=-1)
    return np.where(mask, blended_distance / np.where(mask, den, 1.0), 0.0)


def plane_depth_backward(g_depth, blended_distance, blended_normal, cam: Camera, mask):
    rays = cam.intrinsics.pixel_rays()
    den = np.where(mask, np.sum(blended_normal * rays, axis=-1), 1.0)
    g = np.where(mask, g_depth, 0.0)
    g_dist = g / den
    g_norm = (-g * blended_distance / (den * den))[..., None] * rays
    return g_dist, g_norm


def blended_depth(gdepth, alpha, alpha_floor):
    valid = alpha > alpha_floor
    return np.where(valid, gdepth / np.where(valid, alpha, 1.0), 0.0), valid


def render(cloud: GaussianCloud, cam: Camera, settings: RenderSettings = None, records: bool = True) -> RenderBuffers:
    settings = settings or RenderSettings()
    if not isinstance(cam, Camera):
        raise InvalidCamera("render needs a Camera")
    if settings.tile_size < 1:
        raise InvalidCamera("tile size must be positive")
    H, W = cam.height, cam.width
    ts = settings.tile_size
    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    bg = np.asarray(settings.background, dtype=np.float64)

    proj = project_cloud(cloud, cam, settings)
    V = len(proj)
    if V:
        wp = cloud.positions[proj.index]
        order = np.lexsort((proj.index, wp[:, 2], wp[:, 1], wp[:, 0], proj.depth)).astype(np.int64)
    else:
        order = np.zeros(0, dtype=np.int64)
    b = proj.bounds if V else np.zeros((0, 4), dtype=np.int64)
    ranges, entries = _kernels.bin_tiles(b[:, 0].copy(), b[:, 1].copy(), b[:, 2].copy(), b[:, 3].copy(),
                                         order, ts, tiles_x, tiles_y)
    feats = proj.features() if V else np.zeros((0, N_CHANNELS))
    mean2d = proj.mean2d if V else np.zeros((0, 2))
    conic = proj.conic if V else np.zeros((0, 3))
    opac = proj.opacity if V else np.zeros(0)
    out, final_T, n_last, n_contrib = _kernels.forward(
        np.ascontiguousarray(mean2d), np.ascontiguousarray(conic), np.ascontiguousarray(opac),
        _kernels.alpha_cut(opac, settings.min_alpha), np.ascontiguousarray(feats), ranges, entries, H, W, ts, tiles_x, bg,
        settings.alpha_max, settings.min_alpha, settings.t_min)

    normal = out[..., C_NORMAL]
    dist = out[..., C_DIST]
    alpha = out[..., C_ALPHA]
    pdepth, pvalid = depth_from_plane_maps(dist, normal, cam, alpha, settings.alpha_floor)
    ctx = None
    if records:
        ctx = dict(proj=proj, ranges=ranges, entries=entries, n_last=n_last, tiles_x=tiles_x, cloud=cloud,
                   feats=feats)
    return RenderBuffers(
        color=out[..., C_COLOR], accumulated_alpha=alpha, blended_normal=normal, blended_distance=dist,
        plane_depth=pdepth, plane_valid=pvalid, blended_gaussian_depth=out[..., C_DEPTH],
        final_T=final_T, n_contrib=n_contrib, cam=cam, settings=settings, _ctx=ctx)


def render_backward(buffers: RenderBuffers, grads: dict) -> dict:
    """Parameter gradients given upstream gradients on the output maps.

    ``grads`` may contain any of: color, accumulated_alpha, blended_normal,
    blended_distance, plane_depth, blended_gaussian_depth, depth (the
    configured depth mode). Depth gradients are applied on ``depth_mask``
    (default: the buffer's own validity mask).
    """
    if buffers._ctx is None:
        raise MissingContributorRecords("render was called with records=False")
    ctx = buffers._ctx
    cloud = ctx["cloud"]
    cam = buffers.cam
    st = buffers.settings
    H, W = cam.height, cam.width
    go = np.zeros((H, W, N_CHANNELS))
    if grads.get("color") is not None:
        go[..., C_COLOR] += grads["color"]
    if grads.get("accumulated_alpha") is not None:
        go[..., C_ALPHA] += grads["accumulated_alpha"]
    if grads.get("blended_normal") is not None:
        go[..., C_NORMAL] += grads["blended_normal"]
    if grads.get("blended_distance") is not None:
        go[..., C_DIST] += grads["blended_distance"]
    if grads.get("blended_gaussian_depth") is not None:
        go[..., C_DEPTH] += grads["blended_gaussian_depth"]
    g_plane = grads.get("plane_depth")
    g_depth = grads.get("depth")
    if g_depth is not None:
        if st.depth_mode == "blend":
            mask = grads.get("depth_mask", buffers.depth_valid)
            a = np.where(mask, buffers.accumulated_alpha, 1.0)
            gz = np.where(mask, g_depth, 0.0)
            go[..., C_DEPTH] += gz / a
            go[..., C_ALPHA] += -gz * buffers.blended_gaussian_depth / (a * a)
        else:
            g_plane = g_depth if g_plane is None else g_plane + g_depth
    if g_plane is not None:
        mask = grads.get("depth_mask", buffers.plane_valid)
        gd, gn = plane_depth_backward(g_plane, buffers.blended_distance, buffers.blended_normal, cam, mask)
        go[..., C_DIST] += gd
        go[..., C_NORMAL] += gn

    proj = ctx["proj"]
    P = len(cloud)
    if len(proj) == 0 or not np.any(go):
        out = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        out["mean2d"] = np.zeros((P, 2))
        return out
    bg = np.asarray(st.background, dtype=np.float64)
    eg = _kernels.backward(np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
                           np.ascontiguousarray(proj.opacity),
                           _kernels.alpha_cut(proj.opacity, st.min_alpha), ctx["feats"], ctx["ranges"], ctx["entries"],
                           ctx["n_last"], buffers.final_T, go, H, W, st.tile_size, ctx["tiles_x"], bg,
                           st.alpha_max, st.min_alpha)
    g = _kernels.reduce_entries(ctx["entries"], eg, len(proj))
    return project_backward(cloud, cam, proj, g)
