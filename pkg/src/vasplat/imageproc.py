"""Image-space primitives shared by the losses, each with its reverse mode."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidNeighborhood, OutOfBounds, ShapeMismatch
from .geometry import Camera

LUMA = np.array([0.299, 0.587, 0.114])

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


# --- image gradient ---------------------------------------------------------------

def _diff_x(g):
    d = np.empty_like(g)
    d[:, 1:-1] = 0.5 * (g[:, 2:] - g[:, :-2])
    d[:, 0] = g[:, 1] - g[:, 0]
    d[:, -1] = g[:, -1] - g[:, -2]
    return d


def _diff_x_adjoint(d):
    g = np.zeros_like(d)
    g[:, 2:] += 0.5 * d[:, 1:-1]
    g[:, :-2] -= 0.5 * d[:, 1:-1]
    g[:, 1] += d[:, 0]
    g[:, 0] -= d[:, 0]
    g[:, -1] += d[:, -1]
    g[:, -2] -= d[:, -1]
    return g


def gradient_magnitude(gray: np.ndarray):
    """Unnormalised central-difference magnitude (one-sided at the borders)."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.shape[0] < 2 or gray.shape[1] < 2:
        z = np.zeros_like(gray)
        return z, z, z
    gx = _diff_x(gray)
    gy = _diff_x(gray.T).T
    return np.sqrt(gx * gx + gy * gy), gx, gy


def image_gradient(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the luminance, scaled so the largest value is 1."""
    mag, _, _ = gradient_magnitude(luminance(img))
    m = mag.max() if mag.size else 0.0
    if m <= 0:
        return np.zeros_like(mag)
    return mag / m


def image_gradient_backward(img: np.ndarray, g_out: np.ndarray, argmax: int | None = None) -> np.ndarray:
    """Gradient of ``sum(g_out * image_gradient(img))`` w.r.t. ``img``.

    ``argmax`` pins the flat index of the normalising maximum.
    """
    img = np.asarray(img, dtype=np.float64)
    mag, gx, gy = gradient_magnitude(luminance(img))
    if argmax is None:
        argmax = int(np.argmax(mag))
    m = mag.flat[argmax]
    if m <= 0:
        return np.zeros_like(img)
    g_mag = g_out / m
    g_mag.flat[argmax] -= np.sum(g_out * mag) / (m * m)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(mag > 0, 1.0 / mag, 0.0)
    g_gx = g_mag * gx * inv
    g_gy = g_mag * gy * inv
    g_gray = _diff_x_adjoint(g_gx) + _diff_x_adjoint(g_gy.T).T
    if img.ndim == 3 and img.shape[2] == 3:
        return g_gray[..., None] * LUMA
    if img.ndim == 3:
        return g_gray[..., None]
    return g_gray


# --- SSIM ---------------------------------------------------------------------------

def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


_WIN = _gauss_window()


def _blur(x):
    # zero padding; the window is symmetric so this operator is self-adjoint
    y = correlate1d(x, _WIN, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WIN, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    s_aa = _blur(a * a) - mu_a * mu_a
    s_bb = _blur(b * b) - mu_b * mu_b
    s_ab = _blur(a * b) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * s_ab + SSIM_C2
    B1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    B2 = s_aa + s_bb + SSIM_C2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim(a: np.ndarray, b: np.ndarray):
    """Mean SSIM and the per-pixel map (11x11 Gaussian window, sigma 1.5, range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    smap = (A1 * A2) / (B1 * B2)
    return float(smap.mean()), smap


def ssim_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of mean SSIM w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    S = (A1 * A2) / (B1 * B2)
    g = 1.0 / a.size
    dS_dmu = S * (2 * mu_b / A1 - 2 * mu_a / B1)
    dS_dsaa = -S / B2
    dS_dsab = 2 * S / A2
    g_mu = g * (dS_dmu - 2 * mu_a * dS_dsaa - mu_b * dS_dsab)
    g_eaa = g * dS_dsaa
    g_eab = g * dS_dsab
    return _blur(g_mu) + 2 * a * _blur(g_eaa) + b * _blur(g_eab)


# --- bilinear sampling ------------------------------------------------------------------

def _cells(x, size):
    return np.clip(np.floor(x), 0, size - 2).astype(np.int64)


def bilinear_gather(img: np.ndarray, x: np.ndarray, y: np.ndarray, cx=None, cy=None):
    """Vectorised bilinear interpolation with exact spatial derivatives.

    ``cx``/``cy`` fix the interpolation cell (the lower-left corner); when
    omitted the cell containing the point is used. Returns values, d/dx,
    d/dy and the cells. Points are not bounds-checked here.
    """
    H, W = img.shape[:2]
    if cx is None:
        cx = _cells(x, W)
    if cy is None:
        cy = _cells(y, H)
    fx = x - cx
    fy = y - cy
    if img.ndim == 3:
        fx_, fy_ = fx[..., None], fy[..., None]
    else:
        fx_, fy_ = fx, fy
    v00 = img[cy, cx]
    v01 = img[cy, cx + 1]
    v10 = img[cy + 1, cx]
    v11 = img[cy + 1, cx + 1]
    # (1 - f) a + f b reproduces the corner values exactly at f = 0 and f = 1
    top = (1.0 - fx_) * v00 + fx_ * v01
    bot = (1.0 - fx_) * v10 + fx_ * v11
    val = (1.0 - fy_) * top + fy_ * bot
    dx = (v01 - v00) + fy_ * ((v11 - v10) - (v01 - v00))
    dy = bot - top
    return val, dx, dy, cx, cy


def in_sample_domain(x, y, W, H):
    return (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)


def bilinear_sample(img: np.ndarray, xy):
    """Value and derivative w.r.t. (x, y) of the bilinear interpolant at one point."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    x, y = float(xy[0]), float(xy[1])
    if not in_sample_domain(x, y, W, H):
        raise OutOfBounds(f"({x}, {y}) outside [0, {W - 1}] x [0, {H - 1}]")
    val, dx, dy, _, _ = bilinear_gather(img, np.array([x]), np.array([y]))
    return val[0], np.stack([dx[0], dy[0]], axis=-1)


# --- patches and NCC --------------------------------------------------------------------

@dataclass
class Patch:
    values: np.ndarray   # (k, k)
    valid: np.ndarray    # (k, k) bool

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def patch_offsets(k: int):
    if k % 2 != 1:
        raise ValueError("patch size must be odd")
    r = k // 2
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    return ox.astype(np.float64), oy.astype(np.float64)


def crop_patch(img: np.ndarray, center, k: int) -> Patch:
    gray = luminance(img)
    H, W = gray.shape
    ox, oy = patch_offsets(k)
    x = center[0] + ox
    y = center[1] + oy
    xi = np.round(x).astype(np.int64)
    yi = np.round(y).astype(np.int64)
    valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    vals = np.zeros((k, k))
    vals[valid] = gray[yi[valid], xi[valid]]
    return Patch(vals, valid)


def warp_patch(src_img: np.ndarray, H: np.ndarray, center, k: int = 7, with_jacobian: bool = False):
    """Sample the source image on the k x k reference grid mapped through ``H``.

    With ``with_jacobian`` also returns d(values)/d(H entries), shape (k, k, 9).
    """
    gray = luminance(src_img)
    Hs, Ws = gray.shape
    ox, oy = patch_offsets(k)
    q = np.stack([center[0] + ox, center[1] + oy, np.ones_like(ox)], axis=-1)
    h = q @ np.asarray(H, dtype=np.float64).T
    w = h[..., 2]
    ok = np.abs(w) > 1e-12
    ws = np.where(ok, w, 1.0)
    u = h[..., 0] / ws
    v = h[..., 1] / ws
    valid = ok & (w > 0) & in_sample_domain(u, v, Ws, Hs)
    vals = np.zeros((k, k))
    jac = np.zeros((k, k, 9))
    if valid.any():
        val, dx, dy, _, _ = bilinear_gather(gray, u[valid], v[valid])
        vals[valid] = val
        if with_jacobian:
            wv = ws[valid]
            # d value / d h
            dh = np.stack([dx / wv, dy / wv, -(dx * u[valid] + dy * v[valid]) / wv], axis=-1)
            jac[valid] = (dh[:, :, None] * q[valid][:, None, :]).reshape(-1, 9)
    patch = Patch(vals, valid)
    return (patch, jac) if with_jacobian else patch


def ncc_with_flag(pr: Patch, ps: Patch, var_floor: float = 1e-8):
    """NCC over jointly valid samples and whether enough samples were valid."""
    if pr.values.shape != ps.values.shape:
        raise ShapeMismatch("patch sizes differ")
    joint = pr.valid & ps.valid
    n = int(joint.sum())
    k2 = pr.values.size
    usable = 2 * n >= k2
    if n == 0:
        return 0.0, False
    a = pr.values[joint]
    b = ps.values[joint]
    a = a - a.mean()
    b = b - b.mean()
    saa = float(a @ a)
    sbb = float(b @ b)
    if saa / n < var_floor or sbb / n < var_floor:
        return 0.0, usable
    return float(np.clip((a @ b) / np.sqrt(saa * sbb), -1.0, 1.0)), usable


def ncc(pr: Patch, ps: Patch) -> float:
    """Normalised cross-correlation in [-1, 1]; 0 for flat or unusable patches."""
    value, usable = ncc_with_flag(pr, ps)
    return value if usable else 0.0


# --- normals from depth ------------------------------------------------------------------

def normal_from_depth(depth_map: np.ndarray, cam: Camera, pixel, valid=None) -> np.ndarray:
    """Camera-facing unit normal at an integer pixel from its 4-neighbourhood."""
    u, v = int(pixel[0]), int(pixel[1])
    H, W = depth_map.shape
    if not (1 <= u < W - 1 and 1 <= v < H - 1):
        raise InvalidNeighborhood(f"pixel {(u, v)} has no full 4-neighbourhood")
    if valid is None:
        valid = depth_map > 0
    nb = [(u + 1, v), (u - 1, v), (u, v + 1), (u, v - 1)]
    if not all(valid[y, x] for x, y in nb):
        raise InvalidNeighborhood(f"pixel {(u, v)} has an invalid neighbour")
    Kinv = cam.K_inv
    P = [depth_map[y, x] * (Kinv @ np.array([x, y, 1.0])) for x, y in nb]
    n = np.cross(P[0] - P[1], P[2] - P[3])
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise InvalidNeighborhood("degenerate neighbourhood")
    n = n / norm
    return -n if n[2] > 0 else n


@dataclass
class DepthNormals:
    normals: np.ndarray   # (H, W, 3) unit, camera facing, zero where invalid
    valid: np.ndarray     # (H, W) bool
    cross: np.ndarray     # (H, W, 3) raw cross product
    sign: np.ndarray      # (H, W) orientation flip applied
    a: np.ndarray = None  # right - left points, interior only
    b: np.ndarray = None  # down - up points, interior only


def normals_from_depth(depth: np.ndarray, valid: np.ndarray, cam: Camera, sign=None) -> DepthNormals:
    """Map version of :func:`normal_from_depth`; border and invalid-neighbour pixels are masked.

    ``sign`` pins the orientation choice per pixel.
    """
    H, W = depth.shape
    cross = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    A = B = None
    if H >= 3 and W >= 3:
        pts = depth[..., None] * cam.intrinsics.pixel_rays()
        A = pts[1:-1, 2:] - pts[1:-1, :-2]
        B = pts[2:, 1:-1] - pts[:-2, 1:-1]
        cross[1:-1, 1:-1] = np.cross(A, B)
        ok[1:-1, 1:-1] = valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    norm = np.linalg.norm(cross, axis=-1)
    ok &= norm > 1e-12
    safe = np.where(ok, norm, 1.0)
    n = np.where(ok[..., None], cross / safe[..., None], 0.0)
    if sign is None:
        sign = np.where(n[..., 2] > 0, -1.0, 1.0)
    n = n * sign[..., None]
    return DepthNormals(n, ok, cross, sign, A, B)


def normals_from_depth_backward(g_n: np.ndarray, dn: DepthNormals, cam: Camera) -> np.ndarray:
    """Gradient w.r.t. the depth map given a gradient on ``dn.normals`` (masked pixels ignored)."""
    H, W = g_n.shape[:2]
    g_depth = np.zeros((H, W))
    if dn.a is None:
        return g_depth
    ok = dn.valid
    norm = np.where(ok, np.linalg.norm(dn.cross, axis=-1), 1.0)
    n = dn.normals * dn.sign[..., None]
    g = np.where(ok[..., None], g_n * dn.sign[..., None], 0.0)
    g_c = ((g - n * np.sum(n * g, axis=-1, keepdims=True)) / norm[..., None])[1:-1, 1:-1]
    g_A = np.cross(dn.b, g_c)
    g_B = np.cross(g_c, dn.a)
    rays = cam.intrinsics.pixel_rays()
    g_depth[1:-1, 2:] += np.sum(g_A * rays[1:-1, 2:], axis=-1)
    g_depth[1:-1, :-2] -= np.sum(g_A * rays[1:-1, :-2], axis=-1)
    g_depth[2:, 1:-1] += np.sum(g_B * rays[2:, 1:-1], axis=-1)
    g_depth[:-2, 1:-1] -= np.sum(g_B * rays[:-2, 1:-1], axis=-1)
    return g_depth
