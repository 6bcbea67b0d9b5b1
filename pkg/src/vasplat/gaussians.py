"""Gaussian scene representation and per-primitive plane geometry."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPointSet, RayParallelToPlane, ZeroQuaternion
from .geometry import Camera

MIN_SCALE = 1e-7
MAX_SCALE = 1e3
DEFAULT_OPACITY = 0.1
FALLBACK_SCALE = 0.01


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def n_sh_rest(degree: int) -> int:
    return (degree + 1) ** 2 - 1


@dataclass
class GaussianCloud:
    """Optimisable primitives. Rotations are (w, x, y, z) quaternions."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    sh_rest: np.ndarray = None
    sh_degree: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        P = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(P, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(P, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(P)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(P, 3)
        if self.sh_rest is None:
            self.sh_rest = np.zeros((P, n_sh_rest(self.sh_degree), 3))
        self.sh_rest = np.asarray(self.sh_rest, dtype=np.float64).reshape(P, n_sh_rest(self.sh_degree), 3)

    PARAMS = ("positions", "rotations", "log_scales", "opacity_logits", "colors", "sh_rest")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAMS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def permuted(self, perm) -> "GaussianCloud":
        return self.select(np.asarray(perm))

    @staticmethod
    def concat(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        if a.sh_degree != b.sh_degree:
            raise ValueError("SH degree mismatch")
        return GaussianCloud(**{k: np.concatenate([getattr(a, k), getattr(b, k)]) for k in a.PARAMS},
                             sh_degree=a.sh_degree)

    def normalize(self):
        """Project parameters back onto their valid sets after an update."""
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
        self.rotations[bad] = (1.0, 0.0, 0.0, 0.0)
        norms[bad] = 1.0
        self.rotations /= norms
        np.clip(self.log_scales, np.log(MIN_SCALE), np.log(MAX_SCALE), out=self.log_scales)
        np.clip(self.opacity_logits, -30.0, 30.0, out=self.opacity_logits)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)


# --- rotations --------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; the input is normalised first."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ZeroQuaternion("quaternion has zero norm")
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q / |q|) back to the raw quaternion q."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    w, x, y, z = np.moveaxis(qh, -1, 0)
    G = dR
    dw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    dx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    dqh = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqh - qh * np.sum(qh * dqh, axis=-1, keepdims=True)) / n


# --- per-primitive geometry ---------------------------------------------------

def covariance(rotation, log_scale) -> np.ndarray:
    """Sigma = R S S^T R^T; works on single primitives or stacked arrays."""
    R = quat_to_rotmat(rotation)
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def normal_axis(log_scales: np.ndarray) -> np.ndarray:
    """Index of the smallest scale axis; ties go to the lowest index."""
    return np.argmin(np.asarray(log_scales), axis=-1)


def world_normals(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Unoriented world-frame normals: the rotation column of the smallest scale."""
    R = quat_to_rotmat(rotations)
    k = normal_axis(log_scales)
    return np.take_along_axis(R, k[..., None, None].repeat(3, axis=-2), axis=-1)[..., 0]


def gaussian_normal(rotation, log_scale, cam: Camera) -> np.ndarray:
    """World-frame unit normal of one primitive, flipped to face ``cam``."""
    n = world_normals(np.asarray(rotation, dtype=np.float64), np.asarray(log_scale, dtype=np.float64))
    n = n / np.linalg.norm(n)
    if (cam.pose.R_wc.T @ n)[2] > 0:
        n = -n
    return n


def plane_distance(mu, n, cam: Camera) -> float:
    """Signed distance term d = (R_c^T (mu - T_c)) . (R_c^T n)."""
    mu_c = cam.pose.to_camera(mu)
    n_c = np.asarray(n, dtype=np.float64) @ cam.pose.R_wc
    return float(mu_c @ n_c)


def plane_depth(n, d: float, pixel, cam: Camera) -> float:
    """Depth where the ray through ``pixel`` meets the plane (world normal ``n``, distance ``d``)."""
    n_c = np.asarray(n, dtype=np.float64) @ cam.pose.R_wc
    ray = cam.K_inv @ np.array([pixel[0], pixel[1], 1.0])
    den = float(n_c @ ray)
    if abs(den) <= 1e-9:
        raise RayParallelToPlane("viewing ray is parallel to the plane")
    return d / den


# --- initialisation -----------------------------------------------------------

def _make_cloud(points, colors, scales) -> GaussianCloud:
    P = len(points)
    rot = np.zeros((P, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=points,
        rotations=rot,
        log_scales=np.repeat(np.log(scales)[:, None], 3, axis=1),
        opacity_logits=np.full(P, logit(DEFAULT_OPACITY)),
        colors=colors,
    )


def init_from_points(points, colors=None) -> GaussianCloud:
    """One isotropic Gaussian per point, sized by the mean distance to its 3 nearest neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyPointSet("need at least one point")
    if len(pts) == 1:
        scales = np.array([FALLBACK_SCALE])
    else:
        k = min(3, len(pts) - 1)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        scales = dist[:, 1:].reshape(len(pts), k).mean(axis=1)
        scales = np.where(scales > 0, scales, FALLBACK_SCALE)
    scales = np.clip(scales, MIN_SCALE, MAX_SCALE)
    if colors is None:
        colors = np.full((len(pts), 3), 0.5)
    return _make_cloud(pts, np.asarray(colors, dtype=np.float64).reshape(-1, 3), scales)


def init_random_sphere(count: int, radius: float, seed: int, center=(0.0, 0.0, 0.0)) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = np.asarray(center, dtype=np.float64) + radius * v
    return init_from_points(pts, rng.uniform(0.0, 1.0, (count, 3)))


def init_random_cube(count: int, half_extent: float, seed: int, center=(0.0, 0.0, 0.0)) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    pts = np.asarray(center, dtype=np.float64) + rng.uniform(-half_extent, half_extent, (count, 3))
    return init_from_points(pts, rng.uniform(0.0, 1.0, (count, 3)))
