"""Pinhole cameras, relative poses and plane-induced homographies.

Conventions used throughout the package:

* camera frame is right-handed with +x right, +y down, +z forward;
* pixel ``(u, v)`` is the centre of image cell ``(u, v)`` (origin at the
  centre of the top-left cell);
* a plane ``(n, d)`` is the set of points ``x`` with ``n . x = d``;
* ``R_wc`` rotates camera-frame vectors into the world frame and ``t_c``
  is the camera centre in world coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePlane, InvalidCamera, NonPositiveDepth, PointAtInfinity

DEPTH_EPS = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCamera(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCamera("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidCamera("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """Un-normalised rays ``K^-1 [u, v, 1]`` for every pixel, shape (H, W, 3)."""
        u = (np.arange(self.width, dtype=np.float64) - self.cx) / self.fx
        v = (np.arange(self.height, dtype=np.float64) - self.cy) / self.fy
        rays = np.ones((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        return rays


@dataclass(frozen=True)
class CameraPose:
    R_wc: np.ndarray
    t_c: np.ndarray

    def __post_init__(self):
        R = np.array(self.R_wc, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t_c, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InvalidCamera("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidCamera("R_wc must be a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R_wc", R)
        object.__setattr__(self, "t_c", t)

    @property
    def R_cw(self) -> np.ndarray:
        """World-to-camera rotation."""
        return self.R_wc.T

    @property
    def extrinsic(self) -> np.ndarray:
        """4x4 matrix mapping homogeneous world points to the camera frame."""
        M = np.eye(4)
        M[:3, :3] = self.R_wc.T
        M[:3, 3] = -self.R_wc.T @ self.t_c
        return M

    @property
    def extrinsic_inv(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R_wc
        M[:3, 3] = self.t_c
        return M

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        # row-vector form of R_wc^T (x - t_c)
        return (np.asarray(x, dtype=np.float64) - self.t_c) @ self.R_wc

    def to_world(self, x_cam: np.ndarray) -> np.ndarray:
        return np.asarray(x_cam, dtype=np.float64) @ self.R_wc.T + self.t_c


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    view_id: int = 0

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    @property
    def K_inv(self) -> np.ndarray:
        return self.intrinsics.K_inv

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def center(self) -> np.ndarray:
        return self.pose.t_c

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (+z of the camera) in world coordinates."""
        return self.pose.R_wc[:, 2]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose of a camera at ``eye`` looking at ``target`` (+y of the image points 'down')."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    # re-orthonormalise to machine precision
    u, _, vt = np.linalg.svd(R)
    return CameraPose(u @ vt, eye)


def make_camera(fx, fy, cx, cy, width, height, R_wc=None, t_c=None, view_id=0) -> Camera:
    R_wc = np.eye(3) if R_wc is None else R_wc
    t_c = np.zeros(3) if t_c is None else t_c
    return Camera(CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(width), int(height)),
                  CameraPose(R_wc, t_c), int(view_id))


def project(point_world, cam: Camera) -> tuple[np.ndarray, float]:
    """Pixel coordinates and camera-frame depth of a world point."""
    xc = cam.pose.to_camera(point_world)
    if xc[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"camera-frame depth {xc[2]:g} is not positive")
    k = cam.intrinsics
    pix = np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
    return pix, float(xc[2])


def project_points(points_world: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; no depth check (callers mask on the returned depth)."""
    xc = cam.pose.to_camera(points_world)
    return project_camera_points(xc, cam.intrinsics), xc[..., 2]


def project_camera_points(xc: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * xc[..., 0] / z + intr.cx
        v = intr.fy * xc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(pixel, depth: float, cam: Camera) -> np.ndarray:
    """Camera-frame point at ``depth`` along the ray through ``pixel``."""
    if depth <= DEPTH_EPS:
        raise NonPositiveDepth(f"depth {depth:g} is not positive")
    k = cam.intrinsics
    u, v = pixel
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def relative_pose(ref: Camera, src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation taking ref-camera-frame points to the src camera frame."""
    R_rs = src.pose.R_wc.T @ ref.pose.R_wc
    T_rs = src.pose.R_wc.T @ (ref.pose.t_c - src.pose.t_c)
    return R_rs, T_rs


def homography(ref: Camera, src: Camera, n_r, d_r: float) -> np.ndarray:
    """Homography induced by the ref-frame plane ``n_r . x = d_r``.

    Maps homogeneous reference pixels to homogeneous source pixels.
    """
    n_r = np.asarray(n_r, dtype=np.float64)
    if abs(d_r) <= DEPTH_EPS:
        raise DegeneratePlane(f"plane distance {d_r:g} too close to zero")
    if abs(np.linalg.norm(n_r) - 1.0) > 1e-6:
        raise DegeneratePlane("plane normal must be unit length")
    R_rs, T_rs = relative_pose(ref, src)
    return src.K @ (R_rs + np.outer(T_rs, n_r) / d_r) @ ref.K_inv


def warp_pixel(H: np.ndarray, p) -> np.ndarray:
    h = np.asarray(H, dtype=np.float64) @ np.array([p[0], p[1], 1.0])
    if abs(h[2]) <= 1e-12:
        raise PointAtInfinity("warped point lies at infinity")
    return h[:2] / h[2]


def ray_plane_intersection(origin, direction, n, d) -> float:
    """Parameter ``s`` with ``n . (origin + s * direction) = d``."""
    den = float(np.dot(n, direction))
    if abs(den) <= DEPTH_EPS:
        raise DegeneratePlane("ray parallel to plane")
    return (d - float(np.dot(n, origin))) / den
