"""Synthetic ray-traced datasets with analytic ground truth, and dataset directory IO."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadConfig, BadJson, MissingCameras, ResolutionMismatch
from .features import builtin_features, save_features
from .fileio import ensure_dir, read_float_map, read_png, read_ply, write_float_map, write_png, write_ply
from .geometry import Camera, look_at, make_camera
from .rasterizer import RenderSettings

KINDS = ("sphere", "cube", "tilted_plane", "two_spheres")
TEXTURES = ("checker", "value_noise")
LIGHT_DIR = np.array([0.45, -0.35, 0.82]) / np.linalg.norm([0.45, -0.35, 0.82])
AMBIENT = 0.3
# saturated blue: the objects are grey, so any stray splat against the background costs colour loss
BACKGROUND = (0.3, 0.5, 0.8)
HALF_FOV_DEG = 25.0
N_GT_POINTS = 100_000
N_INIT_POINTS = 500


# --- analytic surfaces -----------------------------------------------------------------

class Surface:
    """Closed-form surface: ray hits, normals, unsigned distance, area-uniform samples."""
    extent = 1.0

    def intersect(self, o, d):
        """Nearest positive hit distance per ray (inf on miss) and the unit normals there."""
        raise NotImplementedError

    def distance(self, x):
        raise NotImplementedError

    def sample(self, n, rng):
        raise NotImplementedError

    def bbox(self):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


def _sphere_hit(o, d, c, r):
    oc = o - c
    b = np.sum(oc * d, axis=-1)
    cc = np.sum(oc * oc, axis=-1) - r * r
    disc = b * b - cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t = np.where(ok, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    return t, (p - c) / r


def _sphere_sample(n, rng, c, r):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return c + r * v, v


class Sphere(Surface):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.extent = self.radius

    def intersect(self, o, d):
        return _sphere_hit(o, d, self.center, self.radius)

    def distance(self, x):
        return np.abs(np.linalg.norm(x - self.center, axis=-1) - self.radius)

    def sample(self, n, rng):
        return _sphere_sample(n, rng, self.center, self.radius)

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def describe(self):
        return {"kind": "sphere", "center": self.center.tolist(), "radius": self.radius}


class TwoSpheres(Surface):
    def __init__(self, centers=((-0.55, 0.0, 0.0), (0.55, 0.0, 0.0)), radius=0.45):
        self.spheres = [Sphere(c, radius) for c in centers]
        self.extent = 1.0

    def intersect(self, o, d):
        t0, n0 = self.spheres[0].intersect(o, d)
        t1, n1 = self.spheres[1].intersect(o, d)
        first = t0 <= t1
        return np.where(first, t0, t1), np.where(first[..., None], n0, n1)

    def distance(self, x):
        return np.minimum(self.spheres[0].distance(x), self.spheres[1].distance(x))

    def sample(self, n, rng):
        k = rng.random(n) < 0.5
        p0, n0 = self.spheres[0].sample(n, rng)
        p1, n1 = self.spheres[1].sample(n, rng)
        return np.where(k[:, None], p0, p1), np.where(k[:, None], n0, n1)

    def bbox(self):
        lo = np.minimum(*[s.bbox()[0] for s in self.spheres])
        hi = np.maximum(*[s.bbox()[1] for s in self.spheres])
        return lo, hi

    def describe(self):
        return {"kind": "two_spheres", "centers": [s.center.tolist() for s in self.spheres],
                "radius": self.spheres[0].radius}


class Cube(Surface):
    def __init__(self, half=0.7):
        self.half = float(half)
        self.extent = self.half * np.sqrt(3.0)

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half - o) * inv
            t2 = (self.half - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tn = np.max(np.nan_to_num(tmin, nan=-np.inf), axis=-1)
        tf = np.min(np.nan_to_num(tmax, nan=np.inf), axis=-1)
        hit = (tn <= tf) & (tf > 1e-9)
        t = np.where(hit, np.where(tn > 1e-9, tn, tf), np.inf)
        p = o + np.where(hit, t, 0.0)[..., None] * d
        ax = np.argmax(np.abs(p), axis=-1)
        n = np.zeros_like(p)
        np.put_along_axis(n, ax[..., None], np.sign(np.take_along_axis(p, ax[..., None], -1)), -1)
        return t, n

    def distance(self, x):
        q = np.abs(x) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return np.abs(outside + inside)

    def sample(self, n, rng):
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-self.half, self.half, (n, 2))
        ax = face // 2
        sgn = np.where(face % 2 == 0, -1.0, 1.0)
        p = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        for a in range(3):
            m = ax == a
            others = [i for i in range(3) if i != a]
            p[m, a] = sgn[m] * self.half
            p[m, others[0]] = uv[m, 0]
            p[m, others[1]] = uv[m, 1]
            nrm[m, a] = sgn[m]
        return p, nrm

    def bbox(self):
        return np.full(3, -self.half), np.full(3, self.half)

    def describe(self):
        return {"kind": "cube", "half": self.half}


class TiltedPlane(Surface):
    """Square plate of side 2 through the origin, tilted about the x axis."""

    def __init__(self, tilt_deg=30.0, half=1.0):
        a = np.radians(tilt_deg)
        self.tilt = float(tilt_deg)
        self.half = float(half)
        self.normal = np.array([0.0, -np.sin(a), np.cos(a)])
        self.u = np.array([1.0, 0.0, 0.0])
        self.v = np.cross(self.normal, self.u)
        self.extent = self.half * np.sqrt(2.0)

    def intersect(self, o, d):
        den = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -(o @ self.normal) / den
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        inside = (np.abs(p @ self.u) <= self.half) & (np.abs(p @ self.v) <= self.half)
        hit = np.isfinite(t) & (t > 1e-9) & inside
        t = np.where(hit, t, np.inf)
        n = np.where((den < 0)[..., None], self.normal, -self.normal)
        return t, np.broadcast_to(n, p.shape).copy()

    def distance(self, x):
        a = np.clip(x @ self.u, -self.half, self.half)
        b = np.clip(x @ self.v, -self.half, self.half)
        closest = a[..., None] * self.u + b[..., None] * self.v
        return np.linalg.norm(x - closest, axis=-1)

    def sample(self, n, rng):
        ab = rng.uniform(-self.half, self.half, (n, 2))
        return ab[:, :1] * self.u + ab[:, 1:] * self.v, np.tile(self.normal, (n, 1))

    def bbox(self):
        c = np.abs(self.u) * self.half + np.abs(self.v) * self.half
        return -c, c

    def describe(self):
        return {"kind": "tilted_plane", "tilt_deg": self.tilt, "half": self.half}


def make_surface(kind: str) -> Surface:
    if kind == "sphere":
        return Sphere()
    if kind == "cube":
        return Cube()
    if kind == "tilted_plane":
        return TiltedPlane()
    if kind == "two_spheres":
        return TwoSpheres()
    raise BadConfig(f"unknown scene kind {kind!r}; expected one of {KINDS}")


def surface_from_description(desc: dict) -> Surface:
    kind = desc.get("kind")
    if kind == "sphere":
        return Sphere(desc.get("center", (0, 0, 0)), desc.get("radius", 1.0))
    if kind == "two_spheres":
        return TwoSpheres(desc.get("centers"), desc.get("radius", 0.45))
    if kind == "cube":
        return Cube(desc.get("half", 0.7))
    if kind == "tilted_plane":
        return TiltedPlane(desc.get("tilt_deg", 30.0), desc.get("half", 1.0))
    raise BadJson(f"unknown surface kind {kind!r}")


# --- textures -----------------------------------------------------------------------------

class Texture:
    def __init__(self, kind: str, seed: int):
        if kind not in TEXTURES:
            raise BadConfig(f"unknown texture {kind!r}; expected one of {TEXTURES}")
        self.kind = kind
        rng = np.random.default_rng(seed + 7919)
        self.lattice = rng.uniform(0.05, 0.95, (32, 32, 32, 3))
        self.palette = np.array([[0.92, 0.85, 0.72], [0.16, 0.22, 0.38]])

    def _noise(self, p, freq):
        g = p * freq
        i0 = np.floor(g).astype(np.int64)
        f = g - i0
        f = f * f * (3 - 2 * f)
        out = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                         * (f[:, 2] if dz else 1 - f[:, 2]))
                    idx = (i0 + (dx, dy, dz)) % 32
                    out = out + w[:, None] * self.lattice[idx[:, 0], idx[:, 1], idx[:, 2]]
        return out

    def albedo(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "checker":
            cell = np.floor(p / 0.25).astype(np.int64).sum(axis=-1) & 1
            return self.palette[cell]
        c = 0.65 * self._noise(p, 4.0) + 0.35 * self._noise(p + 11.3, 9.0)
        return np.clip((c - 0.5) * 1.8 + 0.5, 0.02, 0.98)


def shade(albedo, normals):
    lam = np.maximum(normals @ LIGHT_DIR, 0.0)
    return np.clip(albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[..., None], 0.0, 1.0)


# --- cameras ------------------------------------------------------------------------------

def _camera_directions(kind: str, n: int, surface: Surface):
    """Unit directions (object -> camera) spread over the viewing region of the scene."""
    i = np.arange(n) + 0.5
    golden = np.pi * (3.0 - np.sqrt(5.0))
    if kind == "tilted_plane":
        # cone of 50 degrees around the front normal
        cos_t = 1.0 - (1.0 - np.cos(np.radians(50.0))) * i / n
        sin_t = np.sqrt(1 - cos_t ** 2)
        phi = golden * i
        nrm = surface.normal
        return (cos_t[:, None] * nrm + sin_t[:, None] * (np.cos(phi)[:, None] * surface.u
                                                           + np.sin(phi)[:, None] * surface.v))
    # band of elevations between -30 and +65 degrees around the world z axis
    z = np.sin(np.radians(-30.0)) + (np.sin(np.radians(65.0)) - np.sin(np.radians(-30.0))) * i / n
    r = np.sqrt(1 - z * z)
    phi = golden * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def make_cameras(kind: str, n_views: int, resolution: int, surface: Surface | None = None,
                 radius: float | None = None) -> list[Camera]:
    surface = surface or make_surface(kind)
    radius = 3.0 * surface.extent if radius is None else radius
    f = 0.5 * resolution / np.tan(np.radians(HALF_FOV_DEG))
    c = (resolution - 1) / 2.0
    cams = []
    for vid, dvec in enumerate(_camera_directions(kind, n_views, surface)):
        eye = radius * dvec
        up = (0.0, 0.0, 1.0) if abs(dvec[2]) < 0.95 else (0.0, 1.0, 0.0)
        pose = look_at(eye, np.zeros(3), up)
        cams.append(make_camera(f, f, c, c, resolution, resolution, pose.R_wc, pose.t_c, vid))
    return cams


def trace(surface: Surface, cam: Camera, offsets=((0.0, 0.0),)):
    """Ray-trace hit distance along the ray, camera z, world hit points and normals per sub-sample."""
    rays = cam.intrinsics.pixel_rays()
    out = []
    for ox, oy in offsets:
        r = rays + np.array([ox / cam.intrinsics.fx, oy / cam.intrinsics.fy, 0.0])
        d_world = r @ cam.pose.R_wc.T
        norm = np.linalg.norm(d_world, axis=-1, keepdims=True)
        d_unit = d_world / norm
        o = np.broadcast_to(cam.pose.t_c, d_unit.shape)
        t, n = surface.intersect(o, d_unit)
        hit = np.isfinite(t)
        z = np.where(hit, t / norm[..., 0], 0.0)
        p = o + np.where(hit, t, 0.0)[..., None] * d_unit
        out.append((hit, z, p, n))
    return out


def render_gt(surface: Surface, texture: Texture, cam: Camera, supersample: int = 2, background=BACKGROUND):
    """Shaded color (supersampled), camera-z depth and validity of the analytic scene."""
    s = supersample
    offs = [((i + 0.5) / s - 0.5, (j + 0.5) / s - 0.5) for j in range(s) for i in range(s)]
    color = np.zeros((cam.height, cam.width, 3))
    for hit, _, p, n in trace(surface, cam, offs):
        c = np.broadcast_to(np.asarray(background, dtype=np.float64), color.shape).copy()
        if hit.any():
            c[hit] = shade(texture.albedo(p[hit]), n[hit])
        color += c
    color /= len(offs)
    hit, z, _, _ = trace(surface, cam)[0]
    return color, z, hit


# --- dataset --------------------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    cameras: list
    image_paths: list
    depth_paths: list = field(default_factory=list)
    init_path: Path | None = None
    gt_points_path: Path | None = None
    feature_paths: list = field(default_factory=list)
    scene: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cameras)

    def image(self, i: int) -> np.ndarray:
        img = read_png(self.image_paths[i])
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        return img

    def gt_depth(self, i: int) -> np.ndarray | None:
        if not self.depth_paths:
            return None
        return read_float_map(self.depth_paths[i])

    def init_points(self):
        if self.init_path is None:
            return None
        return read_ply(self.init_path)

    def gt_points(self) -> np.ndarray | None:
        if self.gt_points_path is None:
            return None
        return read_ply(self.gt_points_path)["points"]

    @property
    def surface(self) -> Surface | None:
        desc = self.scene.get("surface")
        return surface_from_description(desc) if desc else None

    @property
    def background(self) -> tuple:
        """Colour behind the object in the images; black when the dataset does not say."""
        return tuple(float(c) for c in self.scene.get("background", (0.0, 0.0, 0.0)))

    def render_settings(self, settings: RenderSettings | None = None) -> RenderSettings:
        """``settings`` (or the defaults) with this dataset's background."""
        return replace(settings or RenderSettings(), background=self.background)

    @property
    def bbox(self):
        b = self.scene.get("bbox")
        return (np.asarray(b[0], dtype=np.float64), np.asarray(b[1], dtype=np.float64)) if b else None


def _camera_json(cam: Camera) -> dict:
    i = cam.intrinsics
    return {"id": cam.view_id, "width": i.width, "height": i.height, "fx": i.fx, "fy": i.fy,
            "cx": i.cx, "cy": i.cy, "R_wc": cam.pose.R_wc.reshape(-1).tolist(), "t_c": cam.pose.t_c.tolist()}


def generate_scene(kind: str = "sphere", texture: str = "checker", n_views: int = 16, resolution: int = 128,
                   seed: int = 0, out_dir=".", write_features: bool = False) -> Dataset:
    """Ray-trace a synthetic dataset of an analytic object into ``out_dir``."""
    if kind not in KINDS:
        raise BadConfig(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    if texture not in TEXTURES:
        raise BadConfig(f"unknown texture {texture!r}; expected one of {TEXTURES}")
    if n_views < 4:
        raise BadConfig(f"need at least 4 views, got {n_views}")
    if resolution < 32:
        raise BadConfig(f"resolution must be >= 32, got {resolution}")
    out = Path(out_dir)
    ensure_dir(out / "images")
    ensure_dir(out / "depth_gt")
    surface = make_surface(kind)
    tex = Texture(texture, seed)
    cams = make_cameras(kind, n_views, resolution, surface)
    rng = np.random.default_rng(seed)

    lo, hi = surface.bbox()
    pad = 0.1 * surface.extent
    meta = {"views": [_camera_json(c) for c in cams],
            "scene": {"kind": kind, "texture": texture, "seed": seed, "surface": surface.describe(),
                      "background": list(BACKGROUND),
                      "bbox": [(lo - pad).tolist(), (hi + pad).tolist()]}}
    with open(out / "cameras.json", "w") as fh:
        json.dump(meta, fh, indent=1)

    image_paths, depth_paths, feat_paths = [], [], []
    for cam in cams:
        color, z, _ = render_gt(surface, tex, cam)
        ip = out / "images" / f"{cam.view_id:04d}.png"
        dp = out / "depth_gt" / f"{cam.view_id:04d}.f32bin"
        write_png(ip, color)
        write_float_map(dp, z, "depth")
        image_paths.append(ip)
        depth_paths.append(dp)
        if write_features:
            ensure_dir(out / "features")
            fp = out / "features" / f"{cam.view_id:04d}.feat"
            save_features(builtin_features(read_png(ip), cam.view_id), fp)
            feat_paths.append(fp)

    pts, nrm = surface.sample(N_GT_POINTS, rng)
    write_ply(out / "gt_points.ply", pts, normals=nrm)
    ipts, inrm = surface.sample(N_INIT_POINTS, rng)
    write_ply(out / "init.ply", ipts, colors=shade(tex.albedo(ipts), inrm))
    return Dataset(out, cams, image_paths, depth_paths, out / "init.ply", out / "gt_points.ply", feat_paths,
                   meta["scene"])


def _parse_camera(v: dict) -> Camera:
    try:
        R = np.asarray(v["R_wc"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(v["t_c"], dtype=np.float64).reshape(3)
        return make_camera(float(v["fx"]), float(v["fy"]), float(v["cx"]), float(v["cy"]),
                           int(v["width"]), int(v["height"]), R, t, int(v["id"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise BadJson(f"bad camera entry: {exc}") from exc


def load_dataset(path) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise MissingCameras(f"{cam_file} not found")
    try:
        with open(cam_file) as fh:
            meta = json.load(fh)
        views = meta["views"]
    except (ValueError, KeyError, TypeError) as exc:
        raise BadJson(f"{cam_file}: {exc}") from exc
    if not isinstance(views, list) or not views:
        raise BadJson(f"{cam_file}: 'views' must be a non-empty list")
    cams = sorted((_parse_camera(v) for v in views), key=lambda c: c.view_id)
    if [c.view_id for c in cams] != list(range(len(cams))):
        raise BadJson(f"{cam_file}: view ids must be contiguous from 0")
    image_paths = []
    for c in cams:
        ip = root / "images" / f"{c.view_id:04d}.png"
        if not ip.is_file():
            raise MissingCameras(f"image for view {c.view_id} missing: {ip}")
        with Image.open(ip) as im:
            w, h = im.size
        if (w, h) != (c.width, c.height):
            raise ResolutionMismatch(f"{ip}: {w}x{h}, camera declares {c.width}x{c.height}")
        image_paths.append(ip)
    depth_paths = [root / "depth_gt" / f"{c.view_id:04d}.f32bin" for c in cams]
    if not all(p.is_file() for p in depth_paths):
        depth_paths = []
    feat_paths = [root / "features" / f"{c.view_id:04d}.feat" for c in cams]
    if not all(p.is_file() for p in feat_paths):
        feat_paths = []
    init = root / "init.ply"
    gtp = root / "gt_points.ply"
    scene = meta.get("scene") if isinstance(meta.get("scene"), dict) else {}
    return Dataset(root, cams, image_paths, depth_paths, init if init.is_file() else None,
                   gtp if gtp.is_file() else None, feat_paths, scene)
