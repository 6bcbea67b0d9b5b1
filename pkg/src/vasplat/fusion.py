"""TSDF fusion of depth maps and iso-surface extraction."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from .errors import BadHeader, EmptyVolume, IoFailure
from .fileio import read_obj, read_ply, write_obj, write_ply
from .geometry import Camera

TSDF_MAGIC = b"VASPLAT.TSDF.v1"


@dataclass
class TsdfVolume:
    origin: np.ndarray   # world position of voxel (0, 0, 0)
    voxel: float
    tsdf: np.ndarray     # (X, Y, Z), normalised by the truncation distance
    weight: np.ndarray   # (X, Y, Z)

    @classmethod
    def empty(cls, lo, hi, voxel: float) -> "TsdfVolume":
        if not voxel > 0:
            raise ValueError("voxel size must be > 0")
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - lo) / voxel).astype(np.int64) + 1, 2)
        return cls(lo, float(voxel), np.ones(tuple(dims)), np.zeros(tuple(dims)))

    @property
    def dims(self):
        return self.tsdf.shape

    def voxel_centers(self, x0: int = 0, x1: int | None = None) -> np.ndarray:
        X, Y, Z = self.dims
        x1 = X if x1 is None else x1
        i, j, k = np.meshgrid(np.arange(x0, x1), np.arange(Y), np.arange(Z), indexing="ij")
        return self.origin + self.voxel * np.stack([i, j, k], axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray          # (V, 3)
    faces: np.ndarray             # (F, 3) int
    normals: np.ndarray = None
    colors: np.ndarray = None

    def __len__(self):
        return len(self.faces)


def integrate_depth(volume: TsdfVolume, depth: np.ndarray, valid: np.ndarray, cam: Camera,
                    truncation: float, slab: int = 16) -> TsdfVolume:
    """Fold one depth map into the volume (in place) with unit weight per view."""
    if truncation < 2 * volume.voxel - 1e-12:
        raise ValueError("truncation must be at least twice the voxel size")
    H, W = depth.shape
    K = cam.K
    X = volume.dims[0]
    for x0 in range(0, X, slab):
        x1 = min(X, x0 + slab)
        pts = volume.voxel_centers(x0, x1)
        pc = cam.pose.to_camera(pts)
        z = pc[..., 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = np.round(K[0, 0] * pc[..., 0] / zs + K[0, 2]).astype(np.int64)
        v = np.round(K[1, 1] * pc[..., 1] / zs + K[1, 2]).astype(np.int64)
        inside = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        uu = np.where(inside, u, 0)
        vv = np.where(inside, v, 0)
        ok = inside & valid[vv, uu]
        sdf = depth[vv, uu] - z
        ok &= sdf >= -truncation
        t = np.clip(sdf / truncation, -1.0, 1.0)
        sl = volume.tsdf[x0:x1]
        wl = volume.weight[x0:x1]
        w_new = wl + 1.0
        sl[ok] = (sl[ok] * wl[ok] + t[ok]) / w_new[ok]
        wl[ok] = w_new[ok]
    return volume


def fusion_bounds(depths, valids, cams, scene_box=None, pad: float = 0.0):
    """Box around all valid back-projected depth samples, clipped to ``scene_box``."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for d, m, cam in zip(depths, valids, cams):
        if not m.any():
            continue
        pts = cam.pose.to_world(d[m][:, None] * cam.intrinsics.pixel_rays()[m])
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not np.all(np.isfinite(lo)):
        if scene_box is None:
            raise EmptyVolume("no valid depth samples and no scene box")
        return np.asarray(scene_box[0], float), np.asarray(scene_box[1], float)
    lo -= pad
    hi += pad
    if scene_box is not None:
        lo = np.maximum(lo, scene_box[0])
        hi = np.minimum(hi, scene_box[1])
    return lo, hi


def fuse_depths(depths, valids, cams, voxel: float | None = None, truncation: float | None = None,
                scene_box=None) -> TsdfVolume:
    """Integrate a set of depth maps; voxel defaults to extent / 256, truncation to 4 voxels."""
    lo, hi = fusion_bounds(depths, valids, cams, scene_box)
    if voxel is None:
        voxel = float(np.max(hi - lo)) / 256.0
    if truncation is None:
        truncation = 4.0 * voxel
    vol = TsdfVolume.empty(lo - truncation, hi + truncation, voxel)
    for d, m, cam in zip(depths, valids, cams):
        integrate_depth(vol, d, m, cam, truncation)
    return vol


def _observed_cells(weight: np.ndarray) -> np.ndarray:
    w = weight > 0
    c = w[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c &= w[dx:w.shape[0] - 1 + dx, dy:w.shape[1] - 1 + dy, dz:w.shape[2] - 1 + dz]
    return c


def marching_cubes(volume: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface over the cells whose eight corners all carry weight."""
    if int(np.count_nonzero(volume.weight > 0)) < 8:
        raise EmptyVolume("fewer than 8 observed voxels")
    cells = _observed_cells(volume.weight)
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not cells.any():
        return empty
    field = np.where(volume.weight > 0, volume.tsdf, 1.0)
    if not (field.min() <= iso <= field.max()) or field.min() == field.max():
        return empty
    try:
        verts, faces, normals, _ = _skimage_mc(field, level=iso, allow_degenerate=False)
    except (RuntimeError, ValueError):
        return empty
    # a triangle belongs to every cell whose closure contains it; keep it only if all are observed
    tri = verts[faces]
    lo = np.floor(tri.min(axis=1) + 1e-9).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) - 1e-9).astype(np.int64) - 1
    lim = np.array(cells.shape) - 1
    keep = np.ones(len(faces), dtype=bool)
    for ax in range(3):
        keep &= (hi[:, ax] >= 0) & (lo[:, ax] <= lim[ax])
    lo = np.clip(lo, 0, lim)
    hi = np.clip(hi, 0, lim)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                idx = np.stack([np.where(cx, hi[:, 0], lo[:, 0]), np.where(cy, hi[:, 1], lo[:, 1]),
                                np.where(cz, hi[:, 2], lo[:, 2])], axis=1)
                keep &= cells[idx[:, 0], idx[:, 1], idx[:, 2]]
    faces = faces[keep]
    world = volume.origin + volume.voxel * verts
    a = world[faces]
    area = 0.5 * np.linalg.norm(np.cross(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]), axis=1)
    faces = faces[area > 1e-12]
    used, inv = np.unique(faces.reshape(-1), return_inverse=True)
    return TriangleMesh(world[used], inv.reshape(-1, 3).astype(np.int64), normals[used])


def write_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("ply", "obj"):
        raise IoFailure(f"unknown mesh format {fmt!r}")
    if not path.parent.is_dir():
        raise IoFailure(f"directory {path.parent} does not exist")
    try:
        if fmt == "ply":
            write_ply(path, mesh.vertices, faces=mesh.faces, colors=mesh.colors)
        else:
            write_obj(path, mesh.vertices, mesh.faces)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    data = read_ply(path) if path.suffix.lower() == ".ply" else read_obj(path)
    faces = data.get("faces")
    return TriangleMesh(data["points"], faces if faces is not None else np.zeros((0, 3), dtype=np.int64),
                        colors=data.get("colors"))


def save_volume(volume: TsdfVolume, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(TSDF_MAGIC)
            fh.write(struct.pack("<4d3I", *volume.origin, volume.voxel, *volume.dims))
            fh.write(volume.tsdf.astype("<f4").tobytes())
            fh.write(volume.weight.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_volume(path) -> TsdfVolume:
    raw = Path(path).read_bytes()
    n = len(TSDF_MAGIC)
    hsize = struct.calcsize("<4d3I")
    if raw[:n] != TSDF_MAGIC or len(raw) < n + hsize:
        raise BadHeader(f"{path}: not a TSDF volume")
    *org, vox, X, Y, Z = struct.unpack("<4d3I", raw[n:n + hsize])
    count = X * Y * Z
    body = raw[n + hsize:]
    if len(body) != 8 * count:
        raise BadHeader(f"{path}: truncated volume data")
    tsdf = np.frombuffer(body[:4 * count], "<f4").reshape(X, Y, Z).astype(np.float64)
    weight = np.frombuffer(body[4 * count:], "<f4").reshape(X, Y, Z).astype(np.float64)
    return TsdfVolume(np.array(org), vox, tsdf, weight)
