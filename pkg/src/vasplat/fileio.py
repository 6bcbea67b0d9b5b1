"""Binary and image formats: PNG, float maps with JSON sidecars, PLY/OBJ, cloud checkpoints."""
from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from .errors import BadHeader, IoFailure
from .gaussians import GaussianCloud, n_sh_rest

CLOUD_MAGIC = b"VASPLAT.CLOUD.v1"
assert len(CLOUD_MAGIC) == 16


# --- images -------------------------------------------------------------------

def write_png(path, img: np.ndarray):
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]; RGB for color files, (H, W) for grayscale."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_float_map(path, data: np.ndarray, kind: str = "depth"):
    """Flat little-endian f32 data plus a ``<path>.json`` sidecar."""
    data = np.asarray(data)
    h, w = data.shape[:2]
    c = 1 if data.ndim == 2 else data.shape[2]
    data.astype("<f4").tofile(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"width": int(w), "height": int(h), "channels": int(c), "type": kind}, fh)


def read_float_map(path) -> np.ndarray:
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])
    except (OSError, KeyError, ValueError) as exc:
        raise BadHeader(f"bad sidecar for {path}: {exc}") from exc
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    if data.size != h * w * c:
        raise BadHeader(f"{path}: expected {h * w * c} floats, found {data.size}")
    return data.reshape(h, w) if c == 1 else data.reshape(h, w, c)


# --- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> dict[str, np.ndarray]:
    """Read vertices (x, y, z, optional colors/normals) and faces from ascii or binary PLY.

    Returns a dict with ``points`` and, when present, ``colors`` (floats in [0, 1]),
    ``normals`` and ``faces``.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with fh:
        if fh.readline().strip() != b"ply":
            raise BadHeader(f"{path} is not a PLY file")
        fmt = None
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise BadHeader("unterminated PLY header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
                else:
                    elements[-1][2].append((tok[2], tok[1]))
            elif tok[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
            raise BadHeader(f"unsupported PLY format {fmt}")
        endian = ">" if fmt == "binary_big_endian" else "<"
        data = {}
        if fmt == "ascii":
            rest = fh.read().decode("ascii").split()
            pos = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    row = {}
                    for prop in props:
                        if prop[1] == "list":
                            n = int(rest[pos]); pos += 1
                            row[prop[0]] = [float(v) for v in rest[pos:pos + n]]
                            pos += n
                        else:
                            row[prop[0]] = float(rest[pos]); pos += 1
                    rows.append(row)
                data[name] = rows
            verts = data.get("vertex", [])
            table = {k: np.array([r[k] for r in verts]) for k in (verts[0].keys() if verts else [])}
            faces = data.get("face", [])
            face_key = None
            if faces:
                face_key = next(iter(faces[0].keys()))
            tri = np.array([f[face_key] for f in faces], dtype=np.int64).reshape(-1, 3) if faces else None
        else:
            table, tri = {}, None
            for name, count, props in elements:
                if all(p[1] != "list" for p in props):
                    dt = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in props])
                    arr = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                    if name == "vertex":
                        table = {p[0]: arr[p[0]].astype(np.float64) for p in props}
                else:
                    faces = []
                    for _ in range(count):
                        for prop in props:
                            if prop[1] == "list":
                                ct = np.dtype(endian + _PLY_TYPES[prop[2]])
                                it = np.dtype(endian + _PLY_TYPES[prop[3]])
                                n = int(np.frombuffer(fh.read(ct.itemsize), dtype=ct)[0])
                                faces.append(np.frombuffer(fh.read(it.itemsize * n), dtype=it))
                            else:
                                st = np.dtype(endian + _PLY_TYPES[prop[1]])
                                fh.read(st.itemsize)
                    if name == "face":
                        tri = np.array(faces, dtype=np.int64).reshape(-1, 3) if faces else np.zeros((0, 3), np.int64)
    if not all(k in table for k in ("x", "y", "z")):
        raise BadHeader("PLY vertex element lacks x/y/z")
    out = {"points": np.stack([table["x"], table["y"], table["z"]], axis=1)}
    if all(k in table for k in ("red", "green", "blue")):
        out["colors"] = np.stack([table["red"], table["green"], table["blue"]], axis=1) / 255.0
    if all(k in table for k in ("nx", "ny", "nz")):
        out["normals"] = np.stack([table["nx"], table["ny"], table["nz"]], axis=1)
    if tri is not None:
        out["faces"] = tri
    return out


def write_ply(path, points, faces=None, colors=None, normals=None):
    """Binary little-endian PLY with float32 positions."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(pts), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = pts.T
    if normals is not None:
        nrm = np.asarray(normals).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = nrm.T
    if colors is not None:
        col = np.round(np.clip(np.asarray(colors).reshape(-1, 3), 0, 1) * 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = col.T
    ply_names = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    header += [f"property {ply_names[t]} {n}" for n, t in fields]
    tri = None
    if faces is not None:
        tri = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(tri)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(rec.tobytes())
            if tri is not None:
                frec = np.zeros(len(tri), dtype=np.dtype([("n", "u1"), ("i", "<i4", (3,))]))
                frec["n"] = 3
                frec["i"] = tri
                fh.write(frec.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_obj(path, points, faces):
    try:
        with open(path, "w") as fh:
            # shortest repr of each f32 value, which parses back to the same f32
            for p in np.asarray(points, dtype=np.float32).reshape(-1, 3):
                fh.write("v " + " ".join(np.format_float_positional(c, unique=True, trim="-") for c in p) + "\n")
            for f in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_obj(path) -> dict[str, np.ndarray]:
    pts, tris = [], []
    try:
        with open(path) as fh:
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "v":
                    pts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "f":
                    tris.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return {"points": np.array(pts, dtype=np.float64).reshape(-1, 3),
            "faces": np.array(tris, dtype=np.int64).reshape(-1, 3)}


# --- cloud checkpoints ---------------------------------------------------------

def save_cloud(path, cloud: GaussianCloud):
    """Layout: magic, u32 count, u32 sh degree, then every parameter as <f8 in field order."""
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<II", len(cloud), cloud.sh_degree))
        for name in GaussianCloud.PARAMS:
            fh.write(np.ascontiguousarray(getattr(cloud, name), dtype="<f8").tobytes())


def load_cloud(path) -> GaussianCloud:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:16] != CLOUD_MAGIC:
        raise BadHeader(f"{path}: bad checkpoint magic")
    P, deg = struct.unpack("<II", raw[16:24])
    sizes = {"positions": 3, "rotations": 4, "log_scales": 3, "opacity_logits": 1,
             "colors": 3, "sh_rest": 3 * n_sh_rest(deg)}
    expected = 24 + 8 * P * sum(sizes.values())
    if len(raw) != expected:
        raise BadHeader(f"{path}: truncated checkpoint ({len(raw)} of {expected} bytes)")
    off = 24
    fields = {}
    for name in GaussianCloud.PARAMS:
        n = P * sizes[name]
        fields[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
    return GaussianCloud(**fields, sh_degree=deg)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
