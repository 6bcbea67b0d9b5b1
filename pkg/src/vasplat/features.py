"""Dense per-view feature maps: a fixed hand-built descriptor and a loader for external maps."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import BadHeader, ChannelMismatch, IoFailure
from .imageproc import bilinear_gather, luminance

FEAT_MAGIC = b"VASPLAT.FEAT.v1"
N_BUILTIN = 10
VAR_FLOOR = 1e-8


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C)
    view_id: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _descriptor(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    gray = luminance(img)
    rgb = img if img.ndim == 3 and img.shape[2] == 3 else np.repeat(gray[..., None], 3, axis=2)
    chans = [gray]
    mags = []
    for sigma in (1.0, 2.0):
        dx = gaussian_filter(gray, sigma, order=(0, 1), mode="nearest")
        dy = gaussian_filter(gray, sigma, order=(1, 0), mode="nearest")
        chans += [dx, dy]
        mags.append(np.hypot(dx, dy))
    chans += mags
    for c in range(3):
        chans.append(uniform_filter(rgb[..., c], size=3, mode="nearest"))
    return np.stack(chans, axis=-1)


def standardize(feat: np.ndarray) -> np.ndarray:
    mean = feat.mean(axis=(0, 1))
    var = feat.var(axis=(0, 1))
    out = feat - mean
    ok = var >= VAR_FLOOR
    out[..., ok] /= np.sqrt(var[ok])
    out[..., ~ok] = 0.0
    return out


def builtin_features(img: np.ndarray, view_id: int = 0, standardized: bool = True) -> FeatureMap:
    """10-channel descriptor: luminance, Gaussian derivatives and their magnitudes at
    sigma 1 and 2, and 3x3 box-smoothed RGB. Channels are standardized per image.
    """
    feat = _descriptor(img)
    if standardized:
        feat = standardize(feat)
    return FeatureMap(feat, view_id)


def save_features(fmap: FeatureMap | np.ndarray, path) -> None:
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    H, W, C = data.shape
    try:
        with open(path, "wb") as f:
            f.write(FEAT_MAGIC)
            f.write(struct.pack("<III", H, W, C))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    except OSError as e:
        raise IoFailure(str(e)) from e


def _upsample(data: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = data.shape[:2]
    if (h, w) == (H, W):
        return data
    # align cell extents: output pixel centre x maps to (x + 0.5) * w / W - 0.5
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    X, Y = np.meshgrid(xs, ys)
    if h == 1 or w == 1:
        xi = np.round(X).astype(int)
        yi = np.round(Y).astype(int)
        return data[yi, xi]
    val, _, _, _, _ = bilinear_gather(data, X, Y)
    return val


def load_features(path, view_id: int = 0, image_size=None, expected_channels: int | None = None) -> FeatureMap:
    """Read a feature file; ``image_size`` = (H, W) triggers bilinear upsampling."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoFailure(str(e)) from e
    n = len(FEAT_MAGIC)
    if len(raw) < n + 12 or raw[:n] != FEAT_MAGIC:
        raise BadHeader(f"{path}: not a feature file")
    H, W, C = struct.unpack("<III", raw[n:n + 12])
    if H == 0 or W == 0 or C == 0:
        raise BadHeader(f"{path}: empty dimensions")
    body = raw[n + 12:]
    if len(body) != H * W * C * 4:
        raise BadHeader(f"{path}: expected {H * W * C * 4} data bytes, found {len(body)}")
    if expected_channels is not None and C != expected_channels:
        raise ChannelMismatch(f"{path}: {C} channels, expected {expected_channels}")
    data = np.frombuffer(body, dtype="<f4").reshape(H, W, C).astype(np.float64)
    if image_size is not None:
        data = _upsample(data, int(image_size[0]), int(image_size[1]))
    return FeatureMap(data, view_id)


def load_feature_set(paths, image_size=None) -> list[FeatureMap]:
    """Load one map per view, enforcing a common channel count."""
    out = []
    channels = None
    for vid, p in enumerate(paths):
        fm = load_features(p, vid, image_size, channels)
        channels = fm.channels
        out.append(fm)
    return out


def cosine_similarity(f1, f2) -> np.ndarray | float:
    """Cosine similarity along the last axis, denominator floored at 1e-8."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape[-1] != f2.shape[-1]:
        raise ChannelMismatch(f"{f1.shape[-1]} vs {f2.shape[-1]} channels")
    den = np.maximum(np.linalg.norm(f1, axis=-1) * np.linalg.norm(f2, axis=-1), 1e-8)
    c = np.sum(f1 * f2, axis=-1) / den
    return float(c) if np.ndim(c) == 0 else c
