"""Surface and image quality metrics."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySet, ShapeMismatch
from .imageproc import ssim

PSNR_CAP = 99.0


def _points(x, name):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise EmptySet(f"{name} point set is empty")
    return x


def _pair_dist(a, b):
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def nn_distances(query, ref, k: int = 4) -> np.ndarray:
    """Distance from every query point to its nearest reference point.

    A k-d tree proposes the ``k`` closest candidates; the reported distance is
    recomputed with the same formula as :func:`nn_distances_brute`, so both
    agree exactly.
    """
    query = _points(query, "query")
    ref = _points(ref, "reference")
    k = min(k, len(ref))
    _, idx = cKDTree(ref).query(query, k=k)
    idx = idx.reshape(len(query), k)
    return np.min(_pair_dist(query[:, None, :], ref[idx]), axis=1)


def nn_distances_brute(query, ref, chunk: int = 256) -> np.ndarray:
    query = _points(query, "query")
    ref = _points(ref, "reference")
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        out[s:s + chunk] = np.min(_pair_dist(query[s:s + chunk, None, :], ref[None, :, :]), axis=1)
    return out


def chamfer(pred, gt, truncate: float | None = None):
    """(accuracy, completeness, chamfer): mean NN distances each way and their average.

    ``truncate`` clips individual distances, as in the DTU protocol.
    """
    acc_d = nn_distances(pred, gt)
    comp_d = nn_distances(gt, pred)
    if truncate is not None:
        acc_d = np.minimum(acc_d, truncate)
        comp_d = np.minimum(comp_d, truncate)
    acc = float(acc_d.mean())
    comp = float(comp_d.mean())
    return acc, comp, 0.5 * (acc + comp)


def precision_recall_f1(pred, gt, threshold: float):
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    p = float(np.mean(nn_distances(pred, gt) < threshold))
    r = float(np.mean(nn_distances(gt, pred) < threshold))
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim_score(a, b) -> float:
    return ssim(a, b)[0]


def sample_mesh(vertices, faces, n: int | None = None, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples; default count min(100000, 10 x triangles)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) == 0:
        raise EmptySet("mesh has no triangles")
    if n is None:
        n = min(100_000, 10 * len(f))
    tri = v[f]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if not area.sum() > 0:
        raise EmptySet("mesh has zero area")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(f), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = tri[pick]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2])
