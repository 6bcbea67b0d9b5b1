"""Optimization loop: Adam, the phased loss schedule, source-view selection, densify/prune."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, NonFiniteGradient, ShapeMismatch, TooFewViews, TrainingAborted
from .features import builtin_features, load_feature_set
from .fileio import ensure_dir, save_cloud
from .gaussians import GaussianCloud, init_from_points, quat_to_rotmat
from .geometry import Camera
from .losses import TERMS, LossWeights, SourceData, ViewData, view_objective
from .rasterizer import RenderSettings, render

log = logging.getLogger(__name__)

PRESETS = {
    "full": (),
    "only_LI": ("edge", "L_nc", "L_ns", "L_p", "L_f"),
    "no_nc": ("L_nc",),
    "no_ns": ("L_ns",),
    "no_p": ("L_p",),
    "no_f": ("L_f",),
}

LOG_COLUMNS = ("step", "L_I", "L_nc", "L_ns", "L_p", "L_f", "total", "P")


@dataclass
class TrainConfig:
    iterations: int = 2000
    color_only_end: int = 700
    single_view_end: int = 700
    photometric_end: int = 1500
    feature_end: int = 2000
    lr_position: float = 1.6e-4
    lr_position_final_ratio: float = 0.01
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    densify_from: int = 100
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 6000
    seed: int = 0
    disable: tuple = ()
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        self.disable = tuple(self.disable)
        b = (self.color_only_end, self.single_view_end, self.photometric_end, self.feature_end)
        if any(x < 0 for x in b) or list(b) != sorted(b) or b[-1] > self.iterations:
            raise BadConfig(f"phase boundaries must be non-decreasing and <= iterations, got {b}")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if not getattr(self, name) > 0:
                raise BadConfig(f"{name} must be > 0")
        unknown = set(self.disable) - {"edge", *TERMS}
        if unknown:
            raise BadConfig(f"unknown loss terms to disable: {sorted(unknown)}")

    @classmethod
    def scaled(cls, iterations: int, **kw) -> "TrainConfig":
        """Default schedule with phase boundaries scaled to ``iterations``."""
        f = iterations / 2000.0
        base = dict(iterations=iterations, color_only_end=int(round(700 * f)),
                    single_view_end=int(round(700 * f)), photometric_end=int(round(1500 * f)),
                    feature_end=iterations)
        base.update(kw)
        return cls(**base)

    def active_terms(self, step: int) -> frozenset:
        """Loss terms enabled at ``step`` (0-based)."""
        on = {"L_I"}
        if step >= self.color_only_end:
            on |= {"edge", "L_nc", "L_ns"}
        if step >= self.single_view_end:
            on.add("L_p")
        if step >= self.photometric_end:
            on.add("L_f")
        return frozenset(on - set(self.disable))

    def lr(self, step: int, extent: float = 1.0) -> dict:
        frac = min(max(step / max(self.iterations - 1, 1), 0.0), 1.0)
        pos = self.lr_position * extent * self.lr_position_final_ratio ** frac
        return {"positions": pos, "rotations": self.lr_rotation, "log_scales": self.lr_scale,
                "opacity_logits": self.lr_opacity, "colors": self.lr_color, "sh_rest": self.lr_color / 20.0}


_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_RENDER_KEYS = {f.name for f in dataclasses.fields(RenderSettings)}


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) if default and isinstance(default[0], float) else v.strip()
                     for v in value.split(",") if v.strip())
    return value


def parse_config(text: str, base: TrainConfig | None = None, overrides: dict | None = None) -> TrainConfig:
    """Apply flat ``key = value`` lines (``#`` comments) and then ``overrides`` to ``base``.

    Loss weights and render settings are addressed by their own field names.
    """
    base = base or TrainConfig()
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    wts = dataclasses.asdict(base.weights)
    rnd = dict(base.render.__dict__)
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        items.append((k, v))
    items += [(k, v if isinstance(v, str) else v) for k, v in (overrides or {}).items()]
    for k, v in items:
        try:
            if k in ("weights", "render"):
                raise KeyError(k)
            if k in top:
                top[k] = v if not isinstance(v, str) else _coerce(v, top[k])
            elif k in _WEIGHT_KEYS:
                wts[k] = v if not isinstance(v, str) else _coerce(v, wts[k])
            elif k in _RENDER_KEYS:
                rnd[k] = v if not isinstance(v, str) else _coerce(v, rnd[k])
            else:
                raise KeyError(k)
        except KeyError:
            raise BadConfig(f"unknown config key {k!r}") from None
        except ValueError:
            raise BadConfig(f"bad value for {k!r}: {v!r}") from None
    top["weights"] = LossWeights(**wts)
    top["render"] = RenderSettings(**rnd)
    return TrainConfig(**top)


# --- optimizer ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15

    def remap(self, keep: np.ndarray, n_new: int):
        """Keep moment rows ``keep`` and append ``n_new`` zero rows."""
        for d in (self.m, self.v):
            for k, a in d.items():
                d[k] = np.concatenate([a[keep], np.zeros((n_new,) + a.shape[1:])])


def adam_step(cloud: GaussianCloud, grads: dict, state: AdamState, lr) -> GaussianCloud:
    """One bias-corrected Adam update of every parameter group; returns the new cloud.

    ``lr`` is a float or a per-group dict. Quaternions are renormalised afterwards.
    """
    params = cloud.params()
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    out = cloud.copy()
    for k, p in params.items():
        g = grads.get(k)
        if g is None or p.size == 0:
            continue
        m = state.m.get(k)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        rate = lr[k] if isinstance(lr, dict) else lr
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        getattr(out, k)[...] = p - rate * mhat / (np.sqrt(vhat) + state.eps)
    out.normalize()
    return out


# --- views --------------------------------------------------------------------------------

def select_source_views(ref_id: int, cameras, n: int) -> list[int]:
    """The n other cameras with the lowest centre distance + 0.5 (1 - cos axis angle)."""
    cams = {c.view_id: c for c in cameras}
    if len(cams) - 1 < n:
        raise TooFewViews(f"need {n} source views, dataset has {len(cams)} views")
    ref = cams[ref_id]
    scored = []
    for vid, c in cams.items():
        if vid == ref_id:
            continue
        s = np.linalg.norm(c.center - ref.center) + 0.5 * (1.0 - float(c.optical_axis @ ref.optical_axis))
        # rounding makes geometrically equal scores tie exactly
        scored.append((round(s, 9), vid))
    scored.sort()
    return [vid for _, vid in scored[:n]]


def scene_extent(cameras) -> float:
    """1.1 x the largest camera-centre distance from the mean centre."""
    c = np.array([cam.center for cam in cameras])
    return 1.1 * float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1)))


# --- densification ----------------------------------------------------------------------------

@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, P):
        return cls(np.zeros(P), np.zeros(P))

    def add(self, mean2d_grad: np.ndarray, visible: np.ndarray, cam: Camera):
        # screen gradient in normalised device coordinates
        g = mean2d_grad * np.array([0.5 * cam.width, 0.5 * cam.height])
        self.grad_accum[visible] += np.linalg.norm(g[visible], axis=1)
        self.count[visible] += 1


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, config: TrainConfig, extent: float,
                      rng: np.random.Generator, state: AdamState | None = None) -> GaussianCloud:
    """Clone small / split large primitives with high screen gradients, drop transparent ones."""
    P = len(cloud)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    hot = avg > config.densify_grad_threshold
    big = cloud.scales.max(axis=1) > config.percent_dense * extent
    room = max(config.max_gaussians - P, 0)
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)
    if len(clone_idx) + len(split_idx) > room:
        # both clone and split add one primitive net; keep the strongest that fit under the cap
        cand = np.concatenate([clone_idx, split_idx])
        keep = np.sort(cand[np.lexsort((cand, -avg[cand]))][:room])
        clone_idx = keep[~big[keep]]
        split_idx = keep[big[keep]]

    new_parts = []
    if len(clone_idx):
        c = cloud.select(clone_idx)
        R = quat_to_rotmat(c.rotations)
        eps = rng.standard_normal((len(c), 3)) * c.scales * 0.5
        c.positions = c.positions + np.einsum("nij,nj->ni", R, eps)
        new_parts.append(c)
    if len(split_idx):
        kids = []
        for _ in range(2):
            c = cloud.select(split_idx)
            R = quat_to_rotmat(c.rotations)
            eps = rng.standard_normal((len(c), 3)) * c.scales
            c.positions = c.positions + np.einsum("nij,nj->ni", R, eps)
            c.log_scales = c.log_scales - np.log(1.6)
            kids.append(c)
        new_parts.append(GaussianCloud.concat(*kids))

    survivors = np.ones(P, dtype=bool)
    survivors[split_idx] = False
    survivors &= cloud.opacities >= config.prune_opacity
    keep_idx = np.flatnonzero(survivors)
    out = cloud.select(keep_idx)
    n_new = 0
    for part in new_parts:
        alive = part.opacities >= config.prune_opacity
        part = part.select(np.flatnonzero(alive))
        n_new += len(part)
        out = GaussianCloud.concat(out, part)
    if state is not None:
        state.remap(keep_idx, n_new)
    return out


# --- training loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list          # rows of LOG_COLUMNS
    config: TrainConfig


def initial_cloud(dataset, seed: int = 0) -> GaussianCloud:
    init = dataset.init_points()
    if init is not None and len(init["points"]):
        return init_from_points(init["points"], init.get("colors"))
    # no point cloud: random points inside the scene box
    rng = np.random.default_rng(seed)
    lo, hi = dataset.bbox if dataset.bbox is not None else (np.full(3, -1.0), np.full(3, 1.0))
    return init_from_points(rng.uniform(lo, hi, (500, 3)), rng.uniform(0, 1, (500, 3)))


def prepare_views(dataset) -> list[ViewData]:
    views = []
    feats = None
    if dataset.feature_paths:
        cam0 = dataset.cameras[0]
        feats = load_feature_set(dataset.feature_paths, (cam0.height, cam0.width))
    for i, cam in enumerate(dataset.cameras):
        img = dataset.image(i)
        f = feats[i].data if feats is not None else builtin_features(img, cam.view_id).data
        views.append(ViewData(cam, img, features=f))
    return views


def _format_row(row) -> list[str]:
    return [str(row[0])] + [repr(float(x)) for x in row[1:-1]] + [str(row[-1])]


def train(dataset, config: TrainConfig, out_dir=None, cloud: GaussianCloud | None = None,
          views: list | None = None, progress=None) -> TrainResult:
    """Optimise a cloud on the dataset. With ``out_dir``, writes ``train_log.csv`` and checkpoints."""
    cams = dataset.cameras
    W = config.weights
    needs_mv = any(config.active_terms(s) & {"L_p", "L_f"} for s in
                   (config.single_view_end, config.photometric_end, max(config.iterations - 1, 0)))
    if needs_mv and config.iterations > config.single_view_end and len(cams) < W.n_sources + 1:
        raise TooFewViews(f"need at least {W.n_sources + 1} views, dataset has {len(cams)}")
    views = views or prepare_views(dataset)
    cloud = (cloud or initial_cloud(dataset, config.seed)).copy()
    extent = scene_extent(cams)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    stats = DensifyStats.zeros(len(cloud))
    sources = {c.view_id: select_source_views(c.view_id, cams, W.n_sources) for c in cams} \
        if len(cams) > W.n_sources else {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        ensure_dir(out)
    rows = []
    order = []
    settings = dataset.render_settings(config.render)
    for step in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(cams)))
        vi = int(order.pop(0))
        ref = views[vi]
        active = config.active_terms(step)
        buf = render(cloud, ref.cam, settings)
        srcs = []
        if active & {"L_p", "L_f"}:
            for sid in sources[ref.cam.view_id]:
                sb = render(cloud, views[sid].cam, settings, records=False)
                srcs.append(SourceData(views[sid], sb.depth, sb.depth_valid))
        rep = view_objective(buf, ref, srcs, W, active)
        row = [step] + [rep.terms[t] for t in TERMS] + [rep.total, len(cloud)]
        rows.append(row)
        if not np.isfinite(rep.total):
            if out is not None:
                save_cloud(out / "diagnostic.cloud", cloud)
            raise TrainingAborted(f"non-finite loss at step {step}: {rep.terms}")
        try:
            cloud = adam_step(cloud, rep.grads, state, config.lr(step, extent))
        except NonFiniteGradient:
            if out is not None:
                save_cloud(out / "diagnostic.cloud", cloud)
            log.error("non-finite gradient at step %d", step)
            raise
        proj = buf._ctx["proj"]
        stats.add(rep.grads["mean2d"], proj.index, ref.cam)
        it = step + 1
        if (config.densify_from <= it < min(config.photometric_end, config.iterations)
                and it % config.densify_interval == 0):
            cloud = densify_and_prune(cloud, stats, config, extent, rng, state)
            stats = DensifyStats.zeros(len(cloud))
        if out is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_cloud(out / f"step_{it:06d}.cloud", cloud)
        if progress is not None:
            progress(step, rep)
        log.debug("step %d view %d P=%d total=%.6g", step, vi, len(cloud), rep.total)
    if out is not None:
        save_cloud(out / "final.cloud", cloud)
        write_log(out / "train_log.csv", rows)
    return TrainResult(cloud, rows, config)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow(_format_row(r))
