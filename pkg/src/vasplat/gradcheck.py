"""Finite-difference verification of the analytic gradients on small random scenes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import builtin_features
from .gaussians import GaussianCloud, logit, n_sh_rest
from .geometry import look_at, make_camera
from .losses import Branches, LossWeights, SourceData, ViewData, view_objective
from .rasterizer import RenderSettings, render, render_backward

LOSS_CASES = {
    "L_I": {"L_I"},
    "L_I+edge": {"L_I", "edge"},
    "L_nc": {"L_nc"},
    "L_ns": {"L_ns"},
    "L_p": {"L_p"},
    "L_f": {"L_f"},
}


def rel_error(a, f):
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(1e-6, np.abs(a) + np.abs(f))


@dataclass
class GradScene:
    cloud: GaussianCloud
    ref: ViewData
    sources: list
    settings: RenderSettings


def random_scene(seed: int, n_gaussians: int | None = None, res: int = 32, sh_degree: int | None = None) -> GradScene:
    """A few flattened Gaussians near the z = 0 plane seen by one reference and three source cameras."""
    rng = np.random.default_rng(seed)
    P = int(rng.integers(6, 13)) if n_gaussians is None else n_gaussians
    deg = (0, 0, 0, 1, 2)[seed % 5] if sh_degree is None else sh_degree
    pos = np.c_[rng.uniform(-0.6, 0.6, (P, 2)), rng.normal(0, 0.05, P)]
    q = np.c_[np.ones(P), rng.normal(0, 0.2, (P, 3))]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = np.log(np.c_[rng.uniform(0.15, 0.35, (P, 2)), rng.uniform(0.01, 0.04, P)])
    cloud = GaussianCloud(pos, q, ls, logit(rng.uniform(0.5, 0.95, P)), rng.uniform(0.1, 0.9, (P, 3)),
                          rng.normal(0, 0.05, (P, n_sh_rest(deg), 3)), deg)
    f = 1.15 * res
    c = (res - 1) / 2.0

    def cam(eye, vid):
        pose = look_at(np.asarray(eye, dtype=np.float64), np.zeros(3), up=(0.0, 1.0, 0.0))
        return make_camera(f, f, c, c, res, res, pose.R_wc, pose.t_c, vid)
    jitter = rng.normal(0, 0.05, (4, 3))
    eyes = np.array([(0, 0, 3), (0.35, 0, 2.9), (0, 0.35, 2.9), (-0.3, -0.25, 2.9)]) + jitter
    cams = [cam(e, i) for i, e in enumerate(eyes)]
    settings = RenderSettings(tile_size=8).smooth()

    def view(cm):
        img = render(cloud, cm, settings, records=False).color
        img = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
        return ViewData(cm, img, features=builtin_features(img).data)
    views = [view(cm) for cm in cams]
    srcs = []
    for v in views[1:]:
        b = render(cloud, v.cam, settings, records=False)
        srcs.append(SourceData(v, b.depth, b.depth_valid))
    return GradScene(cloud, views[0], srcs, settings)


def _fd_compare(cloud, analytic, fn, h):
    worst = 0.0
    where = None
    for name, p in cloud.params().items():
        for i in range(p.size):
            c1 = cloud.copy()
            getattr(c1, name).flat[i] += h
            c2 = cloud.copy()
            getattr(c2, name).flat[i] -= h
            fd = (fn(c1) - fn(c2)) / (2 * h)
            e = float(rel_error(analytic[name].flat[i], fd))
            if e > worst:
                worst, where = e, (name, i, float(analytic[name].flat[i]), fd)
    return worst, where


def check_render(scene: GradScene, h: float = 1e-5):
    """Max relative error of d(sum of every output map)/d(params)."""
    cam = scene.ref.cam
    buf = render(scene.cloud, cam, scene.settings)
    mask = buf.plane_valid.copy()
    H, W = cam.height, cam.width
    ones = np.ones((H, W))
    grads = render_backward(buf, {"color": np.ones((H, W, 3)), "accumulated_alpha": ones,
                                  "blended_normal": np.ones((H, W, 3)), "blended_distance": ones,
                                  "blended_gaussian_depth": ones, "plane_depth": ones, "depth_mask": mask})
    rays = cam.intrinsics.pixel_rays()

    def total(cloud):
        b = render(cloud, cam, scene.settings, records=False)
        den = np.where(mask, np.sum(b.blended_normal * rays, axis=-1), 1.0)
        pd = np.where(mask, b.blended_distance / den, 0.0)
        return (b.color.sum() + b.accumulated_alpha.sum() + b.blended_normal.sum() + b.blended_distance.sum()
                + b.blended_gaussian_depth.sum() + pd.sum())
    return _fd_compare(scene.cloud, grads, total, h)


def check_loss(scene: GradScene, terms, weights: LossWeights | None = None, h: float = 1e-5):
    """Max relative error of one objective's parameter gradient, discrete branches frozen."""
    weights = weights or LossWeights()
    br = Branches()
    buf = render(scene.cloud, scene.ref.cam, scene.settings)
    rep = view_objective(buf, scene.ref, scene.sources, weights, terms, br)

    def total(cloud):
        b = render(cloud, scene.ref.cam, scene.settings, records=False)
        return view_objective(b, scene.ref, scene.sources, weights, terms, br, backward=False).total
    return _fd_compare(scene.cloud, rep.grads, total, h)


def run_suite(n_scenes: int = 50, seed: int = 0, cases=None, progress=None) -> dict:
    """Worst relative error per check over ``n_scenes`` seeded scenes."""
    cases = cases or ["render", *LOSS_CASES]
    worst = {c: 0.0 for c in cases}
    for k in range(n_scenes):
        scene = random_scene(seed * 1000 + k)
        for c in cases:
            e, _ = check_render(scene) if c == "render" else check_loss(scene, LOSS_CASES[c])
            worst[c] = max(worst[c], e)
        if progress is not None:
            progress(k, worst)
    return worst
