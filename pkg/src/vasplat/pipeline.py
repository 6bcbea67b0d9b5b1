"""End-to-end helpers: mesh extraction from a trained cloud, evaluation, ablation sweeps."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .fusion import TriangleMesh, fuse_depths, marching_cubes
from .gaussians import GaussianCloud
from .metrics import chamfer, precision_recall_f1, psnr, sample_mesh, ssim_score
from .rasterizer import RenderSettings, render
from .trainer import PRESETS, TrainConfig, prepare_views, train

log = logging.getLogger(__name__)


def render_depths(cloud: GaussianCloud, cameras, settings: RenderSettings | None = None):
    depths, valids, colors = [], [], []
    for cam in cameras:
        b = render(cloud, cam, settings, records=False)
        depths.append(b.depth)
        valids.append(b.depth_valid)
        colors.append(b.color)
    return depths, valids, colors


def mesh_from_cloud(cloud: GaussianCloud, dataset, voxel: float | None = None, truncation: float | None = None,
                    settings: RenderSettings | None = None) -> TriangleMesh:
    """Render every training view's depth, fuse into a TSDF and extract the zero level set."""
    depths, valids, _ = render_depths(cloud, dataset.cameras, dataset.render_settings(settings))
    vol = fuse_depths(depths, valids, dataset.cameras, voxel, truncation, dataset.bbox)
    return marching_cubes(vol)


def evaluate(mesh: TriangleMesh, dataset, cloud: GaussianCloud | None = None, threshold: float = 0.05,
             n_samples: int = 100_000, seed: int = 0, settings: RenderSettings | None = None) -> dict:
    """Geometry metrics against the dataset's ground-truth points, image metrics when a cloud is given."""
    report = {k: float("nan") for k in ("accuracy", "completeness", "chamfer", "precision", "recall", "f1",
                                        "psnr", "ssim")}
    gt = dataset.gt_points()
    if gt is not None and len(mesh.faces):
        pred = sample_mesh(mesh.vertices, mesh.faces, min(n_samples, len(gt)), seed)
        acc, comp, ch = chamfer(pred, gt)
        p, r, f = precision_recall_f1(pred, gt, threshold)
        report.update(accuracy=acc, completeness=comp, chamfer=ch, precision=p, recall=r, f1=f)
    if cloud is not None:
        settings = dataset.render_settings(settings)
        ps, ss = [], []
        for i, cam in enumerate(dataset.cameras):
            img = render(cloud, cam, settings, records=False).color
            gt_img = dataset.image(i)
            ps.append(psnr(np.clip(img, 0, 1), gt_img))
            ss.append(ssim_score(np.clip(img, 0, 1), gt_img))
        report.update(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))
    return report


def run_ablation(dataset, presets=("full", "only_LI", "no_nc", "no_ns", "no_p", "no_f"),
                 base: TrainConfig | None = None, out_dir=None, voxel: float = 0.02) -> list[dict]:
    """Train once per preset and score each mesh; optionally writes ``ablation.csv``."""
    base = base or TrainConfig()
    views = prepare_views(dataset)
    rows = []
    for name in presets:
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}")
        cfg = TrainConfig(**{**base.__dict__, "disable": PRESETS[name]})
        sub = Path(out_dir) / name if out_dir is not None else None
        res = train(dataset, cfg, sub, views=views)
        mesh = mesh_from_cloud(res.cloud, dataset, voxel, 4 * voxel, cfg.render)
        m = evaluate(mesh, dataset)
        row = {"preset": name, "P": len(res.cloud), **m}
        log.info("preset %s: %s", name, row)
        rows.append(row)
    if out_dir is not None:
        with open(Path(out_dir) / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return rows
