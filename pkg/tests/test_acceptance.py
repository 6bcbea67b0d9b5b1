"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that is printed in the pytest
terminal summary under "acceptance criteria".
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from vasplat.features import cosine_similarity
from vasplat.geometry import make_camera
from vasplat.gradcheck import run_suite
from vasplat.imageproc import Patch, ncc, ncc_with_flag
from vasplat.losses import omega_from_phi, visibility
from vasplat.metrics import PSNR_CAP, chamfer, precision_recall_f1, psnr, ssim_score
from vasplat.pipeline import run_ablation
from vasplat.scenes import generate_scene
from vasplat.trainer import TrainConfig

from oracles import (blending_invariants, homography_fuzz, nn_exactness_fuzz, plane_equation_fuzz, roundtrip_fuzz,
                     sphere_fusion_rms)

# Ablation trend: full <= ABLATION_RATIO x only_LI and every single-term removal strictly worse than full.
# Chamfer values from the development run of this exact scene and seed, shown next to the measured ones.
ABLATION_RATIO = 0.5
ABLATION_BUDGET_S = 30 * 60
ABLATION_REFERENCE = {"full": 0.008890, "only_LI": 0.054325, "no_nc": 0.009007, "no_ns": 0.010439, "no_p": 0.010244}


def test_c1_gradient_suite(acceptance):
    t0 = time.time()
    worst = run_suite(50, seed=0)
    elapsed = time.time() - t0
    li = max(worst["L_I"], worst["render"])
    rest = max(v for k, v in worst.items() if k not in ("L_I", "render"))
    ok = li < 1e-3 and rest < 1e-2 and elapsed < 600
    detail = f"L_I/render {li:.2e} (<1e-3), other losses {rest:.2e} (<1e-2), {elapsed:.0f}s (<600s)"
    acceptance("criterion 1: gradient suite", ok, detail)
    assert ok, detail


def test_c2_geometry_oracles(acceptance):
    h = homography_fuzz(1000, seed=0)
    r = roundtrip_fuzz(1000, seed=0)
    p = plane_equation_fuzz(1000, seed=0)
    ok = h < 1e-6 and r < 1e-9 and p < 1e-9
    detail = f"homography {h:.1e}px (<1e-6), round trip {r:.1e} (<1e-9), plane equation {p:.1e} (<1e-9)"
    acceptance("criterion 2: geometry oracles", ok, detail)
    assert ok, detail


def test_c3_blending_invariants(acceptance):
    part, order_ok, tile_ok = blending_invariants(20, seed=0)
    ok = part <= 1e-6 and order_ok and tile_ok
    detail = f"partition err {part:.1e} (<=1e-6), order invariant {order_ok}, tile bitwise {tile_ok}"
    acceptance("criterion 3: blending invariants", ok, detail)
    assert ok, detail


def _patch(a):
    return Patch(np.asarray(a, float), np.ones(np.shape(a), bool))


def test_c4_ncc_feature_invariants(acceptance):
    rng = np.random.default_rng(4)
    max_abs, max_affine = 0.0, 0.0
    for _ in range(2000):
        a, b = rng.random((7, 7)), rng.random((7, 7))
        if rng.random() < 0.2:
            b = 3.0 * a - 1.0 + 1e-3 * rng.random((7, 7))
        v = ncc(_patch(a), _patch(b))
        s = np.exp(rng.uniform(-4, 4)) * rng.choice([-1.0, 1.0])
        t = rng.uniform(-10, 10)
        w = ncc(_patch(a), _patch(s * b + t))
        max_abs = max(max_abs, abs(v), abs(w))
        max_affine = max(max_affine, abs(w - np.sign(s) * v))

    cos_exact = True
    cos_close = 0.0
    for _ in range(2000):
        a, b = rng.normal(size=32), rng.normal(size=32)
        c = cosine_similarity(a, b)
        # power-of-two scales are exact in binary floating point
        k = float(2.0 ** rng.integers(-20, 21))
        cos_exact &= cosine_similarity(k * a, b) == c and cosine_similarity(a, k * b) == c
        s = np.exp(rng.uniform(-5, 5))
        cos_close = max(cos_close, abs(cosine_similarity(s * a, b) - c))

    flat = np.full((7, 7), 0.25)
    flat_vals = [ncc(_patch(flat), _patch(rng.random((7, 7)))), ncc(_patch(rng.random((7, 7))), _patch(flat)),
                 ncc(_patch(flat), _patch(flat)), ncc_with_flag(_patch(flat), _patch(flat))[0],
                 cosine_similarity(np.zeros(8), rng.normal(size=8))]
    flat_ok = all(np.isfinite(v) and v == 0.0 for v in flat_vals)

    ok = max_abs <= 1.0 + 1e-12 and max_affine < 1e-9 and cos_exact and cos_close < 1e-15 and flat_ok
    detail = (f"|NCC| max {max_abs:.15f}, affine diff {max_affine:.1e} (<1e-9), cosine 2^k scaling bitwise "
              f"{cos_exact}, general scaling {cos_close:.1e}, flat patches -> 0 {flat_ok}")
    acceptance("criterion 4: NCC/feature invariants", ok, detail)
    assert ok, detail


def test_c5_occlusion_visibility_table(acceptance):
    table_ok = (omega_from_phi(0.0) == 1.0 and abs(omega_from_phi(np.log(2.0)) - 0.5) <= 1e-12
                and all(omega_from_phi(p) == 0.0 for p in (1.0, 1.5, 10.0, np.inf)))
    grid = np.linspace(0.0, 2.0, 100)
    w = omega_from_phi(grid)
    mono_ok = bool(np.all(np.diff(w) <= 0) and np.all(w[grid >= 1] == 0) and np.all(w[grid < 1] > 0))

    cam = make_camera(128.0, 128.0, 64.0, 64.0, 128, 128)
    depth = np.full((128, 128), 4.0)
    left = make_camera(128.0, 128.0, 64.0, 64.0, 128, 128, None, np.array([-4.0 / 128.0, 0.0, 0.0]))
    behind = make_camera(128.0, 128.0, 64.0, 64.0, 128, 128, np.diag([-1.0, 1.0, -1.0]))
    holes = depth.copy()
    holes[5, 5] = 0.0
    cases = [
        (visibility((40, 40), depth, cam, cam), 1),      # interior
        (visibility((0, 40), depth, cam, cam), 0),       # lands on u = 0
        (visibility((40, 0), depth, cam, cam), 0),       # lands on v = 0
        (visibility((127, 127), depth, cam, cam), 1),    # last pixel is inside (0, W)
        (visibility((127, 40), depth, cam, left), 0),    # lands on u = W
        (visibility((126, 40), depth, cam, left), 1),
        (visibility((40, 40), depth, cam, behind), 0),   # behind the source camera
        (visibility((5, 5), holes, cam, cam), 0),        # no depth
    ]
    vis_ok = all(a == b for a, b in cases)
    ok = table_ok and mono_ok and vis_ok
    detail = f"omega table {table_ok}, monotone on 100-pt grid {mono_ok}, visibility boundaries {vis_ok}"
    acceptance("criterion 5: occlusion/visibility table", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_c6_ablation_trend(acceptance, tmp_path):
    t0 = time.time()
    ds = generate_scene("sphere", "checker", 16, 128, 7, tmp_path / "sphere")
    rows = {r["preset"]: r for r in run_ablation(ds, ("full", "only_LI", "no_nc", "no_ns", "no_p"),
                                                  TrainConfig(seed=7), tmp_path / "runs")}
    elapsed = time.time() - t0
    ch = {k: r["chamfer"] for k, r in rows.items()}
    ratio_ok = ch["full"] <= ABLATION_RATIO * ch["only_LI"]
    worse = {k: ch[k] > ch["full"] for k in ("no_nc", "no_ns", "no_p")}
    ok = ratio_ok and all(worse.values()) and elapsed <= ABLATION_BUDGET_S
    detail = (", ".join(f"{k} {v:.6f} (dev {ABLATION_REFERENCE[k]:.6f})" for k, v in ch.items())
              + f"; full/only_LI {ch['full'] / ch['only_LI']:.2f} (<=0.5); worse than full {worse}; "
              f"{elapsed:.0f}s (<=1800s)")
    acceptance("criterion 6: ablation trend", ok, detail)
    assert ok, detail


def test_c7_fusion_oracle(acceptance, tmp_path):
    rms, mesh = sphere_fusion_rms(tmp_path, n_views=16, res=128, voxel=0.02, truncation=0.08)
    bad = nn_exactness_fuzz(100, 500, seed=7)
    ok = rms < 0.03 and len(mesh) > 0 and bad == 0
    detail = f"GT sphere mesh RMS {rms:.4f} (<0.03), grid NN vs brute force mismatches {bad}/100"
    acceptance("criterion 7: fusion oracle", ok, detail)
    assert ok, detail


def test_c8_metric_identities(acceptance):
    rng = np.random.default_rng(8)
    img = rng.random((32, 32, 3))
    pts = rng.normal(size=(300, 3))
    vals = {"psnr": psnr(img, img), "ssim": ssim_score(img, img), "chamfer": chamfer(pts, pts)[2]}
    f1s = [precision_recall_f1(pts, pts, d)[2] for d in (1e-12, 1e-3, 1.0, 1e3)]
    ok = vals["psnr"] == PSNR_CAP and abs(vals["ssim"] - 1.0) < 1e-12 and vals["chamfer"] == 0.0 and f1s == [1.0] * 4
    detail = f"psnr {vals['psnr']}, ssim {vals['ssim']:.15f}, chamfer {vals['chamfer']}, F1 {f1s}"
    acceptance("criterion 8: metric identities", ok, detail)
    assert ok, detail


def _train_subprocess(scene, out, threads, config):
    env = {**os.environ, "NUMBA_NUM_THREADS": str(threads)}
    cmd = [sys.executable, "-m", "vasplat.cli", "train", "--scene", str(scene), "--out", str(out),
           "--config", str(config), "--iters", "40", "--seed", "11", "--threads", str(threads)]
    subprocess.run(cmd, env=env, check=True, capture_output=True)
    return (out / "train_log.csv").read_bytes(), (out / "final.cloud").read_bytes()


def test_c9_determinism(acceptance, tiny_scene, tmp_path):
    config = tmp_path / "c.txt"
    config.write_text("densify_from = 5\ndensify_interval = 5\n")
    a = _train_subprocess(tiny_scene.root, tmp_path / "a", 1, config)
    b = _train_subprocess(tiny_scene.root, tmp_path / "b", 1, config)
    c = _train_subprocess(tiny_scene.root, tmp_path / "c", 4, config)
    same_threads = a == b
    across_threads = a == c
    ok = same_threads and across_threads
    detail = f"repeat run bitwise {same_threads}, 1 vs 4 threads bitwise {across_threads}"
    acceptance("criterion 9: determinism", ok, detail)
    assert ok, detail
