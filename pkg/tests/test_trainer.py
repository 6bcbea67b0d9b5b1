import numpy as np
import pytest

from vasplat.errors import BadConfig, NonFiniteGradient, ShapeMismatch, TooFewViews
from vasplat.gaussians import GaussianCloud, init_random_sphere, logit
from vasplat.geometry import look_at, make_camera
from vasplat.trainer import (PRESETS, AdamState, DensifyStats, TrainConfig, adam_step, densify_and_prune,
                             parse_config, scene_extent, select_source_views, train)


def ring(n=8, radius=3.0):
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        pose = look_at([radius * np.cos(a), radius * np.sin(a), 0.0], [0, 0, 0])
        cams.append(make_camera(50, 50, 16, 16, 32, 32, pose.R_wc, pose.t_c, i))
    return cams


def test_source_views_ring():
    assert select_source_views(0, ring(), 3) == [1, 7, 2]
    assert select_source_views(3, ring(), 2) == [2, 4]


def test_source_views_all_and_too_few():
    cams = ring(5)
    assert sorted(select_source_views(2, cams, 4)) == [0, 1, 3, 4]
    with pytest.raises(TooFewViews):
        select_source_views(0, ring(2), 3)


def test_scene_extent():
    assert scene_extent(ring(8, 2.0)) == pytest.approx(2.2)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.color_only_end, c.photometric_end, c.feature_end, c.iterations) == (700, 1500, 2000, 2000)
    with pytest.raises(BadConfig):
        TrainConfig(color_only_end=900, single_view_end=800)
    with pytest.raises(BadConfig):
        TrainConfig(iterations=100)
    with pytest.raises(BadConfig):
        TrainConfig(lr_scale=0.0)
    with pytest.raises(BadConfig):
        TrainConfig(disable=("L_q",))


def test_phase_gating():
    c = TrainConfig()
    assert c.active_terms(0) == {"L_I"}
    assert c.active_terms(699) == {"L_I"}
    assert c.active_terms(700) == {"L_I", "edge", "L_nc", "L_ns", "L_p"}
    assert "L_f" not in c.active_terms(1499)
    assert c.active_terms(1500) == {"L_I", "edge", "L_nc", "L_ns", "L_p", "L_f"}
    only = TrainConfig(disable=PRESETS["only_LI"])
    assert all(only.active_terms(s) == {"L_I"} for s in (0, 800, 1999))


def test_scaled_schedule():
    c = TrainConfig.scaled(200)
    assert (c.color_only_end, c.single_view_end, c.photometric_end, c.feature_end) == (70, 70, 150, 200)


def test_position_lr_decay():
    c = TrainConfig()
    assert c.lr(0)["positions"] == pytest.approx(1.6e-4)
    assert c.lr(c.iterations - 1)["positions"] == pytest.approx(1.6e-6)
    assert c.lr(0, 2.0)["positions"] == pytest.approx(3.2e-4)


def test_parse_config():
    text = """
    # comment line
    iterations = 2400
    seed = 5   # trailing comment
    lambda3 = 0.5
    tile_size = 4
    disable = L_nc, L_ns
    """
    c = parse_config(text, overrides={"seed": "9"})
    assert c.iterations == 2400 and c.seed == 9
    assert c.weights.lambda3 == 0.5 and c.render.tile_size == 4
    assert c.disable == ("L_nc", "L_ns")
    with pytest.raises(BadConfig):
        parse_config("bogus = 1")
    with pytest.raises(BadConfig):
        parse_config("seed = many")
    with pytest.raises(BadConfig):
        parse_config("no equals sign here")


def _one():
    return GaussianCloud(np.zeros((1, 3)), [[1.0, 0, 0, 0]], np.zeros((1, 3)), [0.0], [[0.5, 0.5, 0.5]])


def test_adam_zero_gradient():
    c = _one()
    st = AdamState()
    out = adam_step(c, {k: np.zeros_like(v) for k, v in c.params().items()}, st, 0.1)
    assert st.step == 1
    for k in GaussianCloud.PARAMS:
        assert np.array_equal(getattr(out, k), getattr(c, k))


def test_adam_first_step():
    c = _one()
    st = AdamState()
    g = np.zeros((1, 3))
    g[0, 0] = 0.37
    out = adam_step(c, {"positions": g}, st, 0.01)
    # bias-corrected first step: m_hat = g, v_hat = g^2, update = -lr g / (|g| + eps)
    assert out.positions[0, 0] == pytest.approx(-0.01, rel=1e-12)
    assert out.positions[0, 1] == 0.0


def test_adam_errors():
    c = _one()
    with pytest.raises(NonFiniteGradient):
        adam_step(c, {"positions": np.array([[np.nan, 0, 0]])}, AdamState(), 0.1)
    with pytest.raises(ShapeMismatch):
        adam_step(c, {"positions": np.zeros((2, 3))}, AdamState(), 0.1)


def test_adam_renormalizes_quaternions():
    c = _one()
    out = adam_step(c, {"rotations": np.array([[0.0, 1.0, -1.0, 0.5]])}, AdamState(), 0.3)
    assert np.linalg.norm(out.rotations[0]) == pytest.approx(1.0, abs=1e-12)


def _densify_setup(P=5):
    cloud = init_random_sphere(P, 1.0, 0)
    cloud.log_scales[:] = np.log(0.001)
    cloud.opacity_logits[:] = logit(0.5)
    return cloud, DensifyStats.zeros(P), TrainConfig()


def test_densify_nothing_to_do():
    cloud, stats, cfg = _densify_setup()
    stats.grad_accum[:] = 1e-6
    stats.count[:] = 1
    out = densify_and_prune(cloud, stats, cfg, 1.0, np.random.default_rng(0))
    for k in GaussianCloud.PARAMS:
        assert np.array_equal(getattr(out, k), getattr(cloud, k))


def test_densify_clone():
    cloud, stats, cfg = _densify_setup()
    stats.grad_accum[2] = 1.0
    stats.count[:] = 1
    st = AdamState()
    st.m = {"positions": np.ones((5, 3))}
    st.v = {"positions": np.ones((5, 3))}
    out = densify_and_prune(cloud, stats, cfg, 1.0, np.random.default_rng(0), st)
    assert len(out) == 6
    offset = np.abs(out.positions[5] - cloud.positions[2])
    assert 0 < offset.max() < 5 * 0.001
    assert st.m["positions"].shape == (6, 3) and not st.m["positions"][5].any()


def test_densify_split():
    cloud, stats, cfg = _densify_setup()
    cloud.log_scales[1] = np.log(0.5)
    stats.grad_accum[1] = 1.0
    stats.count[:] = 1
    out = densify_and_prune(cloud, stats, cfg, 1.0, np.random.default_rng(0))
    assert len(out) == 6
    assert np.allclose(out.scales[-2:], 0.5 / 1.6)


def test_prune_transparent():
    cloud, stats, cfg = _densify_setup()
    cloud.opacity_logits[3] = logit(0.001)
    out = densify_and_prune(cloud, stats, cfg, 1.0, np.random.default_rng(0))
    assert len(out) == 4
    assert not np.any(np.all(out.positions == cloud.positions[3], axis=1))


def test_densify_respects_cap():
    cloud, stats, cfg = _densify_setup(10)
    stats.grad_accum[:] = np.arange(10.0)
    stats.count[:] = 1
    cfg = TrainConfig(max_gaussians=13)
    out = densify_and_prune(cloud, stats, cfg, 1.0, np.random.default_rng(0))
    assert len(out) == 13


def test_zero_iterations(tiny_scene):
    res = train(tiny_scene, TrainConfig.scaled(0))
    init = tiny_scene.init_points()
    assert np.array_equal(res.cloud.positions, init["points"])
    assert res.log == []


def test_training_is_deterministic(tiny_scene, tmp_path):
    cfg = TrainConfig.scaled(24, densify_from=4, densify_interval=4, seed=3)
    a = train(tiny_scene, cfg, tmp_path / "a")
    b = train(tiny_scene, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    for k in GaussianCloud.PARAMS:
        assert np.array_equal(getattr(a.cloud, k), getattr(b.cloud, k))
    # every term is logged and only the scheduled ones are non-zero
    for row in a.log:
        step, li, lnc, lns, lp, lf = row[:6]
        on = cfg.active_terms(step)
        assert li > 0
        assert (lnc != 0) <= ("L_nc" in on) and (lp != 0) <= ("L_p" in on) and (lf != 0) <= ("L_f" in on)


def test_training_log_columns(tiny_scene, tmp_path):
    train(tiny_scene, TrainConfig.scaled(3), tmp_path)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,L_I,L_nc,L_ns,L_p,L_f,total,P"
    assert len(lines) == 4
    assert (tmp_path / "final.cloud").exists()


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["sphere", "cube", "tilted_plane", "two_spheres"])
def test_loss_falls_within_each_phase(kind, tmp_path):
    from vasplat.scenes import generate_scene
    ds = generate_scene(kind, "checker", 8, 32, 1, tmp_path)
    cfg = TrainConfig(seed=1)
    total = np.array([row[6] for row in train(ds, cfg).log])
    for a, b in ((0, cfg.color_only_end), (cfg.color_only_end, cfg.photometric_end),
                 (cfg.photometric_end, cfg.feature_end)):
        assert total[b - 200:b].mean() < total[a:a + 200].mean(), (a, b)
