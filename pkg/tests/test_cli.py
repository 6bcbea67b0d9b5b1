import csv
import json

import pytest

from vasplat.cli import run


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def scene(workdir):
    out = workdir / "scene"
    assert run(["generate", "--kind", "sphere", "--views", "6", "--res", "32", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(workdir, scene):
    out = workdir / "run"
    assert run(["train", "--scene", str(scene), "--out", str(out), "--iters", "20", "--seed", "2"]) == 0
    return out


def test_generate(scene):
    assert (scene / "cameras.json").exists()
    assert len(list((scene / "images").glob("*.png"))) == 6


def test_train_outputs(trained):
    assert (trained / "final.cloud").exists()
    rows = (trained / "train_log.csv").read_text().splitlines()
    assert len(rows) == 21
    cfg = (trained / "config.txt").read_text()
    assert "iterations = 20" in cfg and "seed = 2" in cfg


def test_flags_override_config_file(workdir, scene):
    conf = workdir / "c.txt"
    conf.write_text("seed = 5\nlambda1 = 0.3\niterations = 2000\n")
    out = workdir / "override"
    assert run(["train", "--scene", str(scene), "--out", str(out), "--config", str(conf),
                "--iters", "2", "--seed", "8"]) == 0
    text = (out / "config.txt").read_text()
    assert "seed = 8" in text and "lambda1 = 0.3" in text


def test_render_mesh_eval(workdir, scene, trained):
    ck = str(trained / "final.cloud")
    assert run(["render", "--scene", str(scene), "--checkpoint", ck, "--out", str(workdir / "r")]) == 0
    assert (workdir / "r" / "0003_color.png").exists() and (workdir / "r" / "0003_depth.f32bin").exists()
    mesh = workdir / "m.ply"
    assert run(["mesh", "--scene", str(scene), "--checkpoint", ck, "--out", str(mesh), "--voxel", "0.05"]) == 0
    assert mesh.exists()
    ev = workdir / "ev"
    assert run(["eval", "--scene", str(scene), "--mesh", str(mesh), "--checkpoint", ck, "--out", str(ev)]) == 0
    rep = json.loads((ev / "metrics.json").read_text())
    assert set(rep) == {"accuracy", "completeness", "chamfer", "precision", "recall", "f1", "psnr", "ssim"}
    assert 0 <= rep["f1"] <= 1 and rep["psnr"] > 5


def test_gradcheck(workdir, capsys):
    out = workdir / "gc.json"
    assert run(["gradcheck", "--seed", "1", "--scenes", "2", "--out", str(out)]) == 0
    worst = json.loads(out.read_text())
    assert max(worst.values()) < 1e-2
    assert "overall max rel err" in capsys.readouterr().out


def test_ablate(workdir, scene):
    out = workdir / "abl"
    assert run(["ablate", "--scene", str(scene), "--out", str(out), "--iters", "10",
                "--preset", "full", "--preset", "only_LI", "--voxel", "0.05"]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["preset"] for r in rows] == ["full", "only_LI"]
    assert "chamfer" in rows[0] and "f1" in rows[0]


def test_usage_errors(workdir, capsys):
    assert run([]) == 1
    assert run(["train", "--scene", "x"]) == 1
    assert run(["generate", "--out", str(workdir / "g"), "--bogus"]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["--help"]) == 0


def test_validation_and_runtime_errors(workdir, scene):
    assert run(["train", "--scene", str(workdir / "nowhere"), "--out", str(workdir / "x")]) == 1
    assert run(["generate", "--views", "3", "--out", str(workdir / "g3")]) == 1
    assert run(["train", "--scene", str(scene), "--out", str(workdir / "x"), "--preset", "nope"]) == 1
    bad = workdir / "bad.cloud"
    bad.write_bytes(b"garbage")
    assert run(["render", "--scene", str(scene), "--checkpoint", str(bad), "--out", str(workdir / "x")]) == 1
