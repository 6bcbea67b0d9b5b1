import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from vasplat.geometry import make_camera


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


def simple_camera(fx=100.0, cx=64.0, size=128, R=None, t=None, view_id=0):
    return make_camera(fx, fx, cx, cx, size, size, R, t, view_id)


def random_camera(rng, view_id=0):
    f = rng.uniform(50, 300)
    W, H = int(rng.integers(32, 200)), int(rng.integers(32, 200))
    return make_camera(f, f * rng.uniform(0.9, 1.1), rng.uniform(0.3, 0.7) * W, rng.uniform(0.3, 0.7) * H, W, H,
                       random_rotation(rng), rng.normal(0, 2, 3), view_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A small ray-traced sphere dataset shared by the training and pipeline tests."""
    from vasplat.scenes import generate_scene
    root = tmp_path_factory.mktemp("tiny_sphere")
    return generate_scene("sphere", "checker", 6, 32, 3, root)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Records one pass/fail line per acceptance criterion, printed in the terminal summary."""
    entry = {"label": request.node.name, "detail": "", "ok": False}

    def record(label, ok, detail=""):
        entry.update(label=label, ok=bool(ok), detail=detail)
        return ok

    yield record
    status = "PASS" if entry["ok"] and getattr(request.node, "rep_call_passed", False) else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] {entry['label']}  {entry['detail']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call_passed = rep.passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
