import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vasplat.errors import BadHeader, ChannelMismatch
from vasplat.features import (FeatureMap, builtin_features, cosine_similarity, load_feature_set, load_features,
                              save_features)


@pytest.fixture
def img():
    rng = np.random.default_rng(9)
    from scipy.ndimage import gaussian_filter
    return np.clip(gaussian_filter(rng.random((40, 48, 3)), (2, 2, 0)) * 2 - 0.5, 0, 1)


def test_builtin_deterministic(img):
    a = builtin_features(img)
    b = builtin_features(img)
    assert a.data.shape == (40, 48, 10)
    assert np.array_equal(a.data, b.data)


def test_builtin_standardized(img):
    f = builtin_features(img).data
    assert np.allclose(f.mean(axis=(0, 1)), 0, atol=1e-9)
    assert np.allclose(f.std(axis=(0, 1)), 1, atol=1e-6)


def test_constant_image_gives_zeros():
    f = builtin_features(np.full((16, 16, 3), 0.7)).data
    assert np.all(f == 0) and np.isfinite(f).all()


def test_derivative_channels_ignore_brightness(img):
    a = builtin_features(img, standardized=False).data
    b = builtin_features(img + 0.1, standardized=False).data
    assert np.allclose(a[..., 1:7], b[..., 1:7], atol=1e-12)


def test_translation_equivariance(img):
    shifted = np.roll(img, 5, axis=1)
    a = builtin_features(img, standardized=False).data
    b = builtin_features(shifted, standardized=False).data
    # columns far from the wrap seam and the borders
    assert np.max(np.abs(b[12:28, 20:38] - a[12:28, 15:33])) < 1e-9


def test_roundtrip(tmp_path, img):
    f = builtin_features(img, view_id=3)
    save_features(f, tmp_path / "f.bin")
    g = load_features(tmp_path / "f.bin", 3)
    assert g.view_id == 3
    assert np.array_equal(g.data, f.data.astype(np.float32))


def test_upsampling(tmp_path, img):
    f = builtin_features(img)
    save_features(FeatureMap(f.data[::2, ::2], 0), tmp_path / "half.bin")
    g = load_features(tmp_path / "half.bin", 0, image_size=(40, 48))
    assert g.data.shape == (40, 48, 10)


def test_constant_map_upsamples_exactly(tmp_path):
    save_features(FeatureMap(np.full((5, 6, 2), 0.25), 0), tmp_path / "c.bin")
    g = load_features(tmp_path / "c.bin", image_size=(10, 12))
    assert np.allclose(g.data, 0.25)


def test_errors(tmp_path, img):
    (tmp_path / "bad.bin").write_bytes(b"NOTAFEATUREFILE" + b"\0" * 40)
    with pytest.raises(BadHeader):
        load_features(tmp_path / "bad.bin")
    save_features(FeatureMap(np.zeros((4, 4, 10)), 0), tmp_path / "a.bin")
    save_features(FeatureMap(np.zeros((4, 4, 6)), 1), tmp_path / "b.bin")
    with pytest.raises(ChannelMismatch):
        load_feature_set([tmp_path / "a.bin", tmp_path / "b.bin"])
    with pytest.raises(ChannelMismatch):
        load_features(tmp_path / "b.bin", expected_channels=10)


def test_cosine_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0, 0], [0, 1.0, 0]) == 0.0
    assert cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert cosine_similarity(np.zeros(3), a) == 0.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=10, max_size=10), st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_cosine_scale_invariance(v, s):
    a = np.array(v)
    if np.linalg.norm(a) < 1e-3:
        return
    assert cosine_similarity(a, s * a) == pytest.approx(1.0, abs=1e-12)
    assert -1 <= cosine_similarity(a, a[::-1]) <= 1
