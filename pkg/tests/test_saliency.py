import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conv4dnet.errors import ConfigError, RangeError, ShapeError
from conv4dnet.models import ModelConfig, build_model
from conv4dnet.saliency import (
    DEFAULT_LAYER,
    cam_from_activation,
    channel_weights,
    classify_profile,
    extract_first_layer_kernels,
    gradcampp_4d,
    layer_scale,
    temporal_saliency_with_roi,
    upsample_linear,
)


def _hand_two_channel(a, c):
    """Two channels with one position each, score Y = c0*a0 + c1*a1."""
    u = []
    for ak, ck in zip(a, c):
        alpha = ck ** 2 / (2 * ck ** 2 + ak * ck ** 3)
        u.append(alpha * max(ck, 0.0))
    raw = [max(u[0] * a[0] + u[1] * a[1], 0.0)]
    return u, raw


def _hand_two_site(a, c):
    """One channel with two positions, score Y = c0*a0 + c1*a1."""
    s = a[0] * c[0] ** 3 + a[1] * c[1] ** 3
    alpha = [ci ** 2 / (2 * ci ** 2 + s) for ci in c]
    u = alpha[0] * max(c[0], 0.0) + alpha[1] * max(c[1], 0.0)
    raw = [max(u * ai, 0.0) for ai in a]
    return u, raw


def test_two_activation_hand_oracle_channels():
    a, c = (0.7, 1.3), (2.0, -0.5)
    u_hand, raw_hand = _hand_two_channel(a, c)
    A = np.array(a).reshape(2, 1)
    G = np.array(c).reshape(2, 1)
    cam, u, peak = cam_from_activation(A, G)
    np.testing.assert_allclose(u, u_hand, atol=1e-6)
    assert peak == pytest.approx(raw_hand[0], abs=1e-6)
    assert cam[0] == pytest.approx(1.0)


def test_two_activation_hand_oracle_sites():
    a, c = (0.4, 1.5), (1.2, 0.3)
    u_hand, raw_hand = _hand_two_site(a, c)
    cam, u, peak = cam_from_activation(np.array([a]), np.array([c]))
    assert u[0] == pytest.approx(u_hand, abs=1e-6)
    np.testing.assert_allclose(cam, np.array(raw_hand) / max(raw_hand), atol=1e-6)
    assert peak == pytest.approx(max(raw_hand), abs=1e-6)


def test_zero_gradient_gives_zero_map():
    A = np.random.default_rng(0).uniform(0, 1, (3, 2, 2, 2, 2))
    cam, u, peak = cam_from_activation(A, np.zeros_like(A))
    assert not cam.any() and not u.any() and peak == 0.0


def test_single_site_normalizes_to_one():
    cam, _, _ = cam_from_activation(np.array([[2.5]]), np.array([[0.8]]))
    assert cam.tolist() == [1.0]


def test_plain_gradcam_weights_are_mean_gradient():
    G = np.arange(8.0).reshape(2, 4) - 3
    np.testing.assert_allclose(channel_weights(np.ones_like(G), G, "gradcam"), [-1.5, 2.5])
    with pytest.raises(ConfigError):
        channel_weights(G, G, "occlusion")
    with pytest.raises(ShapeError):
        channel_weights(G, G[:1])


maps = hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
                                        st.integers(1, 3), st.integers(1, 3)),
                  elements=st.floats(-3, 3))


@settings(max_examples=60)
@given(maps, st.integers(0, 2 ** 16), st.sampled_from(["gradcam++", "gradcam"]))
def test_maps_are_nonnegative_and_normalized(A, seed, method):
    G = np.random.default_rng(seed).standard_normal(A.shape)
    cam, _, _ = cam_from_activation(A, G, method)
    assert cam.min() >= 0
    assert cam.max() == 0 or cam.max() == pytest.approx(1.0)


@settings(max_examples=40)
@given(maps, st.integers(0, 2 ** 16), st.floats(0.01, 100))
def test_scale_covariance(A, seed, c):
    # Grad-CAM weights are linear in G, so scaling the score leaves the map unchanged
    G = np.random.default_rng(seed).standard_normal(A.shape)
    base, _, _ = cam_from_activation(A, G, "gradcam")
    scaled, _, _ = cam_from_activation(A, c * G, "gradcam")
    np.testing.assert_allclose(scaled, base, atol=1e-5)
    # Grad-CAM++ with one channel, A >= 0 and G >= 0: the denominator stays
    # positive, u > 0 and only rescales the raw map
    a1, g1 = np.abs(A[:1]), np.abs(G[:1])
    base, _, _ = cam_from_activation(a1, g1)
    scaled, _, _ = cam_from_activation(a1, c * g1)
    np.testing.assert_allclose(scaled, base, atol=1e-5)


def test_gradcampp_is_not_scale_invariant_across_channels():
    # documents why the covariance property above is restricted
    A = np.array([[1.0, 2.0], [3.0, 0.5]])
    G = np.array([[1.0, -0.5], [0.2, 0.8]])
    base, _, _ = cam_from_activation(A, G)
    scaled, _, _ = cam_from_activation(A, 10 * G)
    assert np.abs(scaled - base).max() > 1e-3


@settings(max_examples=40)
@given(st.lists(st.integers(1, 4), min_size=4, max_size=4),
       st.lists(st.integers(1, 3), min_size=4, max_size=4), st.integers(0, 2 ** 16))
def test_upsample_reproduces_grid_values(dims, scale, seed):
    a = np.random.default_rng(seed).uniform(0, 1, dims)
    out_shape = tuple(d * s for d, s in zip(dims, scale))
    up = upsample_linear(a, out_shape, scale)
    assert up.shape == out_shape
    grid = np.ix_(*(np.arange(d) * s for d, s in zip(dims, scale)))
    np.testing.assert_allclose(up[grid], a, atol=1e-5)


def test_upsample_midpoint_is_linear():
    up = upsample_linear(np.array([0.0, 1.0]).reshape(2, 1, 1, 1), (4, 1, 1, 1), (2, 1, 1, 1))
    np.testing.assert_allclose(up.ravel(), [0, 0.5, 1, 1])


# -- on real models ----------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_a():
    return build_model("4d", ModelConfig.tiny(), seed=0)


def test_gradcampp_on_model(tiny_a):
    x = np.random.default_rng(1).standard_normal((8, 8, 8, 8)).astype(np.float32)
    for cls in range(3):
        res = gradcampp_4d(tiny_a, x, cls)
        assert res.upsampled.shape == (8, 8, 8, 8)
        assert res.temporal_signal.shape == (8,)
        for m in (res.map4d, res.upsampled):
            assert m.min() >= 0 and (m.max() == 0 or m.max() == pytest.approx(1.0))
        np.testing.assert_allclose(res.temporal_signal, res.upsampled.mean(axis=(1, 2, 3)))
    assert layer_scale(tiny_a, DEFAULT_LAYER) == (8, 8, 8, 8)
    assert layer_scale(tiny_a, "stage0.block0") == (2, 2, 2, 2)


def test_gradcampp_zero_head_gives_zero_map(tiny_a):
    model = tiny_a.astype(np.float32)
    model.params["head.weight"] = np.zeros_like(model.params["head.weight"])
    res = gradcampp_4d(model, np.ones((8, 8, 8, 8), np.float32), 1)
    assert not res.upsampled.any()


def test_gradcampp_other_models_and_errors(tiny_a):
    x = np.random.default_rng(2).standard_normal((8, 8, 8, 8)).astype(np.float32)
    for kind in ("3d-lstm", "3d-chan"):
        model = build_model(kind, ModelConfig.tiny())
        res = gradcampp_4d(model, x, 0, layer="stage1.block0")
        assert res.upsampled.shape == (8, 8, 8, 8)
    with pytest.raises(RangeError):
        gradcampp_4d(tiny_a, x, 3)
    with pytest.raises(ConfigError):
        gradcampp_4d(tiny_a, x, 0, layer="stage9.block0")


def test_roi_signals(tiny_a):
    x = np.random.default_rng(3).standard_normal((8, 8, 8, 8)).astype(np.float32)
    res = gradcampp_4d(tiny_a, x, 0)
    full = np.ones((8, 8, 8), bool)
    bold, sal = temporal_saliency_with_roi(res, full, x)
    np.testing.assert_allclose(sal, res.temporal_signal, atol=1e-12)
    one = np.zeros((8, 8, 8), bool)
    one[2, 3, 4] = True
    bold, sal = temporal_saliency_with_roi(res, one, x)
    np.testing.assert_array_equal(bold, x[:, 2, 3, 4])
    np.testing.assert_array_equal(sal, res.upsampled[:, 2, 3, 4])
    # disjoint masks combine by voxel-count weights
    m1 = np.zeros((8, 8, 8), bool)
    m1[:2] = True
    m2 = np.zeros((8, 8, 8), bool)
    m2[5:] = True
    _, s1 = temporal_saliency_with_roi(res, m1, x)
    _, s2 = temporal_saliency_with_roi(res, m2, x)
    _, s12 = temporal_saliency_with_roi(res, m1 | m2, x)
    n1, n2 = m1.sum(), m2.sum()
    np.testing.assert_allclose(s12, (n1 * s1 + n2 * s2) / (n1 + n2), atol=1e-12)
    with pytest.raises(RangeError):
        temporal_saliency_with_roi(res, np.zeros((8, 8, 8), bool), x)
    with pytest.raises(ShapeError):
        temporal_saliency_with_roi(res, np.ones((4, 8, 8), bool), x)


# -- kernels -----------------------------------------------------------------

@pytest.mark.parametrize("profile, tag", [
    ([-1, 0, 1], "derivative"),
    ([1 / 3, 1 / 3, 1 / 3], "average"),
    ([-0.2, -0.3, -0.25], "average"),
    ([1e-5, -2e-5, 3e-6], "other"),
    ([1.0, 0.05, 0.1], "other"),
    ([0.5, 0.5, -0.1], "other"),
])
def test_profile_tags(profile, tag):
    assert classify_profile(profile) == tag


def test_kernel_extraction(tiny_a):
    views = extract_first_layer_kernels(tiny_a, [0, 3], seed=5)
    assert len(views) == 6
    again = extract_first_layer_kernels(tiny_a, [0, 3], seed=5)
    assert [v.offset for v in views] == [v.offset for v in again]
    w = tiny_a.params["stem.conv.weight"]
    for v in views:
        assert all(0 <= o < 3 for o in v.offset)
        np.testing.assert_array_equal(v.profile, w[v.channel, 0, :, v.offset[0], v.offset[1],
                                                   v.offset[2]])
        assert v.profile.shape == (3,)
    fixed = extract_first_layer_kernels(tiny_a, [1], offsets=[(1, 1, 1)])
    assert fixed[0].offset == (1, 1, 1)
    with pytest.raises(RangeError):
        extract_first_layer_kernels(tiny_a, [4])
    with pytest.raises(RangeError):
        extract_first_layer_kernels(tiny_a, [0], offsets=[(3, 0, 0)])
