import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conv4dnet.errors import ConfigError, RangeError, SplitError
from conv4dnet.pipeline import (
    Dataset,
    PreprocessConfig,
    Sample,
    SyntheticSpec,
    bandpass,
    check_split,
    circular_time_shift,
    discard_initial,
    generate_synthetic,
    make_splits,
    planted_signal,
    preprocess,
    preprocess_dataset,
    zscore_per_voxel,
)

TR = 3.0
BAND = PreprocessConfig(discard_frames=0, band=(0.01, 0.1), tr_seconds=TR)


def _sinusoid(freq, t_len=120, shape=(2, 2, 2), phase=0.3):
    t = np.arange(t_len) * TR
    wave = np.cos(2 * np.pi * freq * t + phase)
    return np.broadcast_to(wave[:, None, None, None], (t_len,) + shape).astype(np.float64)


# -- discard -----------------------------------------------------------------

def test_discard_keeps_tail():
    v = np.arange(140, dtype=np.float32).reshape(140, 1, 1, 1) * np.ones((1, 2, 2, 2), np.float32)
    out = discard_initial(v, 20)
    assert out.shape == (120, 2, 2, 2)
    assert out[0, 0, 0, 0] == 20.0
    np.testing.assert_array_equal(discard_initial(v, 0), v)
    batched = discard_initial(v[None, None], 20)
    assert batched.shape == (1, 1, 120, 2, 2, 2)
    with pytest.raises(RangeError):
        discard_initial(v, 140)


# -- bandpass ----------------------------------------------------------------

def test_bandpass_passes_in_band_bin_aligned_sinusoid():
    # bin spacing is 1 / (120 * 3 s); 0.05 Hz is bin 18
    x = _sinusoid(0.05)
    assert np.abs(bandpass(x, BAND) - x).max() < 1e-4


def test_bandpass_blocks_out_of_band_sinusoid_and_dc():
    assert np.abs(bandpass(_sinusoid(0.15), BAND)).max() < 1e-4  # bin 54
    assert np.abs(bandpass(np.full((120, 2, 2, 2), 5.0), BAND)).max() < 1e-4


def test_bandpass_band_edges_are_inclusive():
    cfg = PreprocessConfig(discard_frames=0, band=(10 / 360, 20 / 360), tr_seconds=TR)
    for b in (10, 20):
        x = _sinusoid(b / 360)
        assert np.abs(bandpass(x, cfg) - x).max() < 1e-4
    assert np.abs(bandpass(_sinusoid(21 / 360), cfg)).max() < 1e-4


def test_bandpass_idempotent_and_linear():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3, 3, 3)).astype(np.float32)
    y = rng.standard_normal((64, 3, 3, 3)).astype(np.float32)
    once = bandpass(x, BAND)
    np.testing.assert_allclose(bandpass(once, BAND), once, atol=1e-5)
    a, b = 1.7, -0.4
    np.testing.assert_allclose(bandpass(a * x + b * y, BAND),
                               a * bandpass(x, BAND) + b * bandpass(y, BAND), atol=1e-5)


def test_bandpass_needs_four_frames_and_valid_band():
    with pytest.raises(RangeError):
        bandpass(np.zeros((3, 1, 1, 1)), BAND)
    with pytest.raises(ConfigError):
        PreprocessConfig(band=(0.01, 0.2), tr_seconds=3.0)  # above Nyquist
    with pytest.raises(ConfigError):
        PreprocessConfig(band=(0.1, 0.01))


# -- z-score -----------------------------------------------------------------

def test_zscore_moments():
    rng = np.random.default_rng(1)
    v = (rng.standard_normal((50, 3, 4, 2)) * rng.uniform(0.5, 9, (3, 4, 2)) + 4).astype(np.float32)
    z = zscore_per_voxel(v).astype(np.float64)
    assert np.abs(z.mean(axis=0)).max() < 1e-5
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-5)


def test_zscore_constant_voxel_is_zero():
    z = zscore_per_voxel(np.full((10, 1, 1, 1), 3.0))
    np.testing.assert_array_equal(z, 0)


def test_preprocess_order_and_provenance():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((140, 2, 2, 2)).astype(np.float32)
    cfg = PreprocessConfig(tr_seconds=TR)
    out = preprocess(v, cfg)
    manual = zscore_per_voxel(bandpass(discard_initial(v, 20), cfg), cfg.zscore_eps)
    assert out.shape[0] == 120
    assert out.tobytes() == manual.tobytes()
    assert preprocess(v, cfg).tobytes() == out.tobytes()
    data = Dataset([Sample(v[None], 0, "s0", "s0-a")])
    done = preprocess_dataset(data, cfg)
    assert done.provenance[-1]["order"] == ["discard_initial", "bandpass", "zscore_per_voxel"]
    assert done.geometry == (120, 2, 2, 2)


# -- circular shift ----------------------------------------------------------

def test_shift_semantics():
    v = np.arange(5, dtype=np.float32).reshape(5, 1, 1, 1)
    np.testing.assert_array_equal(circular_time_shift(v, 2).ravel(), [3, 4, 0, 1, 2])
    np.testing.assert_array_equal(circular_time_shift(v, 5), v)


@settings(max_examples=40)
@given(st.integers(1, 12), st.integers(-30, 30), st.integers(-30, 30), st.integers(0, 2 ** 16))
def test_shift_group_law_and_zscore_commute(t_len, a, b, seed):
    v = np.random.default_rng(seed).standard_normal((1, t_len, 2, 1, 2)).astype(np.float32)
    lhs = circular_time_shift(circular_time_shift(v, a), b)
    assert lhs.tobytes() == circular_time_shift(v, a + b).tobytes()
    assert circular_time_shift(v, t_len).tobytes() == v.tobytes()
    if t_len >= 2:
        np.testing.assert_allclose(zscore_per_voxel(circular_time_shift(v, a)),
                                   circular_time_shift(zscore_per_voxel(v), a), atol=1e-6)


# -- splits ------------------------------------------------------------------

def _roster(counts, seed=0):
    """Subjects with 1-3 sessions each; volumes are placeholders."""
    rng = np.random.default_rng(seed)
    samples = []
    dummy = np.zeros((1, 1, 1, 1, 1), np.float32)
    for label, total in enumerate(counts):
        s = 0
        while total:
            n = min(total, int(rng.integers(1, 4)))
            for k in range(n):
                samples.append(Sample(dummy, label, f"c{label}-{s}", f"c{label}-{s}-{k}"))
            total -= n
            s += 1
    return samples


def _assert_no_crossing(samples, plan):
    train = {samples[i].subject_id for i in plan.train}
    for i in plan.test:
        assert samples[i].subject_id not in train


def test_clinical_layout_split():
    # 602 / 210 / 147 train + 50 per class test
    samples = _roster((652, 260, 197))
    plan = make_splits(samples, 50, k=5, seed=0)
    labels = np.array([s.label for s in samples])
    assert np.bincount(labels[plan.test]).tolist() == [50, 50, 50]
    assert np.bincount(labels[plan.train]).tolist() == [602, 210, 147]
    _assert_no_crossing(samples, plan)
    check_split(samples, plan)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 3


@pytest.mark.parametrize("seed", range(5))
def test_split_hygiene_and_determinism(seed):
    samples = _roster((40, 30, 25), seed=seed)
    plan = make_splits(samples, 8, k=3, seed=seed)
    _assert_no_crossing(samples, plan)
    check_split(samples, plan)
    assert sorted(plan.train + plan.test) == list(range(len(samples)))
    train, val = plan.fold_split(1)
    assert set(train).isdisjoint(val) and sorted(train + val) == sorted(plan.train)
    again = make_splits(samples, 8, k=3, seed=seed)
    assert again.to_dict() == plan.to_dict()


def test_single_fold_has_no_validation():
    samples = _roster((10, 10))
    plan = make_splits(samples, 3, k=1)
    assert plan.fold_split(0) == (plan.train, [])


def test_split_errors():
    with pytest.raises(SplitError):
        make_splits(_roster((5, 20)), 5)
    # one subject with 4 sessions cannot fill a quota of 3
    dummy = np.zeros((1, 1, 1, 1, 1), np.float32)
    samples = [Sample(dummy, 0, "a", f"a{i}") for i in range(4)] + _roster((0, 10))
    samples += [Sample(dummy, 0, "b", "b0")]
    with pytest.raises(SplitError, match="short"):
        make_splits(samples, 3)


def test_check_split_detects_leak():
    samples = _roster((10, 10))
    plan = make_splits(samples, 3, k=2)
    plan.test.append(plan.train[0])
    with pytest.raises(SplitError):
        check_split(samples, plan)


# -- synthetic data ----------------------------------------------------------

def test_class1_spatial_mean_oscillates_at_modulation_bin():
    spec = SyntheticSpec()
    frames, _ = planted_signal(spec, 1, np.random.default_rng(0))
    trace = frames.mean(axis=(1, 2, 3))
    power = np.abs(np.fft.rfft(trace - trace.mean()))
    assert int(np.argmax(power)) == spec.mod_bin
    assert spec.mod_frequency == pytest.approx(4 / 96)


def test_class0_is_time_constant():
    frames, centers = planted_signal(SyntheticSpec(blobs=3), 0, np.random.default_rng(1))
    assert np.abs(np.diff(frames, axis=0)).max() == 0
    assert centers.shape == (3, 32, 3)
    assert np.ptp(centers, axis=1).max() == 0


def test_class2_center_drifts_linearly_inside_volume():
    spec = SyntheticSpec()
    _, (centers,) = planted_signal(spec, 2, np.random.default_rng(2))
    step = np.diff(centers, axis=0)
    np.testing.assert_allclose(step, np.broadcast_to(step[0], step.shape), atol=1e-12)
    assert np.linalg.norm(centers[-1] - centers[0]) == pytest.approx(spec.drift_voxels)
    assert centers.min() >= spec.margin - 1e-9
    assert centers.max() <= 16 - 1 - spec.margin + 1e-9


def test_blobs_superpose_independent_draws():
    spec = SyntheticSpec(geometry=(8, 12, 12, 12), margin=2.0, drift_voxels=4.0, blobs=2)
    one = SyntheticSpec(geometry=(8, 12, 12, 12), margin=2.0, drift_voxels=4.0)
    for label in range(3):
        frames, centers = planted_signal(spec, label, np.random.default_rng(4))
        rng = np.random.default_rng(4)
        f1, c1 = planted_signal(one, label, rng)
        f2, c2 = planted_signal(one, label, rng)
        np.testing.assert_allclose(frames, f1 + f2, atol=1e-12)
        np.testing.assert_array_equal(centers, np.concatenate([c1, c2]))
    with pytest.raises(ConfigError):
        SyntheticSpec(blobs=0)


def test_frame_marginals_match_across_classes():
    # the energy of one frame is a(phi) times a fixed blob mass, with phi
    # uniform in every class, so per-class means agree up to sampling error
    spec = SyntheticSpec(geometry=(8, 16, 16, 16))
    rng = np.random.default_rng(3)
    mass = {c: [] for c in range(3)}
    for _ in range(400):
        for c in range(3):
            frames, _ = planted_signal(spec, c, rng)
            mass[c].append(frames[int(rng.integers(8))].sum())
    means = np.array([np.mean(mass[c]) for c in range(3)])
    se = max(np.std(mass[c]) for c in range(3)) / np.sqrt(400)
    assert np.ptp(means) < 4 * se * np.sqrt(2)


def test_generator_is_deterministic_and_shaped():
    spec = SyntheticSpec(geometry=(8, 6, 6, 6), margin=1.0, drift_voxels=2.0)
    a = generate_synthetic(spec, classes=3, samples_per_class=4, seed=5, sessions_per_subject=2)
    b = generate_synthetic(spec, classes=3, samples_per_class=4, seed=5, sessions_per_subject=2)
    assert len(a) == 12 and a.geometry == (8, 6, 6, 6)
    assert a.samples[0].volume.dtype == np.float32
    assert all(x.volume.tobytes() == y.volume.tobytes() for x, y in zip(a.samples, b.samples))
    assert a.class_counts() == [4, 4, 4]
    assert len({s.subject_id for s in a.samples}) == 6
    binary = a.select_classes(("CN", "DAT"))
    assert binary.class_counts() == [4, 4]
    assert binary.class_names == ("CN", "DAT")
