"""Temporal preprocessing, augmentation, subject-exclusive splits and the
synthetic planted-pattern dataset.

Volumes keep time on axis -4, so every op accepts (T, X, Y, Z),
(1, T, X, Y, Z) or batched (N, 1, T, X, Y, Z) arrays alike.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, RangeError, SplitError

TIME_AXIS = -4
CLASS_NAMES = ("CN", "MCI", "DAT")


@dataclass
class Sample:
    volume: np.ndarray  # (1, T, X, Y, Z)
    label: int
    subject_id: str
    session_id: str


@dataclass
class Dataset:
    samples: list
    class_names: tuple = CLASS_NAMES
    provenance: list = field(default_factory=list)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def geometry(self):
        return tuple(self.samples[0].volume.shape[1:])

    def __len__(self):
        return len(self.samples)

    def stack(self, indices=None):
        """Batch ``(volumes (N, 1, T, X, Y, Z), labels (N,))``."""
        idx = range(len(self.samples)) if indices is None else indices
        x = np.stack([self.samples[i].volume for i in idx])
        y = np.array([self.samples[i].label for i in idx], dtype=np.int64)
        return x, y

    def class_counts(self, indices=None):
        idx = range(len(self.samples)) if indices is None else indices
        counts = Counter(self.samples[i].label for i in idx)
        return [counts.get(c, 0) for c in range(self.num_classes)]

    def select_classes(self, names):
        """Keep only samples of ``names`` and relabel them 0..len(names)-1 in
        the given order (e.g. ``("CN", "DAT")`` for a binary setting)."""
        index = {self.class_names.index(n): i for i, n in enumerate(names)}
        kept = [Sample(s.volume, index[s.label], s.subject_id, s.session_id)
                for s in self.samples if s.label in index]
        return Dataset(kept, tuple(names), self.provenance + [{"op": "select_classes",
                                                               "classes": list(names)}])


@dataclass
class PreprocessConfig:
    discard_frames: int = 20
    band: tuple = (0.01, 0.1)
    tr_seconds: float = 3.0
    zscore_eps: float = 1e-8

    def __post_init__(self):
        self.band = tuple(float(b) for b in self.band)
        low, high = self.band
        nyquist = 1.0 / (2.0 * self.tr_seconds)
        if not 0 < low < high < nyquist:
            raise ConfigError(f"band {self.band} must satisfy 0 < low < high < Nyquist ({nyquist:.4g} Hz)")
        if self.discard_frames < 0:
            raise ConfigError("discard_frames must be >= 0")

    def to_dict(self):
        return asdict(self)


# -- preprocessing -----------------------------------------------------------

def discard_initial(volume, n):
    """Drop the first ``n`` time frames."""
    t = volume.shape[TIME_AXIS]
    if not 0 <= n < t:
        raise RangeError(f"cannot discard {n} of {t} frames")
    index = [slice(None)] * volume.ndim
    index[TIME_AXIS] = slice(n, None)
    return np.ascontiguousarray(volume[tuple(index)])


def bandpass(volume, config: PreprocessConfig):
    """Ideal DFT-domain band-pass: keep bins with low <= f <= high, zero the
    rest (DC included)."""
    t = volume.shape[TIME_AXIS]
    if t < 4:
        raise RangeError(f"bandpass needs at least 4 frames, got {t}")
    low, high = config.band
    spectrum = np.fft.rfft(volume.astype(np.float64), axis=TIME_AXIS)
    freqs = np.fft.rfftfreq(t, d=config.tr_seconds)
    # a relative slack so band edges that sit exactly on a bin stay inclusive
    slack = 1e-9 * high
    keep = (freqs >= low - slack) & (freqs <= high + slack)
    shape = [1] * volume.ndim
    shape[TIME_AXIS] = keep.size
    spectrum *= keep.reshape(shape)
    out = np.fft.irfft(spectrum, n=t, axis=TIME_AXIS)
    return out.astype(volume.dtype)


def zscore_per_voxel(volume, eps=1e-8):
    """(x - mean) / (std + eps) along time, population std."""
    if volume.shape[TIME_AXIS] < 2:
        raise RangeError("z-scoring needs at least 2 frames")
    x = volume.astype(np.float64)
    mu = x.mean(axis=TIME_AXIS, keepdims=True)
    sd = x.std(axis=TIME_AXIS, keepdims=True)
    return ((x - mu) / (sd + eps)).astype(volume.dtype)


def preprocess(volume, config: PreprocessConfig):
    """discard -> bandpass -> z-score."""
    out = discard_initial(volume, config.discard_frames)
    out = bandpass(out, config)
    return zscore_per_voxel(out, config.zscore_eps)


def preprocess_dataset(dataset: Dataset, config: PreprocessConfig) -> Dataset:
    samples = [Sample(preprocess(s.volume, config), s.label, s.subject_id, s.session_id)
               for s in dataset.samples]
    record = {"op": "preprocess", "order": ["discard_initial", "bandpass", "zscore_per_voxel"],
              "config": config.to_dict()}
    return Dataset(samples, dataset.class_names, dataset.provenance + [record])


def circular_time_shift(volume, offset):
    """Frame t of the result is frame (t - offset) mod T of the input."""
    return np.roll(volume, int(offset), axis=TIME_AXIS)


# -- splits ------------------------------------------------------------------

@dataclass
class SplitPlan:
    train: list
    test: list
    folds: list  # k lists of train indices

    def fold_split(self, fold):
        """``(train_indices, validation_indices)`` holding out ``fold``."""
        if len(self.folds) < 2:
            return list(self.train), []
        val = set(self.folds[fold])
        return [i for i in self.train if i not in val], list(self.folds[fold])

    def to_dict(self):
        return asdict(self)


def _fill_test(subjects, by_subject, labels, quota, rng, attempts):
    order = list(subjects)
    for _ in range(attempts):
        rng.shuffle(order)
        need = dict(quota)
        chosen = []
        for subj in order:
            counts = Counter(labels[i] for i in by_subject[subj])
            if all(counts[c] <= need.get(c, 0) for c in counts):
                chosen.append(subj)
                for c, k in counts.items():
                    need[c] -= k
                if not any(need.values()):
                    return chosen, need
    return None, need


def make_splits(samples, test_per_class, k=5, seed=0, num_classes=None, attempts=200):
    """Subject-exclusive train/test split with exactly ``test_per_class``
    test samples per class, plus ``k`` subject-exclusive folds over train."""
    labels = [s.label for s in samples]
    if num_classes is None:
        num_classes = max(labels) + 1
    by_subject = defaultdict(list)
    for i, s in enumerate(samples):
        by_subject[s.subject_id].append(i)
    subjects = sorted(by_subject)
    totals = Counter(labels)
    for c in range(num_classes):
        if totals[c] <= test_per_class:
            raise SplitError(f"class {c} has {totals[c]} samples; need more than {test_per_class} "
                             f"to fill the test set and leave training data")
    rng = np.random.default_rng(seed)
    quota = {c: test_per_class for c in range(num_classes)}
    chosen, need = _fill_test(subjects, by_subject, labels, quota, rng, attempts)
    if chosen is None:
        short = max(need, key=need.get)
        raise SplitError(f"cannot balance the test set subject-exclusively: class {short} "
                         f"is {need[short]} sample(s) short")
    test_subjects = set(chosen)
    test = sorted(i for s in test_subjects for i in by_subject[s])
    train_subjects = [s for s in subjects if s not in test_subjects]
    train = sorted(i for s in train_subjects for i in by_subject[s])

    folds = [[] for _ in range(max(k, 1))]
    order = list(train_subjects)
    rng.shuffle(order)
    order.sort(key=lambda s: -len(by_subject[s]))  # stable: big subjects first, shuffled ties
    for subj in order:
        smallest = min(range(len(folds)), key=lambda f: len(folds[f]))
        folds[smallest].extend(by_subject[subj])
    folds = [sorted(f) for f in folds]
    return SplitPlan(train, test, folds)


def check_split(samples, plan: SplitPlan):
    """Raise SplitError if a subject crosses train/test or the folds do not
    partition the train set."""
    train_subj = {samples[i].subject_id for i in plan.train}
    test_subj = {samples[i].subject_id for i in plan.test}
    crossing = train_subj & test_subj
    if crossing:
        raise SplitError(f"subjects in both train and test: {sorted(crossing)[:5]}")
    flat = sorted(i for f in plan.folds for i in f)
    if flat != sorted(plan.train):
        raise SplitError("folds do not partition the training set")
    if len(plan.folds) > 1:
        for a in range(len(plan.folds)):
            sa = {samples[i].subject_id for i in plan.folds[a]}
            for b in range(a + 1, len(plan.folds)):
                if sa & {samples[i].subject_id for i in plan.folds[b]}:
                    raise SplitError(f"folds {a} and {b} share a subject")


# -- synthetic planted-pattern data ------------------------------------------

@dataclass
class SyntheticSpec:
    """Generator knobs. ``mod_bin`` is the DFT bin of the class-1 amplitude
    modulation, so its frequency is mod_bin / (T * tr_seconds)."""

    geometry: tuple = (32, 16, 16, 16)
    amplitude: float = 1.0
    modulation_depth: float = 0.8
    mod_bin: int = 4
    drift_voxels: float = 6.0
    blob_sigma: float = 2.0
    tr_seconds: float = 3.0
    margin: float = 4.0
    blobs: int = 1

    def __post_init__(self):
        self.geometry = tuple(int(g) for g in self.geometry)
        if len(self.geometry) != 4 or min(self.geometry) < 1:
            raise ConfigError(f"geometry must be 4 positive extents, got {self.geometry}")
        room = min(self.geometry[1:]) - 1 - 2 * self.margin
        if room < 0:
            raise ConfigError(f"margin {self.margin} leaves no interior in {self.geometry[1:]}")
        if self.drift_voxels > room + 1e-9:
            raise ConfigError(f"drift of {self.drift_voxels} voxels cannot fit the interior box")
        if self.blobs < 1:
            raise ConfigError(f"blobs must be >= 1, got {self.blobs}")
        if not 0 < self.mod_bin <= self.geometry[0] // 2:
            raise ConfigError(f"mod_bin must lie in [1, T/2], got {self.mod_bin}")

    @classmethod
    def for_geometry(cls, geometry, **overrides):
        """Defaults scaled from the 32 x 16^3 reference to ``geometry``."""
        geometry = tuple(int(g) for g in geometry)
        r = min(geometry[1:]) / 16.0
        base = dict(geometry=geometry, margin=4.0 * r, drift_voxels=6.0 * r,
                    blob_sigma=max(2.0 * r, 0.75), mod_bin=max(1, round(geometry[0] / 8)))
        base.update(overrides)
        return cls(**base)

    @property
    def mod_frequency(self):
        return self.mod_bin / (self.geometry[0] * self.tr_seconds)

    def to_dict(self):
        d = asdict(self)
        d["mod_frequency"] = self.mod_frequency
        return d


def _blob_path(spec: SyntheticSpec, label, rng, t, lo, hi):
    """Centers (T, 3) and amplitudes (T,) of one blob."""
    t_len = t.size
    phase = rng.uniform(0, 2 * math.pi)

    def amplitude(angle):
        return spec.amplitude * (1.0 + spec.modulation_depth * np.cos(angle))

    if label == 2:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        path = direction * spec.drift_voxels
        # start so the whole path stays inside the interior box
        start_lo = np.maximum(lo, lo - path)
        start_hi = np.minimum(hi, hi - path)
        start = rng.uniform(start_lo, np.maximum(start_lo, start_hi))
        return start + np.outer(t / max(t_len - 1, 1), path), np.full(t_len, amplitude(phase))
    centers = np.tile(rng.uniform(lo, hi), (t_len, 1))
    if label == 1:
        return centers, amplitude(2 * math.pi * spec.mod_bin * t / t_len + phase)
    return centers, np.full(t_len, amplitude(phase))


def planted_signal(spec: SyntheticSpec, label, rng):
    """Noise-free (T, X, Y, Z) pattern for one sample, plus the blob centers
    (blobs, T, 3).

    Every class shows ``spec.blobs`` Gaussian blobs per frame. Each blob's
    amplitude is drawn from the same distribution per frame and its center
    is uniform over the same interior box, so a single frame does not reveal
    the class:

    * 0: static blob, constant amplitude ``a(phi)`` with random phase phi
    * 1: static blob, amplitude ``a(2 pi f t + phi)``
    * 2: constant amplitude ``a(phi)``, center moving along a random
      direction by ``drift_voxels`` over the scan

    Blobs are independent: own phase, position and drift direction.
    """
    t_len, *space = spec.geometry
    grid = [g.ravel() for g in np.meshgrid(*(np.arange(n, dtype=np.float64) for n in space),
                                           indexing="ij")]
    t = np.arange(t_len)
    lo = np.full(3, spec.margin)
    hi = np.array(space, dtype=np.float64) - 1 - spec.margin
    frames = np.zeros((t_len, int(np.prod(space))))
    all_centers = []
    for _ in range(spec.blobs):
        centers, amps = _blob_path(spec, label, rng, t, lo, hi)
        d2 = sum((g[None, :] - c[:, None]) ** 2 for g, c in zip(grid, centers.T))
        frames += amps[:, None] * np.exp(-0.5 * d2 / spec.blob_sigma ** 2)
        all_centers.append(centers)
    return frames.reshape(t_len, *space), np.stack(all_centers)


def generate_synthetic(spec: SyntheticSpec | None = None, classes=3, samples_per_class=10,
                       noise_sigma=1.0, seed=0, sessions_per_subject=1) -> Dataset:
    """Class-conditional 4D blobs in i.i.d. Gaussian noise.

    Subjects are numbered per class; with ``sessions_per_subject > 1``
    consecutive samples share a subject id.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(classes):
        for i in range(samples_per_class):
            signal, _ = planted_signal(spec, label, rng)
            noise = rng.standard_normal(signal.shape) * noise_sigma
            volume = (signal + noise).astype(np.float32)[None]
            subj = f"c{label}-s{i // sessions_per_subject:04d}"
            samples.append(Sample(volume, label, subj, f"{subj}-ses{i % sessions_per_subject}"))
    record = {"op": "generate_synthetic", "spec": spec.to_dict(), "classes": classes,
              "samples_per_class": samples_per_class, "noise_sigma": noise_sigma, "seed": seed}
    return Dataset(samples, CLASS_NAMES[:classes] if classes <= 3 else
                   tuple(f"class{c}" for c in range(classes)), [record])
