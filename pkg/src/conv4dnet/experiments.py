"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import MODEL_KINDS, ModelConfig, build_model
from .pipeline import SyntheticSpec, generate_synthetic, make_splits
from .train import TrainConfig, evaluate, train_loop

log = logging.getLogger(__name__)


@dataclass
class OrderingSetup:
    geometry: tuple = (32, 16, 16, 16)
    train_per_class: int = 60
    test_per_class: int = 30
    noise_sigma: float = 1.0
    seeds: tuple = (0, 1, 2)
    stage_channels: tuple = (4, 8, 8, 16)
    lstm_hidden: int = 16
    epochs: int = 20
    batch_size: int = 4
    lr_max: float = 2e-3
    weight_decay: float = 1e-4
    # a dozen smaller blobs so every sample carries many copies of its class
    # pattern; with a single blob the trunk memorizes blob position instead
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        blobs=12, blob_sigma=1.5, mod_bin=8, drift_voxels=9.0, margin=3.0))

    def model_config(self, num_classes=3):
        c = tuple(self.stage_channels)
        return ModelConfig(stage_channels=c, stem_channels=c[0], final_channels=c[-1],
                           num_classes=num_classes, lstm_hidden=self.lstm_hidden,
                           input_geometry=tuple(self.geometry))

    def train_config(self, seed, augment=True):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr_max,
                           weight_decay=self.weight_decay, augment=augment, seed=seed)

    def dataset(self, seed):
        spec = SyntheticSpec(**{**asdict(self.synthetic), "geometry": tuple(self.geometry)})
        data = generate_synthetic(spec, classes=3,
                                  samples_per_class=self.train_per_class + self.test_per_class,
                                  noise_sigma=self.noise_sigma, seed=1000 + seed)
        plan = make_splits(data.samples, self.test_per_class, k=1, seed=seed)
        return data, plan


def run_ordering(setup: OrderingSetup, kinds=MODEL_KINDS, progress=None, on_model=None):
    """Train every model kind on every seed; return rows of
    ``{"seed", "model", "accuracy", "sensitivity", "specificity", "seconds"}``.

    ``on_model(seed, model, data, plan)`` sees every trained model.
    """
    rows = []
    for seed in setup.seeds:
        data, plan = setup.dataset(seed)
        for kind in kinds:
            start = time.time()
            model = build_model(kind, setup.model_config(), seed=seed)
            train_loop(model, data, plan, setup.train_config(seed))
            rep = evaluate(model, data, plan.test)
            row = {"seed": seed, "model": kind, "accuracy": rep.accuracy,
                   "sensitivity": rep.sensitivity, "specificity": rep.specificity,
                   "seconds": time.time() - start}
            rows.append(row)
            log.info("%s", row)
            if on_model:
                on_model(seed, model, data, plan)
            if progress:
                progress(row)
    return rows


def mean_accuracy(rows):
    out = {}
    for kind in dict.fromkeys(r["model"] for r in rows):
        out[kind] = float(np.mean([r["accuracy"] for r in rows if r["model"] == kind]))
    return out


def format_rows(rows):
    lines = [f"{'seed':>4}  {'model':<8} {'acc':>6} {'sens':>6} {'spec':>6} {'sec':>7}"]
    for r in rows:
        lines.append(f"{r['seed']:>4}  {r['model']:<8} {r['accuracy']:6.3f} "
                     f"{r['sensitivity']:6.3f} {r['specificity']:6.3f} {r['seconds']:7.1f}")
    return "\n".join(lines)


def run_augmentation(setup: OrderingSetup, seeds=None, progress=None, trained=None):
    """Model A trained with and without circular-shift augmentation, tested
    on the original and on T/2-shifted test volumes.

    ``trained`` maps seed to an already trained augmented Model A, which is
    then reused instead of training it again.
    """
    rows = []
    trained = trained or {}
    shift = setup.geometry[0] // 2
    for seed in (setup.seeds if seeds is None else seeds):
        data, plan = setup.dataset(seed)
        for augment in (True, False):
            if augment and seed in trained:
                model = trained[seed]
            else:
                model = build_model("4d", setup.model_config(), seed=seed)
                train_loop(model, data, plan, setup.train_config(seed, augment=augment))
            plain = evaluate(model, data, plan.test).accuracy
            shifted = evaluate(model, data, plan.test, shift=shift).accuracy
            row = {"seed": seed, "augment": augment, "accuracy": plain,
                   "shifted_accuracy": shifted, "drop": plain - shifted}
            rows.append(row)
            if progress:
                progress(row)
    return rows
