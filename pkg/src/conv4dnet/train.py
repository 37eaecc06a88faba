"""Weighted cross-entropy, AdamW, cosine decay, the training loop and
accuracy / sensitivity / specificity reporting."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .nn import log_softmax, softmax
from .pipeline import Dataset, SplitPlan, circular_time_shift

log = logging.getLogger(__name__)

PAPER_CLASS_WEIGHTS = (959 / 602, 959 / 210, 959 / 147)


@dataclass
class LossSpec:
    class_weights: tuple = PAPER_CLASS_WEIGHTS

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if any(w <= 0 for w in self.class_weights):
            raise ConfigError("class weights must be positive")

    @classmethod
    def inverse_frequency(cls, counts):
        """w_c = total / count_c."""
        total = sum(counts)
        if any(c == 0 for c in counts):
            raise ConfigError(f"a class has no training samples: {counts}")
        return cls(tuple(total / c for c in counts))

    @classmethod
    def uniform(cls, num_classes):
        return cls((1.0,) * num_classes)


def weighted_cross_entropy(logits, labels, weights):
    """Weighted mean of per-sample NLL: sum_n w[y_n] * nll_n / sum_n w[y_n].

    Returns ``(loss, grad_logits)``.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise RangeError(f"labels must lie in [0, {k})")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ShapeError(f"need {k} class weights, got {weights.shape}")
    x = logits.astype(np.float64)
    logp = log_softmax(x)
    rows = np.arange(n)
    w = weights[labels]
    norm = w.sum()
    loss = float(-(w * logp[rows, labels]).sum() / norm)
    grad = softmax(x)
    grad[rows, labels] -= 1.0
    grad *= (w / norm)[:, None]
    return loss, grad.astype(logits.dtype)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self):
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay")}


def adamw_step(state: OptimizerState, params: dict, grads: dict, lr=None):
    """One Adam step with decoupled weight decay, updating ``params`` and
    ``state`` in place (both are also returned)."""
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype)
    return params, state


@dataclass
class ScheduleSpec:
    lr_max: float = 1e-3
    lr_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")


def cosine_lr(schedule: ScheduleSpec, t):
    t = min(max(t, 0), schedule.total_steps)
    lo, hi = schedule.lr_min, schedule.lr_max
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * t / schedule.total_steps))


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: list  # rows = true class, columns = predicted class
    accuracy: float
    sensitivity: float
    specificity: float
    per_class_sensitivity: list
    per_class_specificity: list
    class_names: list = None

    def to_dict(self):
        return asdict(self)

    def table(self):
        names = self.class_names or [str(i) for i in range(len(self.confusion))]
        width = max(8, *(len(n) for n in names))
        lines = [f"{'accuracy':<12}{self.accuracy:.4f}",
                 f"{'sensitivity':<12}{self.sensitivity:.4f}",
                 f"{'specificity':<12}{self.specificity:.4f}",
                 "",
                 "true \\ pred".ljust(width + 2) + "".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.confusion):
            lines.append(name.ljust(width + 2) + "".join(str(v).rjust(width) for v in row))
        return "\n".join(lines)


def confusion_matrix(y_true, y_pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def report_from_confusion(cm, class_names=None) -> EvalReport:
    """Binary: class 1 (disease) positive, class 0 (CN) negative.
    Multi-class: macro averages of one-vs-rest sensitivity/specificity."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise RangeError("empty test set")
    k = cm.shape[0]
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        spec = np.where(tn + fp > 0, tn / (tn + fp), 0.0)
    if k == 2:
        sensitivity, specificity = sens[1], spec[1]
    else:
        sensitivity, specificity = sens.mean(), spec.mean()
    return EvalReport(cm.tolist(), float(np.trace(cm) / total), float(sensitivity),
                      float(specificity), sens.tolist(), spec.tolist(),
                      list(class_names) if class_names else None)


def predict(model, x, batch_size=4):
    logits = [model.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(logits)


def evaluate(model, dataset: Dataset, indices=None, batch_size=4, shift=0) -> EvalReport:
    """Confusion-matrix metrics of ``model`` on ``dataset[indices]``;
    ``shift`` circularly shifts every test volume in time first."""
    if model.config.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {model.config.num_classes} classes, "
                          f"dataset has {dataset.num_classes}")
    idx = list(range(len(dataset))) if indices is None else list(indices)
    if not idx:
        raise RangeError("empty test set")
    x, y = dataset.stack(idx)
    if shift:
        x = circular_time_shift(x, shift)
    pred = predict(model, x, batch_size).argmax(axis=1)
    cm = confusion_matrix(y, pred, dataset.num_classes)
    return report_from_confusion(cm, dataset.class_names)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    augment: bool = True
    fold: int = 0
    class_weights: tuple = None  # None: inverse training frequency
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    log: list
    best_epoch: int
    optimizer: OptimizerState


def train_loop(model, dataset: Dataset, splits: SplitPlan, config: TrainConfig,
               loss_spec: LossSpec | None = None, train_indices=None, progress=None) -> TrainResult:
    """Train ``model`` in place; return the best-validation parameters.

    With at least two folds, ``splits.folds[config.fold]`` is held out for
    validation and the epoch with the best validation accuracy is kept.
    Without folds the final epoch is kept. Every training sample gets a fresh
    uniform circular time shift each epoch when ``config.augment`` is set.
    """
    if tuple(dataset.geometry) != tuple(model.config.input_geometry):
        raise ConfigError(f"data geometry {dataset.geometry} does not match model "
                          f"geometry {model.config.input_geometry}")
    if model.config.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {model.config.num_classes} classes, "
                          f"dataset has {dataset.num_classes}")
    if train_indices is None:
        train_idx, val_idx = splits.fold_split(config.fold)
    else:
        train_idx, val_idx = list(train_indices), []
    if not train_idx:
        raise RangeError("no training samples")
    if loss_spec is None:
        loss_spec = (LossSpec(config.class_weights) if config.class_weights
                     else LossSpec.inverse_frequency(dataset.class_counts(train_idx)))
    rng = np.random.default_rng(config.seed)
    x_all, y_all = dataset.stack(train_idx)
    n = len(train_idx)
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = ScheduleSpec(config.lr_max, config.lr_min, config.epochs * steps_per_epoch)
    opt = OptimizerState(lr=config.lr_max, weight_decay=config.weight_decay)
    t_len = x_all.shape[2]

    history = []
    best = (-1.0, 0, copy.deepcopy(model.params))
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        shifts = rng.integers(0, t_len, size=n) if config.augment else np.zeros(n, dtype=int)
        loss_sum = weight_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            xb = np.stack([circular_time_shift(x_all[i], shifts[i]) for i in batch])
            yb = y_all[batch]
            logits, cache = model.forward(xb)
            loss, g = weighted_cross_entropy(logits, yb, loss_spec.class_weights)
            grads = model.backward(cache, g)
            adamw_step(opt, model.params, grads, lr=cosine_lr(schedule, step))
            step += 1
            bw = float(np.asarray(loss_spec.class_weights)[yb].sum())
            loss_sum += loss * bw
            weight_sum += bw
            correct += int((logits.argmax(axis=1) == yb).sum())
        entry = {"epoch": epoch, "lr": cosine_lr(schedule, step),
                 "train_loss": loss_sum / weight_sum, "train_acc": correct / n}
        if val_idx:
            rep = evaluate(model, dataset, val_idx)
            entry["val_acc"] = rep.accuracy
            if rep.accuracy > best[0]:
                best = (rep.accuracy, epoch, copy.deepcopy(model.params))
        history.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if progress:
            progress(entry)
    if val_idx:
        model.params = best[2]
        best_epoch = best[1]
    else:
        best_epoch = config.epochs
    return TrainResult(model.params, history, best_epoch, opt)
