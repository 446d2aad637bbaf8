"""Training with early stopping, evaluation metrics, fine-tuning and architecture sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import complexity
from .nn import Adam, NetworkParams, NetworkSpec, NonFiniteLossError, backward, init_params, baseline_spec
from .nn.layers import BN_MOMENTUM, update_moving_stats
from .nn.network import Model

log = logging.getLogger(__name__)

LOGLOSS_CLIP = 1e-15


@dataclass
class Dataset:
    x: np.ndarray  # (N, H, W, C) float32
    y: np.ndarray  # (N,) int class indices

    def __post_init__(self):
        if self.x.ndim == 3:
            self.x = self.x[..., None]
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Split:
    train: Dataset
    val: Dataset


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 20
    bn_momentum: float = BN_MOMENTUM
    seeds: tuple[int, ...] = (0,)
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError("bn_momentum must lie in [0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        self.seeds = tuple(self.seeds)


@dataclass
class MetricsRecord:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_logloss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    diverged: bool = False

    @property
    def epochs(self) -> int:
        return len(self.val_logloss)

    @property
    def best_logloss(self) -> float:
        return self.val_logloss[self.best_epoch - 1] if self.best_epoch else math.inf

    @property
    def best_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch - 1] if self.best_epoch else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_accuracy", "val_logloss", "best"])
            for e, row in enumerate(zip(self.train_loss, self.val_accuracy, self.val_logloss), start=1):
                w.writerow([e, *(f"{v:.6f}" for v in row), int(e == self.best_epoch)])


@dataclass
class Evaluation:
    accuracy: float
    logloss: float
    confusion: np.ndarray

    def confusion_csv(self, labels: list[str] | None = None) -> str:
        k = self.confusion.shape[0]
        labels = labels or [str(i) for i in range(k)]
        lines = ["true\\pred," + ",".join(labels[:k])]
        for i in range(k):
            lines.append(labels[i] + "," + ",".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"


class Predictor(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


def metrics_from_probabilities(probs: np.ndarray, labels: np.ndarray) -> Evaluation:
    """Accuracy in percent, mean clipped cross-entropy (natural log), confusion counts."""
    probs, labels = np.asarray(probs, dtype=np.float64), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    p_true = np.clip(probs[np.arange(len(labels)), labels], LOGLOSS_CLIP, 1.0)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return Evaluation(100.0 * float(np.mean(pred == labels)), float(-np.mean(np.log(p_true))), confusion)


def evaluate(model: Predictor, data: Dataset) -> Evaluation:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return metrics_from_probabilities(model.predict(data.x), data.y)


def train(spec: NetworkSpec, data: Split, config: TrainConfig, params: NetworkParams | None = None,
          seed: int | None = None) -> tuple[NetworkParams, MetricsRecord]:
    """Adam on mean cross-entropy; keeps the weights with the lowest validation log-loss.

    Stops after ``config.patience`` epochs without improvement, at
    ``config.max_epochs``, or when the loss stops being finite.  ``params``
    (e.g. a pruned network) is the starting point; otherwise weights are
    initialised from ``seed`` (default ``config.seeds[0]``).
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    seed = config.seeds[0] if seed is None else seed
    params = init_params(spec, seed) if params is None else params.copy()
    params.check(spec)
    best = params.copy()
    record = MetricsRecord()
    optimizer = Adam(config.lr, config.beta1, config.beta2, config.epsilon)
    rng = np.random.default_rng(config.shuffle_seed)
    n = len(data.train)
    waited = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                g = backward(spec, params, data.train.x[idx], data.train.y[idx])
                optimizer.step(params, g.grads)
                for layer, (mean, var) in g.batch_stats.items():
                    update_moving_stats(params.tensors[layer], mean, var, config.bn_momentum)
                losses.append(g.loss * len(idx))
        except (NonFiniteLossError, FloatingPointError) as exc:
            log.warning("epoch %d: training diverged (%s); keeping epoch %d weights", epoch, exc,
                        record.best_epoch)
            record.diverged = True
            break
        ev = evaluate(Model(spec, params), data.val)
        record.train_loss.append(sum(losses) / n)
        record.val_accuracy.append(ev.accuracy)
        record.val_logloss.append(ev.logloss)
        log.info("epoch %d: train loss %.4f, val acc %.2f%%, val log-loss %.4f",
                 epoch, record.train_loss[-1], ev.accuracy, ev.logloss)
        if not math.isfinite(ev.logloss):
            record.diverged = True
            break
        if ev.logloss < record.best_logloss:
            record.best_epoch = epoch
            best = params.copy()
            waited = 0
        else:
            waited += 1
            if waited >= config.patience:
                break
    return best, record


def finetune(spec: NetworkSpec, params: NetworkParams, data: Split,
             config: TrainConfig) -> tuple[NetworkParams, MetricsRecord]:
    """Continue training from existing (typically freshly pruned) weights."""
    return train(spec, data, config, params=params)


@dataclass(frozen=True)
class SweepPoint:
    kernel: int
    activations: str  # one letter per C1, C2, C3, D

    @property
    def config_id(self) -> str:
        return f"k{self.kernel}-{self.activations}"


def build_grid(kernels=(1, 3, 5, 7), activations: list[str] | None = None) -> list[SweepPoint]:
    if activations is None:
        activations = ["".join(p) for p in itertools.product("TR", repeat=4)]
    return [SweepPoint(k, a) for k in kernels for a in activations]


SWEEP_FIELDS = ["config_id", "kernel", "activations", "seed", "accuracy", "logloss",
                "params", "macs", "epochs", "error"]


def _sweep_job(args) -> dict:
    point, seed, data, config, widths, input_shape, classes = args
    row = {"config_id": point.config_id, "kernel": point.kernel, "activations": point.activations,
           "seed": seed, "accuracy": "", "logloss": "", "params": "", "macs": "", "epochs": "", "error": ""}
    try:
        spec = baseline_spec(*widths, kernel=point.kernel, activations=point.activations,
                           input_shape=input_shape, classes=classes)
        row["params"] = complexity.count_params(spec)
        row["macs"] = complexity.count_macs(spec)
        _, rec = train(spec, data, config, seed=seed)
        row.update(accuracy=rec.best_accuracy, logloss=rec.best_logloss, epochs=rec.epochs)
    except Exception as exc:  # one failing configuration must not stop the sweep
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_sweep(points: list[SweepPoint], data: Split, config: TrainConfig,
              widths=(16, 16, 32, 100), input_shape=None, classes: int | None = None,
              jobs: int = 1) -> list[dict]:
    """One row per (point, seed), then one ``seed="mean"`` summary row per point.

    Rows come back in grid order regardless of which worker finishes first.
    """
    input_shape = input_shape or tuple(data.train.x.shape[1:])
    classes = classes or int(max(data.train.y.max(), data.val.y.max()) + 1)
    tasks = [(p, s, data, config, tuple(widths), input_shape, classes) for p in points for s in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, tasks))
    else:
        rows = [_sweep_job(t) for t in tasks]
    summary = []
    for p in points:
        runs = [r for r in rows if r["config_id"] == p.config_id and not r["error"]]
        mean = {"config_id": p.config_id, "kernel": p.kernel, "activations": p.activations, "seed": "mean",
                "accuracy": "", "logloss": "", "params": "", "macs": "", "epochs": "",
                "error": "" if runs else "no successful runs"}
        if runs:
            mean.update(accuracy=float(np.mean([r["accuracy"] for r in runs])),
                        logloss=float(np.mean([r["logloss"] for r in runs])),
                        params=runs[0]["params"], macs=runs[0]["macs"],
                        epochs=float(np.mean([r["epochs"] for r in runs])))
        summary.append(mean)
    return rows + summary


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)


def make_toy_dataset(classes: int = 4, per_class: int = 200, shape=(40, 51), noise: float = 0.3,
                     val_fraction: float = 0.25, seed: int = 0) -> Split:
    """Synthetic stand-in for log-mel inputs: a Gaussian bump at a class-specific
    (mel, frame) location plus white noise, with a little positional jitter."""
    rng = np.random.default_rng(seed)
    h, w = shape
    # class centres spread over a grid
    cols = math.ceil(math.sqrt(classes))
    rows_ = math.ceil(classes / cols)
    centres = [((r + 0.5) * h / rows_, (c + 0.5) * w / cols)
               for r in range(rows_) for c in range(cols)][:classes]
    yy, xx = np.mgrid[0:h, 0:w]
    xs, ys = [], []
    for k, (cy, cx) in enumerate(centres):
        for _ in range(per_class):
            jy, jx = rng.normal(0, 1.0, size=2)
            bump = np.exp(-((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / (2 * 3.0 ** 2))
            xs.append(bump + rng.normal(0, noise, size=shape))
            ys.append(k)
    x = np.asarray(xs, dtype=np.float32)[..., None]
    y = np.asarray(ys, dtype=np.int64)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_val = int(round(len(y) * val_fraction))
    return Split(Dataset(x[n_val:], y[n_val:]), Dataset(x[:n_val], y[:n_val]))
