"""Adam, stratified k-fold splitting, the training loop and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidConfig, TooFewTrials
from .network import Batch, EncoderConfig, ModelParams, init_model, loss_and_grads, predict_logits, update_running_stats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    folds: int = 5
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidConfig("beta1 and beta2 must lie in (0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")
        if self.folds < 2:
            raise InvalidConfig("folds must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, t: int | None = None):
    """One in-place Adam update with L2 weight decay folded into the gradient.

    ``t`` defaults to ``state.t + 1``.  Returns ``(params, state)``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise InvalidConfig("Adam step index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, theta in params.items():
        g = grads[k]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        if k not in state.m:
            state.m[k] = np.zeros_like(theta)
            state.v[k] = np.zeros_like(theta)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    state.t = t
    return params, state


def kfold_split(labels, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold partition of trial indices.

    Each class is shuffled and dealt round-robin over the folds, starting
    where the previous class stopped so fold sizes stay within one trial.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise InvalidConfig("k must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    start = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise TooFewTrials(f"class {cls} has {len(idx)} trials, need >= {k}")
        idx = rng.permutation(idx)
        fold_of[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    everything = np.arange(len(labels))
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray


def evaluate_logits(logits, labels, n_classes: int) -> EvalResult:
    labels = np.asarray(labels)
    pred = np.argmax(logits, axis=1) if len(labels) else np.zeros(0, dtype=np.int64)  # ties -> lowest index
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return EvalResult(acc, conf, pred)


def evaluate(m: ModelParams, inputs: Sequence[np.ndarray], labels, batch_size: int = 64, transform=None) -> EvalResult:
    """Eval-mode accuracy and confusion matrix (rows true class, columns predicted)."""
    logits = predict_logits(m, inputs, batch_size, transform)
    return evaluate_logits(logits, labels, m.n_classes)


@dataclass
class FoldReport:
    fold_id: int
    train_loss_curve: list[float]
    val_accuracy: float
    confusion: list[list[int]]
    n_train: int = 0
    n_val: int = 0
    steps: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def fit(
    inputs: Sequence[np.ndarray],
    labels,
    model_cfg: EncoderConfig,
    cfg: TrainConfig,
    n_classes: int,
    encoders: Sequence[str],
    rng: np.random.Generator,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[ModelParams, list[float], int]:
    """Train one model from scratch.  Returns (model, per-epoch mean loss, optimizer steps)."""
    labels = np.asarray(labels)
    dtype = np.dtype(cfg.dtype)
    model = init_model(model_cfg, n_classes, encoders, seed=cfg.seed, dtype=dtype, rng=rng)
    state = AdamState()
    n = len(labels)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            batch = Batch(tuple(np.asarray(x[idx], dtype=dtype) for x in inputs), labels[idx])
            loss, grads, cache = loss_and_grads(model, batch)
            update_running_stats(model, cache)
            adam_step(model.params, grads, state, cfg)
            total += loss * len(idx)
        curve.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return model, curve, state.t


@dataclass
class CVResult:
    reports: list[FoldReport]
    models: list[ModelParams]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.val_accuracy for r in self.reports])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        return float(self.accuracies.std())


def worker_count() -> int:
    env = os.environ.get("MSTDECODE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfig(f"MSTDECODE_THREADS must be an integer, got {env!r}") from None
    return 1


def train(
    inputs: Sequence[np.ndarray],
    labels,
    model_cfg: EncoderConfig,
    cfg: TrainConfig,
    n_classes: int,
    encoders: Sequence[str] = ("real", "imag"),
    splits: list[tuple[np.ndarray, np.ndarray]] | None = None,
    max_workers: int | None = None,
) -> CVResult:
    """Stratified k-fold cross-validation.

    Every fold draws its initialization and batch order from its own child of
    ``SeedSequence(cfg.seed)``, so results do not depend on how folds are
    scheduled across workers.
    """
    labels = np.asarray(labels)
    if splits is None:
        splits = kfold_split(labels, cfg.folds, cfg.seed)
    children = np.random.SeedSequence(cfg.seed).spawn(len(splits))

    def run(i: int):
        tr, va = splits[i]
        rng = np.random.default_rng(children[i])
        model, curve, steps = fit(
            [x[tr] for x in inputs], labels[tr], model_cfg, cfg, n_classes, encoders, rng
        )
        res = evaluate(model, [x[va] for x in inputs], labels[va])
        log.info("fold %d: accuracy %.4f, final loss %.4f", i, res.accuracy, curve[-1])
        rep = FoldReport(i, curve, res.accuracy, res.confusion.tolist(), len(tr), len(va), steps)
        return rep, model

    workers = max_workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(splits))))
    else:
        results = [run(i) for i in range(len(splits))]
    return CVResult([r for r, _ in results], [m for _, m in results])


def write_fold_csv(result: CVResult, path: str | Path) -> None:
    """Columns fold,accuracy,loss_final; a closing ``mean±std`` row summarizes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "accuracy", "loss_final"])
        for r in result.reports:
            w.writerow([r.fold_id, f"{r.val_accuracy:.6f}", f"{r.train_loss_curve[-1]:.6f}"])
        losses = np.array([r.train_loss_curve[-1] for r in result.reports])
        w.writerow(["mean±std", f"{result.mean_accuracy:.6f}±{result.std_accuracy:.6f}", f"{losses.mean():.6f}"])

