"""Occlusion importance curves, the frequency-range sweep and data-form comparisons.

Temporal importance keeps one short window of spectrogram time columns,
zeroes everything else and asks a pre-trained model to classify the result;
frequency importance does the same with a single frequency map.  Masking
always works on copies of each evaluation chunk, never on the source arrays.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidConfig
from .mst import SpectrogramSet
from .network import EncoderConfig, ModelParams
from .trainer import TrainConfig, evaluate, kfold_split, train

DEFAULT_WINDOW = 5
DEFAULT_THRESHOLD_MARGIN = 0.1

FORM_MODES = {
    "amp_angle_parallel": "amp+angle",
    "real_imag_parallel": "real+imag",
    "real_only": "real",
    "imag_only": "imag",
    "amp_only": "amp",
}


@dataclass
class ImportanceCurve:
    axis: str
    index: np.ndarray
    accuracy: np.ndarray
    baseline_accuracy: float
    chance: float
    window: int = 1
    stride: int = 1
    threshold: float | None = None

    def __post_init__(self) -> None:
        self.index = np.asarray(self.index)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.axis not in ("time", "frequency"):
            raise InvalidConfig(f"axis must be 'time' or 'frequency', got {self.axis!r}")
        if len(self.index) != len(self.accuracy):
            raise InvalidConfig("index and accuracy lengths differ")
        if len(self.index) > 1 and np.any(np.diff(self.index) <= 0):
            raise InvalidConfig("index must be strictly increasing")
        if self.threshold is None:
            self.threshold = self.chance + DEFAULT_THRESHOLD_MARGIN

    def __len__(self) -> int:
        return len(self.index)

    def first_above(self, threshold: float | None = None):
        """Smallest index whose accuracy exceeds ``threshold`` (default chance + 0.1)."""
        thr = self.threshold if threshold is None else threshold
        hits = np.flatnonzero(self.accuracy > thr)
        return None if len(hits) == 0 else self.index[hits[0]]

    def to_csv(self, path: str | Path) -> None:
        col = "start_sample" if self.axis == "time" else "frequency_hz"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([col, "accuracy"])
            for i, a in zip(self.index, self.accuracy):
                w.writerow([_fmt_index(i), f"{a:.6f}"])

    def to_svg(self, path: str | Path, title: str | None = None) -> None:
        xlabel = "window start (samples)" if self.axis == "time" else "retained frequency (Hz)"
        if title is None:
            title = f"{self.axis} importance (window {self.window}, stride {self.stride})"
        write_line_svg(
            path, self.index, self.accuracy, xlabel, "accuracy", title,
            refs={"baseline": self.baseline_accuracy, "chance": self.chance},
        )

    def summary(self) -> dict:
        return {
            "axis": self.axis,
            "window": self.window,
            "stride": self.stride,
            "baseline_accuracy": self.baseline_accuracy,
            "chance": self.chance,
            "threshold": self.threshold,
            "first_above_threshold": _json_scalar(self.first_above()),
            "n_points": len(self),
        }


def _fmt_index(i) -> str:
    f = float(i)
    return str(int(f)) if f.is_integer() else f"{f:g}"


def _json_scalar(v):
    if v is None:
        return None
    return float(v) if not float(v).is_integer() else int(v)


def keep_time_window(inputs: Sequence[np.ndarray], start: int, stop: int) -> tuple[np.ndarray, ...]:
    """Copies of ``inputs`` ([B, F, C, T] each) with time columns outside [start, stop) zeroed."""
    out = []
    for x in inputs:
        y = np.zeros_like(x)
        y[..., start:stop] = x[..., start:stop]
        out.append(y)
    return tuple(out)


def keep_frequency(inputs: Sequence[np.ndarray], idx: int) -> tuple[np.ndarray, ...]:
    """Copies with every frequency map except ``idx`` zeroed."""
    out = []
    for x in inputs:
        y = np.zeros_like(x)
        y[:, idx] = x[:, idx]
        out.append(y)
    return tuple(out)


def window_starts(n_time: int, window: int = DEFAULT_WINDOW, stride: int = 1) -> np.ndarray:
    """Window starts 0, stride, ... up to and including ``n_time - window``."""
    if window < 1 or window > n_time:
        raise InvalidConfig(f"window {window} must lie in [1, {n_time}]")
    if stride < 1:
        raise InvalidConfig("stride must be >= 1")
    return np.arange(0, n_time - window + 1, stride)


def temporal_importance(
    model: ModelParams,
    inputs: Sequence[np.ndarray],
    labels,
    window: int = DEFAULT_WINDOW,
    stride: int = 1,
    batch_size: int = 64,
    threshold: float | None = None,
) -> ImportanceCurve:
    n_time = inputs[0].shape[-1]
    baseline = evaluate(model, inputs, labels, batch_size).accuracy
    starts = window_starts(n_time, window, stride)
    acc = [
        evaluate(model, inputs, labels, batch_size, lambda c, s=s: keep_time_window(c, s, s + window)).accuracy
        for s in starts
    ]
    return ImportanceCurve("time", starts, acc, baseline, 1.0 / model.n_classes, window, stride, threshold)


def frequency_importance(
    model: ModelParams,
    inputs: Sequence[np.ndarray],
    labels,
    freq_grid_hz,
    batch_size: int = 64,
    threshold: float | None = None,
) -> ImportanceCurve:
    grid = np.asarray(freq_grid_hz)
    if len(grid) != inputs[0].shape[1]:
        raise InvalidConfig("frequency grid length does not match the inputs")
    baseline = evaluate(model, inputs, labels, batch_size).accuracy
    acc = [
        evaluate(model, inputs, labels, batch_size, lambda c, i=i: keep_frequency(c, i)).accuracy
        for i in range(len(grid))
    ]
    return ImportanceCurve("frequency", grid, acc, baseline, 1.0 / model.n_classes, 1, 1, threshold)


def model_config_for(ss: SpectrogramSet, **overrides) -> EncoderConfig:
    f, c, t = ss.dims
    return EncoderConfig(n_freq=f, n_channels=c, n_time=t, **overrides)


@dataclass
class SweepRow:
    f_hi_hz: float
    n_freq: int
    mean_accuracy: float
    std_accuracy: float
    seconds: float
    accuracies: list[float] = field(default_factory=list)


def frequency_range_sweep(
    ss: SpectrogramSet,
    f_his: Sequence[float],
    train_cfg: TrainConfig,
    form: str = "real",
    f_lo_hz: float | None = None,
    **encoder_overrides,
) -> list[SweepRow]:
    """Retrain a single-encoder model on ``[f_lo, f_hi]`` for every ``f_hi``.

    All ranges share one stratified split.
    """
    if "+" in form:
        raise InvalidConfig("the sweep trains a single encoder; pick one data form")
    f_lo = float(ss.freq_grid_hz[0]) if f_lo_hz is None else f_lo_hz
    splits = kfold_split(ss.labels, train_cfg.folds, train_cfg.seed)
    rows = []
    for f_hi in f_his:
        t0 = time.perf_counter()
        sub = ss.crop(f_lo, f_hi)
        cfg = model_config_for(sub, **encoder_overrides)
        res = train(sub.features(form), sub.labels, cfg, train_cfg, ss.n_classes, (form,), splits)
        rows.append(
            SweepRow(float(f_hi), sub.dims[0], res.mean_accuracy, res.std_accuracy,
                     time.perf_counter() - t0, res.accuracies.tolist())
        )
    return rows


@dataclass
class FormResult:
    mode: str
    form: str
    mean_accuracy: float
    std_accuracy: float
    accuracies: list[float]


def compare_forms(
    ss: SpectrogramSet,
    train_cfg: TrainConfig,
    modes: Sequence[str] = tuple(FORM_MODES),
    **encoder_overrides,
) -> dict[str, FormResult]:
    """Cross-validated accuracy per data form, every mode on the same split and seed."""
    unknown = [m for m in modes if m not in FORM_MODES]
    if unknown:
        raise InvalidConfig(f"unknown modes {unknown}; choose from {list(FORM_MODES)}")
    splits = kfold_split(ss.labels, train_cfg.folds, train_cfg.seed)
    cfg = model_config_for(ss, **encoder_overrides)
    out = {}
    for mode in modes:
        form = FORM_MODES[mode]
        res = train(ss.features(form), ss.labels, cfg, train_cfg, ss.n_classes, tuple(form.split("+")), splits)
        out[mode] = FormResult(mode, form, res.mean_accuracy, res.std_accuracy, res.accuracies.tolist())
    return out


def write_line_svg(path, x, y, xlabel: str, ylabel: str, title: str, refs: dict[str, float] | None = None) -> None:
    """Self-contained, byte-reproducible SVG line plot with horizontal reference lines."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "mstdecode", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(np.asarray(x, dtype=float), np.asarray(y, dtype=float), color="C0", lw=1.5, label=ylabel)
        styles = ["--", ":", "-."]
        for i, (name, val) in enumerate((refs or {}).items()):
            ax.axhline(val, ls=styles[i % len(styles)], color="0.4", lw=1, label=f"{name} {val:.3f}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
