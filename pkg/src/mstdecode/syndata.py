"""Synthetic multi-channel recordings with planted class structure.

Class ``k`` owns a unit spatial pattern ``p_k``, a carrier ``f_k`` and a
phase ``phi_k``.  An active segment of class ``k`` is::

    x[c, t] = A * p_k[c] * sin(2*pi*f_k*(t - L)/fs + phi_k)   for t >= L
    x[c, t] = 0                                               for t <  L

plus white noise; the background segment is noise only.  All ground truth
goes into ``LabeledDataset.meta`` and therefore into the sidecar file.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidConfig
from .signal_core import ChannelTimeMatrix, LabeledDataset, Trial, default_class_names


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 6
    trials_per_class: int = 20
    n_channels: int = 128
    n_time: int = 300
    sample_rate_hz: float = 1000.0
    onset_ms: float = 50.0
    carrier_hz: tuple[float, ...] | None = None
    snr_db: float = 10.0
    phase_coded: bool = False
    phase_offset_rad: float = math.pi
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise InvalidConfig("n_classes must be >= 2")
        if self.trials_per_class < 0:
            raise InvalidConfig("trials_per_class must be >= 0")
        if self.n_channels < 1 or self.n_time < 1:
            raise InvalidConfig("n_channels and n_time must be positive")
        if not self.sample_rate_hz > 0:
            raise InvalidConfig("sample_rate_hz must be positive")
        if not 0 <= self.onset_samples < self.n_time:
            raise InvalidConfig(f"onset {self.onset_ms} ms falls outside the {self.n_time}-sample segment")
        carriers = self.carriers
        if len(carriers) != self.n_classes:
            raise InvalidConfig(f"{len(carriers)} carriers for {self.n_classes} classes")
        if any(not 0 < f < self.sample_rate_hz / 2 for f in carriers):
            raise InvalidConfig("carriers must lie strictly between 0 and Nyquist")
        distinct = carriers[1:] if self.phase_coded else carriers
        if len(set(distinct)) != len(distinct):
            raise InvalidConfig(f"carriers must be distinct per class, got {carriers}")
        if math.isnan(self.snr_db):
            raise InvalidConfig("snr_db is NaN")

    @property
    def onset_samples(self) -> int:
        return int(round(self.onset_ms * self.sample_rate_hz / 1000.0))

    @property
    def carriers(self) -> tuple[float, ...]:
        """Per-class carriers; in phase-coded mode class 1 reuses class 0's."""
        if self.carrier_hz is None:
            base = tuple(8.0 + 4.0 * k for k in range(self.n_classes))
        else:
            base = tuple(float(f) for f in self.carrier_hz)
        if self.phase_coded and len(base) >= 2:
            base = (base[0], base[0]) + base[2:]
        return base

    @property
    def noise_std(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        signal_power = self.amplitude**2 / 2.0 / self.n_channels
        return math.sqrt(signal_power / 10 ** (self.snr_db / 10.0))


def spatial_patterns(n_classes: int, n_channels: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm patterns [K, C]; orthonormal whenever K <= C."""
    raw = rng.standard_normal((n_channels, n_classes))
    if n_classes <= n_channels:
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return (raw / np.linalg.norm(raw, axis=0)).T.copy()


def planted_signal(cfg: SynthConfig, pattern: np.ndarray, carrier: float, phase: float) -> np.ndarray:
    t = np.arange(cfg.n_time)
    lag = t - cfg.onset_samples
    wave = np.where(lag >= 0, np.sin(2 * np.pi * carrier * lag / cfg.sample_rate_hz + phase), 0.0)
    return cfg.amplitude * np.outer(pattern, wave)


def ground_truth(cfg: SynthConfig) -> dict:
    ss_pattern, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(ss_pattern)
    patterns = spatial_patterns(cfg.n_classes, cfg.n_channels, rng)
    phases = rng.uniform(0.0, 2 * np.pi, size=cfg.n_classes)
    if cfg.phase_coded:
        patterns[1] = patterns[0]
        phases[1] = phases[0] + cfg.phase_offset_rad
    return {"patterns": patterns, "carriers": np.array(cfg.carriers), "phases": phases}


def _f32(a: np.ndarray) -> np.ndarray:
    # Keep in-memory values equal to what the dataset file stores.
    return a.astype(np.float32).astype(np.float64)


def generate(cfg: SynthConfig) -> LabeledDataset:
    """Draw a dataset.  Trial ``i`` has label ``i % n_classes`` and its own
    noise stream derived from ``(seed, i)``."""
    truth = ground_truth(cfg)
    _, ss_trials = np.random.SeedSequence(cfg.seed).spawn(2)
    n_trials = cfg.n_classes * cfg.trials_per_class
    sigma = cfg.noise_std
    clean = [
        planted_signal(cfg, truth["patterns"][k], truth["carriers"][k], truth["phases"][k])
        for k in range(cfg.n_classes)
    ]
    trials = []
    for i, child in enumerate(ss_trials.spawn(n_trials)):
        label = i % cfg.n_classes
        rng = np.random.default_rng(child)
        noise = rng.standard_normal((2, cfg.n_channels, cfg.n_time)) * sigma
        active = _f32(clean[label] + noise[0])
        background = _f32(noise[1])
        trials.append(
            Trial(
                ChannelTimeMatrix(active, cfg.sample_rate_hz),
                ChannelTimeMatrix(background, cfg.sample_rate_hz),
                label,
            )
        )
    conf = asdict(cfg)
    conf["carrier_hz"] = list(cfg.carriers)
    meta = {
        "config": conf,
        "onset_ms": cfg.onset_ms,
        "onset_samples": cfg.onset_samples,
        "carriers_hz": truth["carriers"].tolist(),
        "phases_rad": truth["phases"].tolist(),
        "patterns": truth["patterns"].tolist(),
        "noise_std": sigma,
        "sample_rate_hz": cfg.sample_rate_hz,
    }
    return LabeledDataset(trials, cfg.n_classes, default_class_names(cfg.n_classes), cfg.seed, meta)
