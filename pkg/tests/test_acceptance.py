"""End-to-end acceptance checks.

Each check prints one ``[PASS]``/``[FAIL]`` line; the lines are also repeated
in the pytest terminal summary.  Run on its own with::

    python tests/test_acceptance.py
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, DESK_CHANNELS, DESK_TRAIN
from mstdecode import cli
from mstdecode import layers as L
from mstdecode.importance import compare_forms, frequency_importance, temporal_importance
from mstdecode.mst import MstParams, mst_direct, mst_direct_grid, mst_fast, transform_dataset
from mstdecode.network import Batch, EncoderConfig, init_model, model_backward, model_forward, parameter_count
from mstdecode.syndata import SynthConfig, generate

P = MstParams()


def report(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_01_mst_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    pointwise = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(300)
        fast = mst_fast(x, P)
        worst = max(worst, float(np.max(np.abs(fast - mst_direct_grid(x, P)))))
        for t, f in zip(rng.integers(0, 300, 3), rng.integers(0, 129, 3)):
            pointwise = max(pointwise, abs(fast[f, t] - mst_direct(x, int(t), float(f), P)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and pointwise <= 1e-9 and secs < 30
    report(1, "MST oracle equivalence", ok,
           f"20 signals, max |fast - direct| {worst:.2e} (grid), {pointwise:.2e} (pointwise), tol 1e-9, {secs:.1f} s < 30 s")


def test_02_marginal_property():
    tau = np.arange(300)
    basis = np.exp(-2j * np.pi * np.outer(P.freq_grid_hz, tau) / P.sample_rate_hz)
    worst = 0.0
    for seed in range(50):
        x = np.random.default_rng(1000 + seed).standard_normal(300)
        dft = basis @ x
        rel = np.abs(mst_fast(x, P).sum(axis=1) - dft) / np.abs(dft)
        worst = max(worst, float(rel.max()))
    report(2, "Marginal property", worst <= 1e-6, f"50 signals, max relative error {worst:.2e}, tol 1e-6")


def test_03_frequency_localization():
    found = {}
    for f0 in (8, 15, 30, 45):
        for name, wave in (("sin", np.sin), ("cos", np.cos)):
            x = wave(2 * np.pi * f0 * np.arange(1000) / 1000)
            found[(f0, name)] = int(np.argmax(np.abs(mst_fast(x, P)).mean(axis=1)))
    ok = all(abs(v - f0) <= 1 for (f0, _), v in found.items())
    detail = ", ".join(f"{f0} Hz {n} -> {v}" for (f0, n), v in found.items())
    report(3, "Frequency localization", ok, f"{detail} (1 s signals, tol 1 bin)")


def _grad_errors(m, batch, mode, h=1e-5):
    def loss_grads():
        logits, cache = model_forward(batch.inputs, m, mode)
        loss, d = L.cross_entropy(logits, batch.labels)
        return loss, model_backward(d, cache)

    _, ana = loss_grads()
    errs = {}
    for name, theta in m.params.items():
        flat = theta.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_grads()[0]
            flat[i] = orig - h
            lm = loss_grads()[0]
            flat[i] = orig
            num[i] = (lp - lm) / (2 * h)
        errs[name] = float(np.max(np.abs(num - ana[name].reshape(-1))) / max(np.max(np.abs(num)), 1e-6))
    return errs


def test_04_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for axis in ("spatial", "frequency", "temporal"):
        cfg = EncoderConfig(n_freq=3, n_channels=4, n_time=16, temporal_kernel=4, filter_axis=axis)
        for mode in ("train", "eval"):
            rng = np.random.default_rng(len(worst))
            m = init_model(cfg, n_classes=3, seed=len(worst))
            for k in m.params:
                if ".bn" in k:
                    m.params[k] = rng.uniform(0.5, 1.5, m.params[k].shape) if "gamma" in k else rng.normal(0, 0.3, m.params[k].shape)
            for k in m.buffers:
                m.buffers[k] = rng.uniform(0.5, 2, m.buffers[k].shape) if "var" in k else rng.normal(0, 0.3, m.buffers[k].shape)
            x = tuple(rng.standard_normal((2,) + cfg.input_shape) for _ in range(2))
            errs = _grad_errors(m, Batch(x, rng.integers(0, 3, 2)), mode)
            worst[(axis, mode)] = max(errs.values())
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and secs < 60
    detail = ", ".join(f"{a}/{m} {v:.1e}" for (a, m), v in worst.items())
    report(4, "Gradient correctness", ok, f"F=3 C=4 T=16 B=2, worst relative error {detail}; tol 1e-4; {secs:.1f} s < 60 s")


def test_05_parameter_counts():
    j = parameter_count(EncoderConfig(n_freq=53))
    c = parameter_count(EncoderConfig(n_freq=39))
    rj, rc = abs(j - 48_800) / 48_800, abs(c - 39_600) / 39_600
    report(5, "Parameter counts", rj <= 0.1 and rc <= 0.1,
           f"F=53 -> {j} ({rj:+.1%} vs 48,800), F=39 -> {c} ({rc:+.1%} vs 39,600), tol 10%")


def test_06_synthetic_classification(planted_run):
    acc = planted_run.cv.mean_accuracy
    secs = planted_run.seconds
    ok = acc >= 0.90 and secs < 600
    report(6, "Synthetic classification", ok,
           f"6 x 60 trials, {DESK_CHANNELS} channels, snr 10 dB, 5-fold mean {acc:.3f} ± {planted_run.cv.std_accuracy:.3f} "
           f"(>= 0.90), {secs:.0f} s < 600 s")


def test_07_latency_recovery(planted_run):
    model, x, y = planted_run.held_out(0)
    curve = temporal_importance(model, x, y, window=5, stride=5)
    first = curve.first_above()
    onset = planted_run.synth.onset_samples
    ok = first is not None and abs(int(first) - onset) <= 2 * 5
    report(7, "Latency recovery", ok,
           f"first window above {curve.threshold:.3f} starts at {first} (onset {onset}, tol ±2 segments of 5)")


def test_08_frequency_importance(planted_run):
    model, x, y = planted_run.held_out(0)
    grid = planted_run.spectrograms.freq_grid_hz
    curve = frequency_importance(model, x, y, grid)
    carriers = np.array(planted_run.synth.carriers)
    acc = dict(zip(grid.tolist(), curve.accuracy.tolist()))
    at_carriers = {f: acc[f] for f in carriers.tolist()}
    far = [f for f in grid if np.min(np.abs(carriers - f)) >= 10]
    far_dev = max(abs(acc[f] - curve.chance) for f in far)
    ok_carriers = all(a > curve.chance + 0.1 for a in at_carriers.values())
    ok_far = far_dev <= 0.05
    detail = ("carrier bins " + ", ".join(f"{f:g}:{a:.2f}" for f, a in at_carriers.items())
              + f" (need > {curve.chance + 0.1:.3f}); {len(far)} far bins max |acc - chance| {far_dev:.3f} (tol 0.05)")
    report(8, "Frequency importance", ok_carriers and ok_far, detail)


def test_09_real_imag_complementarity():
    ds = generate(SynthConfig(trials_per_class=30, n_channels=DESK_CHANNELS, snr_db=10, phase_coded=True, seed=3))
    ss = transform_dataset(ds, P, 0, 38)
    res = compare_forms(ss, DESK_TRAIN, ("real_imag_parallel", "amp_only"))
    ri, amp = res["real_imag_parallel"].mean_accuracy, res["amp_only"].mean_accuracy
    report(9, "Real/imaginary complementarity", ri - amp >= 0.10,
           f"phase-coded set, real_imag_parallel {ri:.3f} vs amp_only {amp:.3f}, gap {100 * (ri - amp):.1f} points (>= 10)")


def _pipeline(root: Path, manifests: Path | None) -> None:
    steps = [
        ("generate", ["--trials-per-class", "5", "--channels", "4", "--seed", "3"], "data"),
        ("train", ["--f-hi", "20", "--epochs", "2", "--batch", "8", "--lr", "1e-3"], "train"),
        ("importance", ["--f-hi", "20", "--epochs", "2", "--batch", "8", "--lr", "1e-3", "--stride", "5"], "imp"),
    ]
    for cmd, flags, sub in steps:
        out = ["--out", str(root / sub)]
        data = [] if cmd == "generate" else ["--dataset", str(root / "data")]
        if manifests is None:
            argv = [cmd, *flags, *out, *data]
        else:
            argv = [cmd, "--config", str(manifests / sub / "manifest.json"), *out, *data]
        assert cli.run(argv) == 0, argv


def test_10_determinism(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    _pipeline(first, None)
    _pipeline(second, first)
    files = sorted(p.relative_to(first) for p in first.rglob("*")
                   if p.is_file() and p.suffix in (".csv", ".ckpt", ".bin"))
    differing = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".ckpt" for f in files)
    n_csv = sum(f.suffix == ".csv" for f in files)
    ok = not differing and n_ckpt >= 6 and n_csv >= 2
    report(10, "Determinism", ok,
           f"{len(files)} files ({n_csv} CSV, {n_ckpt} checkpoints) compared byte for byte, "
           f"{len(differing)} differ{': ' + ', '.join(differing) if differing else ''}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
