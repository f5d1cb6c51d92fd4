import json
import math

import numpy as np
import pytest

from mstdecode.errors import InvalidConfig
from mstdecode.mst import MstParams, mst_fast
from mstdecode.signal_core import load_dataset, save_dataset, sidecar_path
from mstdecode.syndata import SynthConfig, generate, ground_truth, spatial_patterns


def stack(ds, label=None):
    trials = [t for t in ds.trials if label is None or t.label == label]
    return np.stack([t.active.data for t in trials])


class TestConfig:
    def test_defaults(self):
        c = SynthConfig()
        assert c.carriers == (8.0, 12.0, 16.0, 20.0, 24.0, 28.0)
        assert c.onset_samples == 50
        assert SynthConfig(phase_coded=True).carriers[:2] == (8.0, 8.0)

    @pytest.mark.parametrize(
        "kw",
        [
            {"onset_ms": 300},
            {"onset_ms": -1},
            {"carrier_hz": (8, 8, 12, 16, 20, 24)},
            {"carrier_hz": (8, 12)},
            {"carrier_hz": (0, 12, 16, 20, 24, 28)},
            {"n_classes": 1},
            {"snr_db": float("nan")},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            SynthConfig(**kw)

    def test_noise_level(self):
        c = SynthConfig(n_channels=4, snr_db=10)
        # Signal power per sample averaged over channels: A^2 / 2 / C.
        assert c.noise_std == pytest.approx(math.sqrt(1 / 8 / 10))
        assert SynthConfig(snr_db=float("inf")).noise_std == 0.0


class TestGenerate:
    def test_noise_free_trial_construction(self):
        cfg = SynthConfig(trials_per_class=1, n_channels=16, snr_db=float("inf"), seed=4)
        ds = generate(cfg)
        truth = ground_truth(cfg)
        for tr in ds.trials:
            k = tr.label
            c = int(np.argmax(np.abs(truth["patterns"][k])))
            x = tr.active.data[c]
            assert not x[:50].any()
            t = np.arange(250)
            ref = truth["patterns"][k][c] * np.sin(2 * np.pi * cfg.carriers[k] * t / 1000 + truth["phases"][k])
            np.testing.assert_allclose(x[50:], ref, atol=1e-6)
            assert not tr.background.data.any()

    def test_labels_round_robin(self):
        ds = generate(SynthConfig(trials_per_class=3, n_channels=2))
        assert ds.labels.tolist() == [0, 1, 2, 3, 4, 5] * 3
        assert ds.class_counts().tolist() == [3] * 6

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = SynthConfig(trials_per_class=2, n_channels=8, seed=11)
        save_dataset(generate(cfg), tmp_path / "a.bin")
        save_dataset(generate(cfg), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        save_dataset(generate(SynthConfig(trials_per_class=2, n_channels=8, seed=12)), tmp_path / "c.bin")
        assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()

    def test_trial_streams_independent_of_count(self):
        small = generate(SynthConfig(trials_per_class=2, n_channels=4, seed=5))
        big = generate(SynthConfig(trials_per_class=4, n_channels=4, seed=5))
        assert small.trials[3] == big.trials[3]

    def test_patterns_unit_and_orthogonal(self):
        p = spatial_patterns(6, 128, np.random.default_rng(0))
        np.testing.assert_allclose(p @ p.T, np.eye(6), atol=1e-12)
        q = spatial_patterns(5, 3, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0)

    def test_empirical_snr(self):
        cfg = SynthConfig(trials_per_class=10, n_channels=32, snr_db=10, seed=2)
        ds = generate(cfg)
        truth = ground_truth(cfg)
        noise = []
        for tr in ds.trials:
            clean = np.outer(truth["patterns"][tr.label],
                             np.sin(2 * np.pi * cfg.carriers[tr.label] * np.arange(250) / 1000 + truth["phases"][tr.label]))
            noise.append(tr.active.data[:, 50:] - clean)
            signal_power = (clean**2).mean()
        ratio_db = 10 * np.log10(signal_power / np.mean(np.square(noise)))
        assert abs(ratio_db - 10) < 0.3

    def test_sidecar_ground_truth(self, tmp_path):
        cfg = SynthConfig(trials_per_class=1, n_channels=8, seed=3)
        path = tmp_path / "d.bin"
        save_dataset(generate(cfg), path)
        side = json.loads(sidecar_path(path).read_text())["generator"]
        assert side["onset_ms"] == 50.0
        assert side["carriers_hz"] == list(cfg.carriers)
        np.testing.assert_allclose(side["patterns"], ground_truth(cfg)["patterns"])
        assert load_dataset(path).meta["phases_rad"] == side["phases_rad"]


class TestPlantedProperties:
    def test_pre_onset_mean_shrinks(self):
        def pre_onset_mean(n):
            ds = generate(SynthConfig(trials_per_class=n, n_channels=16, seed=8))
            return np.abs(stack(ds, 0)[:, :, :50].mean(axis=0)).mean()

        small, large = pre_onset_mean(10), pre_onset_mean(160)
        assert large < small / 2.5  # ~1/sqrt(16) = 1/4 expected

    def test_patterns_recoverable(self):
        cfg = SynthConfig(trials_per_class=20, n_channels=64, snr_db=10, seed=9)
        ds = generate(cfg)
        truth = ground_truth(cfg)
        for k in range(cfg.n_classes):
            mean = stack(ds, k)[:, :, 50:].mean(axis=0)
            u = np.linalg.svd(mean, full_matrices=False)[0][:, 0]
            assert abs(np.corrcoef(u, truth["patterns"][k])[0, 1]) > 0.95

    def test_phase_coded_pair_amplitude_identical(self):
        cfg = SynthConfig(trials_per_class=3, n_channels=8, snr_db=float("inf"), phase_coded=True, seed=1)
        ds = generate(cfg)
        a, b = (stack(ds, k).mean(axis=0) for k in (0, 1))
        sa, sb = mst_fast(a, MstParams()), mst_fast(b, MstParams())
        np.testing.assert_allclose(np.abs(sa), np.abs(sb), atol=1e-6)
        assert np.max(np.abs(sa - sb)) > 0.1
        fa, fb = np.fft.rfft(a, axis=-1), np.fft.rfft(b, axis=-1)
        np.testing.assert_allclose(np.abs(fa), np.abs(fb), atol=1e-6)
