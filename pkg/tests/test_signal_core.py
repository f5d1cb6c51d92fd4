import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstdecode.errors import DegenerateBackground, FormatError, InvalidConfig, TruncatedFile
from mstdecode.signal_core import (
    HEADER_SIZE,
    ChannelTimeMatrix,
    LabeledDataset,
    Trial,
    dataset_nbytes,
    load_dataset,
    normalize_trial,
    read_dataset_header,
    save_dataset,
    sidecar_path,
)


def ctm(a):
    return ChannelTimeMatrix(np.asarray(a, dtype=float))


def random_dataset(rng, n_trials=3, n_ch=4, n_t=7, n_bg=5, n_classes=3, seed=0):
    trials = [
        Trial(
            ctm(rng.standard_normal((n_ch, n_t)).astype(np.float32)),
            ctm(rng.standard_normal((n_ch, n_bg)).astype(np.float32)),
            int(rng.integers(n_classes)),
        )
        for _ in range(n_trials)
    ]
    return LabeledDataset(trials, n_classes, seed=seed)


class TestChannelTimeMatrix:
    def test_rejects_nan_and_inf(self):
        with pytest.raises(InvalidConfig):
            ctm([[1.0, np.nan]])
        with pytest.raises(InvalidConfig):
            ctm([[np.inf, 0.0]])

    def test_rejects_empty_and_wrong_rank(self):
        with pytest.raises(InvalidConfig):
            ctm(np.zeros((0, 3)))
        with pytest.raises(InvalidConfig):
            ctm(np.zeros(3))

    def test_data_is_read_only_copy(self):
        src = np.ones((2, 3))
        m = ctm(src)
        src[0, 0] = 5.0
        assert m.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            m.data[0, 0] = 2.0

    def test_trial_checks_channels_and_label(self):
        with pytest.raises(InvalidConfig):
            Trial(ctm(np.ones((2, 3))), ctm(np.ones((3, 3))), 0)
        with pytest.raises(InvalidConfig):
            Trial(ctm(np.ones((2, 3))), ctm(np.ones((2, 3))), -1)

    def test_dataset_label_bound_and_names(self):
        t = Trial(ctm(np.ones((2, 3))), ctm(np.ones((2, 3))), 2)
        with pytest.raises(InvalidConfig):
            LabeledDataset([t], n_classes=2)
        ds = LabeledDataset([], n_classes=6)
        assert ds.class_names == ["building", "body part", "face", "fruit", "insect", "tool"]
        assert ds.class_counts().tolist() == [0] * 6


class TestNormalize:
    def test_identity_when_background_is_standard(self):
        active = np.random.default_rng(0).standard_normal((3, 8))
        bg = np.tile([-1.0, 1.0], (3, 4))
        out = normalize_trial(ctm(active), ctm(bg))
        np.testing.assert_array_equal(out.data, active)

    def test_hand_computed_mean_and_std(self):
        bg = np.tile([1.0, 3.0], (2, 3))  # mean 2, population std 1
        out = normalize_trial(ctm(np.full((2, 5), 5.0)), ctm(bg))
        np.testing.assert_array_equal(out.data, np.full((2, 5), 3.0))

    def test_constant_background_raises(self):
        with pytest.raises(DegenerateBackground):
            normalize_trial(ctm(np.ones((2, 3))), ctm(np.full((2, 4), 7.0)))

    def test_statistics_are_scalar_not_per_channel(self):
        bg = np.array([[0.0, 2.0], [10.0, 12.0]])
        out = normalize_trial(ctm(bg), ctm(bg))
        # Per-channel normalization would give identical rows.
        assert not np.allclose(out.data[0], out.data[1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), st.floats(-5, 5))
    def test_affine(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 6))
        bg = rng.standard_normal((3, 9)) * 2 + 1
        m_s, s_s = bg.mean(), bg.std()
        lhs = normalize_trial(ctm(a * x + b), ctm(bg)).data
        rhs = a / s_s * x + (b - m_s) / s_s
        np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_background_against_itself_is_standardized(self, seed):
        rng = np.random.default_rng(seed)
        bg = rng.standard_normal((4, 11)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        out = normalize_trial(ctm(bg), ctm(bg)).data
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9


class TestDatasetFile:
    def test_empty_dataset_is_header_only(self, tmp_path):
        path = tmp_path / "e.bin"
        ds = LabeledDataset([], n_classes=6)
        save_dataset(ds, path)
        assert path.stat().st_size == HEADER_SIZE == 40
        assert load_dataset(path) == ds

    def test_two_trials_full_size(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "two.bin"
        ds = random_dataset(rng, n_trials=2, n_ch=128, n_t=300, n_bg=300, n_classes=6)
        save_dataset(ds, path)
        assert path.stat().st_size == 40 + 2 * (2 * 128 * 300 * 4 + 1)
        assert path.stat().st_size == dataset_nbytes(2, 128, 300, 300)
        assert load_dataset(path) == ds

    def test_header_fields(self, tmp_path):
        path = tmp_path / "h.bin"
        save_dataset(random_dataset(np.random.default_rng(2), 3, 4, 7, 5, 3, seed=99), path)
        raw = path.read_bytes()[:HEADER_SIZE]
        assert struct.unpack("<8sIIIIIIQ", raw) == (b"MSTDSET1", 1, 3, 4, 7, 5, 3, 99)
        assert read_dataset_header(path)["n_trials"] == 3

    def test_sidecar_contents(self, tmp_path):
        path = tmp_path / "s.bin"
        ds = random_dataset(np.random.default_rng(3))
        ds.meta = {"onset_ms": 50.0}
        save_dataset(ds, path)
        side = json.loads(sidecar_path(path).read_text())
        assert side["class_names"] == ["class_0", "class_1", "class_2"]
        assert side["generator"] == {"onset_ms": 50.0}
        assert load_dataset(path).meta == {"onset_ms": 50.0}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        save_dataset(random_dataset(np.random.default_rng(4)), path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.bin"
        save_dataset(random_dataset(np.random.default_rng(4)), path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.bin"
        save_dataset(random_dataset(np.random.default_rng(5)), path)
        raw = path.read_bytes()
        for cut in (10, HEADER_SIZE + 3, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(TruncatedFile):
                load_dataset(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.bin"
        save_dataset(random_dataset(np.random.default_rng(6)), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_round_trip_100_random_datasets(self, tmp_path):
        rng = np.random.default_rng(7)
        path = tmp_path / "r.bin"
        for i in range(100):
            ds = random_dataset(
                rng, int(rng.integers(0, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 9)),
                int(rng.integers(1, 9)), int(rng.integers(1, 7)), seed=int(rng.integers(2**63)),
            )
            save_dataset(ds, path)
            back = load_dataset(path)
            assert back == ds, f"dataset {i}"
            for a, b in zip(ds.trials, back.trials):
                assert a.active.data.tobytes() == b.active.data.tobytes()
