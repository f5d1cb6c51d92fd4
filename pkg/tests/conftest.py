"""Shared synthetic runs.  Training is the slow part, so each run happens once per session."""

import time
from dataclasses import dataclass

import pytest

from mstdecode.importance import model_config_for
from mstdecode.mst import MstParams, SpectrogramSet, transform_dataset
from mstdecode.signal_core import LabeledDataset
from mstdecode.syndata import SynthConfig, generate
from mstdecode.trainer import CVResult, TrainConfig, kfold_split, train

# Desk-scale settings: 32 channels keep the 360-trial spectrogram set in memory
# and the 5-fold run within minutes on one core.
DESK_CHANNELS = 32
DESK_TRAIN = TrainConfig(epochs=10, batch_size=32, lr=1e-3, seed=0)


@dataclass
class PlantedRun:
    synth: SynthConfig
    dataset: LabeledDataset
    spectrograms: SpectrogramSet
    cv: CVResult
    splits: list
    seconds: float

    def held_out(self, fold: int = 0):
        """Validation inputs and labels of ``fold`` together with that fold's model."""
        _, va = self.splits[fold]
        x = self.spectrograms.features("real+imag")
        return self.cv.models[fold], [a[va] for a in x], self.spectrograms.labels[va]


@pytest.fixture(scope="session")
def planted_run() -> PlantedRun:
    t0 = time.perf_counter()
    synth = SynthConfig(trials_per_class=60, n_channels=DESK_CHANNELS, snr_db=10, seed=1)
    ds = generate(synth)
    ss = transform_dataset(ds, MstParams(), 0, 52)
    splits = kfold_split(ss.labels, DESK_TRAIN.folds, DESK_TRAIN.seed)
    cv = train(ss.features("real+imag"), ss.labels, model_config_for(ss), DESK_TRAIN, ss.n_classes,
               ("real", "imag"), splits)
    return PlantedRun(synth, ds, ss, cv, splits, time.perf_counter() - t0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
