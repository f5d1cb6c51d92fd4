"""Trial and dataset containers, background normalization, dataset file I/O.

Binary layout (little-endian)::

    magic      8s   b"MSTDSET1"
    version    u32  1
    n_trials   u32
    n_channels u32
    n_time     u32
    n_bg_time  u32
    n_classes  u32
    seed       u64
    per trial: u8 label, f32 active[n_channels*n_time], f32 background[n_channels*n_bg_time]

A JSON sidecar ``<path>.meta.json`` carries class names, the sample rate and
whatever generator configuration produced the data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DegenerateBackground, FormatError, InvalidConfig, TruncatedFile

DATASET_MAGIC = b"MSTDSET1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIQ")
HEADER_SIZE = _HEADER.size  # 40 bytes

BACKGROUND_EPS = 1e-12
DEFAULT_CLASS_NAMES = ("building", "body part", "face", "fruit", "insect", "tool")


@dataclass(frozen=True, eq=False)
class ChannelTimeMatrix:
    """Real-valued segment with shape (n_channels, n_time)."""

    data: np.ndarray
    sample_rate_hz: float = 1000.0

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidConfig(f"expected a non-empty 2-D (channels, time) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidConfig("segment contains NaN or Inf")
        if not self.sample_rate_hz > 0:
            raise InvalidConfig(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_time(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChannelTimeMatrix):
            return NotImplemented
        return self.sample_rate_hz == other.sample_rate_hz and np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Trial:
    active: ChannelTimeMatrix
    background: ChannelTimeMatrix
    label: int

    def __post_init__(self) -> None:
        if self.active.n_channels != self.background.n_channels:
            raise InvalidConfig(
                f"active has {self.active.n_channels} channels, background has {self.background.n_channels}"
            )
        if self.label < 0:
            raise InvalidConfig(f"negative label {self.label}")


@dataclass(eq=False)
class LabeledDataset:
    """A list of trials plus class metadata.

    ``meta`` holds free-form generator configuration and is persisted in the
    JSON sidecar, not in the binary file.
    """

    trials: list[Trial]
    n_classes: int = 6
    class_names: list[str] = field(default_factory=list)
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise InvalidConfig(f"n_classes must be positive, got {self.n_classes}")
        if not self.class_names:
            self.class_names = default_class_names(self.n_classes)
        if len(self.class_names) != self.n_classes:
            raise InvalidConfig(f"{len(self.class_names)} class names for {self.n_classes} classes")
        if self.trials:
            a0, b0 = self.trials[0].active.data.shape, self.trials[0].background.data.shape
            for i, tr in enumerate(self.trials):
                if tr.active.data.shape != a0 or tr.background.data.shape != b0:
                    raise InvalidConfig(f"trial {i} dimensions differ from trial 0")
                if tr.label >= self.n_classes:
                    raise InvalidConfig(f"trial {i} label {tr.label} >= n_classes {self.n_classes}")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    @property
    def sample_rate_hz(self) -> float:
        if self.trials:
            return self.trials[0].active.sample_rate_hz
        return float(self.meta.get("sample_rate_hz", 1000.0))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and list(self.class_names) == list(other.class_names)
            and self.seed == other.seed
            and len(self.trials) == len(other.trials)
            and all(a == b for a, b in zip(self.trials, other.trials))
        )


def default_class_names(n_classes: int) -> list[str]:
    if n_classes == len(DEFAULT_CLASS_NAMES):
        return list(DEFAULT_CLASS_NAMES)
    return [f"class_{k}" for k in range(n_classes)]


def normalize_trial(active: ChannelTimeMatrix, background: ChannelTimeMatrix) -> ChannelTimeMatrix:
    """Standardize ``active`` with the overall mean and population std of ``background``.

    One scalar pair is computed over every element of the background matrix.
    """
    if active.n_channels != background.n_channels:
        raise InvalidConfig(
            f"active has {active.n_channels} channels, background has {background.n_channels}"
        )
    m_s = background.data.mean()
    sigma_s = background.data.std()
    if not sigma_s > BACKGROUND_EPS:
        raise DegenerateBackground(f"background standard deviation {sigma_s:g} <= {BACKGROUND_EPS:g}")
    return ChannelTimeMatrix((active.data - m_s) / sigma_s, active.sample_rate_hz)


def dataset_nbytes(n_trials: int, n_channels: int, n_time: int, n_bg_time: int) -> int:
    return HEADER_SIZE + n_trials * (1 + 4 * n_channels * (n_time + n_bg_time))


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Write ``ds`` to ``path`` plus its JSON sidecar.

    Samples are stored as float32; values that are not float32-representable
    are rounded on the way out.
    """
    path = Path(path)
    if ds.trials:
        n_ch, n_t = ds.trials[0].active.data.shape
        n_bg = ds.trials[0].background.n_time
    else:
        n_ch = n_t = n_bg = 0
    if ds.n_classes > 256:
        raise InvalidConfig("labels are stored as u8; at most 256 classes")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds.trials), n_ch, n_t, n_bg, ds.n_classes, ds.seed))
        for tr in ds.trials:
            fh.write(struct.pack("<B", tr.label))
            fh.write(tr.active.data.astype("<f4").tobytes())
            fh.write(tr.background.data.astype("<f4").tobytes())
    meta = {
        "class_names": list(ds.class_names),
        "sample_rate_hz": ds.sample_rate_hz,
        "generator": ds.meta,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_dataset_header(path: str | Path) -> dict[str, int]:
    with open(path, "rb") as fh:
        return _parse_header(_read_exact(fh, HEADER_SIZE, "header"))


def _parse_header(buf: bytes) -> dict[str, int]:
    magic, version, n_trials, n_ch, n_t, n_bg, n_classes, seed = _HEADER.unpack(buf)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    return dict(n_trials=n_trials, n_channels=n_ch, n_time=n_t, n_background_time=n_bg, n_classes=n_classes, seed=seed)


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    meta: dict[str, Any] = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    fs = float(meta.get("sample_rate_hz", 1000.0))
    with open(path, "rb") as fh:
        hdr = _parse_header(_read_exact(fh, HEADER_SIZE, "header"))
        n_ch, n_t, n_bg = hdr["n_channels"], hdr["n_time"], hdr["n_background_time"]
        trials = []
        for i in range(hdr["n_trials"]):
            (label,) = struct.unpack("<B", _read_exact(fh, 1, f"trial {i} label"))
            act = np.frombuffer(_read_exact(fh, 4 * n_ch * n_t, f"trial {i} active"), dtype="<f4")
            bg = np.frombuffer(_read_exact(fh, 4 * n_ch * n_bg, f"trial {i} background"), dtype="<f4")
            trials.append(
                Trial(
                    ChannelTimeMatrix(act.reshape(n_ch, n_t), fs),
                    ChannelTimeMatrix(bg.reshape(n_ch, n_bg), fs),
                    int(label),
                )
            )
        if fh.read(1):
            raise FormatError("trailing bytes after last trial")
    return LabeledDataset(
        trials=trials,
        n_classes=hdr["n_classes"],
        class_names=meta.get("class_names") or [],
        seed=hdr["seed"],
        meta=meta.get("generator", {}) or {},
    )
