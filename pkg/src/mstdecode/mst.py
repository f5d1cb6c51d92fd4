"""Modified S-transform.

The analysis window at frequency ``f`` is a Gaussian whose standard deviation
in seconds follows an arctangent law::

    alpha(f) = 1 / (a * arctan((f - f_max / 2) / b) + c)

Discretely, the window is sampled over the full circular lag range with
standard deviation ``alpha(f) * fs`` samples and rescaled to unit sum, so that
summing a row over time gives back the demodulated sum of the signal.  The
phase reference is absolute time (``exp(-2j*pi*f*tau/fs)``).

Two evaluation routes exist.  :func:`mst_direct` and :func:`mst_direct_grid`
sum the definition term by term and serve as the oracle.  :func:`mst_fast`
modulates the signal by each grid frequency and performs the circular
window convolution with the FFT.
"""

from __future__ import annotations

import cmath
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyRange, FormatError, InvalidConfig, TruncatedFile
from .signal_core import ChannelTimeMatrix, LabeledDataset, normalize_trial


@dataclass(frozen=True)
class MstParams:
    a: float = 5.0
    b: float = 50.0
    c: float = 74.0
    f_max_hz: int = 128
    sample_rate_hz: float = 1000.0
    freq_step_hz: float = 1.0

    def __post_init__(self) -> None:
        if not self.c > self.a * np.pi / 2:
            raise InvalidConfig(f"need c > a*pi/2 for a positive window width (a={self.a}, c={self.c})")
        if self.b == 0:
            raise InvalidConfig("b must be non-zero")
        if not self.sample_rate_hz > 0:
            raise InvalidConfig("sample_rate_hz must be positive")
        if self.f_max_hz > self.sample_rate_hz / 2:
            raise InvalidConfig(f"f_max_hz={self.f_max_hz} exceeds Nyquist {self.sample_rate_hz / 2}")
        if not self.freq_step_hz > 0:
            raise InvalidConfig("freq_step_hz must be positive")

    @property
    def freq_grid_hz(self) -> np.ndarray:
        n = int(np.floor(self.f_max_hz / self.freq_step_hz + 1e-9)) + 1
        return np.arange(n) * self.freq_step_hz

    @property
    def n_freq(self) -> int:
        return len(self.freq_grid_hz)


def alpha(f_hz, p: MstParams):
    """Window standard deviation in seconds at frequency ``f_hz`` (scalar or array)."""
    return 1.0 / (p.a * np.arctan((np.asarray(f_hz, dtype=np.float64) - p.f_max_hz / 2) / p.b) + p.c)


def gaussian_window(n: int, f_hz: float, p: MstParams) -> np.ndarray:
    """Unit-sum circular Gaussian window over lags ``0..n-1``."""
    sigma = alpha(f_hz, p) * p.sample_rate_hz
    lag = np.arange(n)
    dist = np.minimum(lag, n - lag).astype(np.float64)
    g = np.exp(-0.5 * (dist / sigma) ** 2)
    return g / g.sum()


def mst_direct(x, t_idx: int, f_hz: float, p: MstParams) -> complex:
    """Evaluate one time-frequency point by explicit summation over the signal."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 0 <= t_idx < n:
        raise IndexError(f"t_idx {t_idx} outside [0, {n})")
    sigma = p.sample_rate_hz / (p.a * math.atan((f_hz - p.f_max_hz / 2) / p.b) + p.c)
    weights = [math.exp(-(min(d, n - d) ** 2) / (2.0 * sigma * sigma)) for d in range(n)]
    norm = math.fsum(weights)
    acc = 0j
    for tau in range(n):
        w = weights[(tau - t_idx) % n] / norm
        acc += float(x[tau]) * w * cmath.exp(-2j * math.pi * f_hz * tau / p.sample_rate_hz)
    return acc


def mst_direct_grid(x, p: MstParams) -> np.ndarray:
    """Whole grid by dense circulant matrix-vector products, O(n_freq * N^2).

    Same definition as :func:`mst_direct`, vectorized so that oracle checks
    over many signals stay fast.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    tau = np.arange(n)
    lag = (tau[None, :] - tau[:, None]) % n  # [t, tau]
    out = np.empty((p.n_freq, n), dtype=np.complex128)
    for i, f in enumerate(p.freq_grid_hz):
        sigma = alpha(f, p) * p.sample_rate_hz
        dist = np.minimum(lag, n - lag).astype(np.float64)
        w = np.exp(-0.5 * (dist / sigma) ** 2)
        w /= w[0].sum()
        out[i] = w @ (x * np.exp(-2j * np.pi * f * tau / p.sample_rate_hz))
    return out


def _window_spectra(n: int, freqs, p: MstParams) -> np.ndarray:
    # The unit-sum window is real and even, so its DFT is real.
    g = np.stack([gaussian_window(n, f, p) for f in freqs])
    return np.fft.fft(g, axis=-1).real


def mst_fast(x, p: MstParams, freqs_hz=None) -> np.ndarray:
    """Transform the last axis of ``x``.

    ``x`` may be a single signal ``[N]`` or a stack ``[..., N]``; the result is
    ``[n_freq, ..., N]`` complex128.  ``freqs_hz`` restricts evaluation to a
    subset of frequencies (default: the full grid of ``p``).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 4:
        raise InvalidConfig(f"signal length must be >= 4, got {n}")
    freqs = p.freq_grid_hz if freqs_hz is None else np.asarray(freqs_hz, dtype=np.float64)
    tau = np.arange(n)
    carrier = np.exp(-2j * np.pi * np.outer(freqs, tau) / p.sample_rate_hz)  # [F, N]
    lead = (len(freqs),) + (1,) * (x.ndim - 1) + (n,)
    g_hat = _window_spectra(n, freqs, p).reshape(lead)
    y = x[None, ...] * carrier.reshape(lead)
    return np.fft.ifft(np.fft.fft(y, axis=-1) * g_hat, axis=-1)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """Complex volume with shape [n_freq, n_channels, n_time], split into planes."""

    re: np.ndarray
    im: np.ndarray
    freq_grid_hz: np.ndarray
    sample_rate_hz: float = 1000.0

    def __post_init__(self) -> None:
        if self.re.shape != self.im.shape:
            raise InvalidConfig(f"re {self.re.shape} and im {self.im.shape} differ")
        grid = np.asarray(self.freq_grid_hz, dtype=np.float64)
        if grid.ndim != 1 or len(grid) != self.re.shape[0]:
            raise InvalidConfig("freq_grid_hz length must match the frequency axis")
        if np.any(np.diff(grid) <= 0):
            raise InvalidConfig("freq_grid_hz must be strictly increasing")
        object.__setattr__(self, "freq_grid_hz", grid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im


def transform_trial(
    trial_active: ChannelTimeMatrix,
    p: MstParams,
    context: ChannelTimeMatrix | None = None,
    freqs_hz=None,
) -> ComplexSpectrogram:
    """Transform every channel of a (normalized) trial.

    Without ``context`` each channel is transformed on its own circle, so the
    result equals :func:`mst_fast` per channel.  With ``context`` (the samples
    immediately preceding the trial, normally its background segment) the
    circle is ``[context, active]``; windows near the start of the trial then
    overlap real preceding data instead of wrapping onto the trial's own end.
    Only the active columns are returned and the phase stays referenced to
    the first active sample.  ``freqs_hz`` limits the rows computed.
    """
    freqs = p.freq_grid_hz if freqs_hz is None else np.asarray(freqs_hz, dtype=np.float64)
    x = trial_active.data
    n_ctx = 0
    if context is not None:
        if context.n_channels != trial_active.n_channels:
            raise InvalidConfig("context channel count differs from trial")
        n_ctx = context.n_time
        x = np.concatenate([context.data, x], axis=1)
    s = mst_fast(x, p, freqs)
    if n_ctx:
        s = s[..., n_ctx:]
        shift = np.exp(2j * np.pi * freqs * n_ctx / p.sample_rate_hz)
        s = s * shift[:, None, None]
    return ComplexSpectrogram(s.real.copy(), s.imag.copy(), freqs, p.sample_rate_hz)


def _crop_mask(grid: np.ndarray, f_lo_hz: float, f_hi_hz: float) -> np.ndarray:
    keep = (grid >= f_lo_hz - 1e-9) & (grid <= f_hi_hz + 1e-9)
    if not keep.any():
        raise EmptyRange(f"no frequency bins in [{f_lo_hz}, {f_hi_hz}] Hz")
    return keep


def crop_frequency(s: ComplexSpectrogram, f_lo_hz: float, f_hi_hz: float) -> ComplexSpectrogram:
    keep = _crop_mask(s.freq_grid_hz, f_lo_hz, f_hi_hz)
    return ComplexSpectrogram(s.re[keep].copy(), s.im[keep].copy(), s.freq_grid_hz[keep], s.sample_rate_hz)


def to_amp_angle(s: ComplexSpectrogram) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and angle in (-pi, pi]; the angle of 0+0j is 0."""
    amp = np.hypot(s.re, s.im)
    ang = np.arctan2(s.im, s.re)
    ang = np.where(ang == -np.pi, np.pi, ang)
    ang = np.where(amp == 0, 0.0, ang)
    return amp, ang


# --- dataset level ---------------------------------------------------------


@dataclass(eq=False)
class SpectrogramSet:
    """Stacked spectrograms of a whole dataset, float32, [n_trials, F, C, T]."""

    re: np.ndarray
    im: np.ndarray
    labels: np.ndarray
    freq_grid_hz: np.ndarray
    sample_rate_hz: float = 1000.0
    n_classes: int = 6
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.re.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.re.shape[1:]

    def crop(self, f_lo_hz: float, f_hi_hz: float) -> "SpectrogramSet":
        keep = _crop_mask(self.freq_grid_hz, f_lo_hz, f_hi_hz)
        return SpectrogramSet(
            self.re[:, keep], self.im[:, keep], self.labels, self.freq_grid_hz[keep],
            self.sample_rate_hz, self.n_classes, dict(self.meta),
        )

    def subset(self, idx) -> "SpectrogramSet":
        idx = np.asarray(idx)
        return SpectrogramSet(
            self.re[idx], self.im[idx], self.labels[idx], self.freq_grid_hz,
            self.sample_rate_hz, self.n_classes, dict(self.meta),
        )

    def features(self, form: str) -> tuple[np.ndarray, ...]:
        """Encoder inputs for a data form: ``real``, ``imag``, ``amp``, ``angle``
        or a ``+``-joined combination such as ``real+imag``."""
        out = []
        amp = ang = None
        for part in form.split("+"):
            if part == "real":
                out.append(self.re)
            elif part == "imag":
                out.append(self.im)
            elif part in ("amp", "angle"):
                if amp is None:
                    amp = np.hypot(self.re, self.im)
                    ang = np.where(amp == 0, 0.0, np.arctan2(self.im, self.re)).astype(np.float32)
                out.append(amp if part == "amp" else ang)
            else:
                raise InvalidConfig(f"unknown data form part {part!r}")
        return tuple(out)


def transform_dataset(
    ds: LabeledDataset,
    p: MstParams,
    f_lo_hz: float = 0.0,
    f_hi_hz: float | None = None,
    context: str = "background",
) -> SpectrogramSet:
    """Normalize each trial against its background, transform, crop, stack as float32.

    ``context="background"`` prepends the normalized background segment
    before transforming (see :func:`transform_trial`); ``"none"`` uses the
    plain circular transform of the active segment.
    """
    if context not in ("background", "none"):
        raise InvalidConfig(f"context must be 'background' or 'none', got {context!r}")
    f_hi = p.f_max_hz if f_hi_hz is None else f_hi_hz
    keep = _crop_mask(p.freq_grid_hz, f_lo_hz, f_hi)
    n = len(ds)
    if n == 0:
        raise InvalidConfig("cannot transform an empty dataset")
    n_ch, n_t = ds.trials[0].active.data.shape
    re = np.empty((n, int(keep.sum()), n_ch, n_t), dtype=np.float32)
    im = np.empty_like(re)
    for i, tr in enumerate(ds.trials):
        active = normalize_trial(tr.active, tr.background)
        ctx = normalize_trial(tr.background, tr.background) if context == "background" else None
        s = transform_trial(active, p, ctx, p.freq_grid_hz[keep])
        re[i] = s.re
        im[i] = s.im
    meta = {"context": context, "mst": p.__dict__.copy(), "dataset_meta": ds.meta}
    return SpectrogramSet(re, im, ds.labels, p.freq_grid_hz[keep], p.sample_rate_hz, ds.n_classes, meta)


SPEC_MAGIC = b"MSTSPEC1"
SPEC_VERSION = 1
_SPEC_HEADER = struct.Struct("<8sIIIIIId")


def save_spectrograms(ss: SpectrogramSet, path: str | Path) -> None:
    """Cache layout: magic, u32 version, u32 n_trials, n_freq, n_channels, n_time,
    n_classes, f64 sample rate, f64 freq grid, u8 labels, f32 re plane, f32 im plane."""
    n, f, c, t = ss.re.shape
    with open(path, "wb") as fh:
        fh.write(_SPEC_HEADER.pack(SPEC_MAGIC, SPEC_VERSION, n, f, c, t, ss.n_classes, ss.sample_rate_hz))
        fh.write(np.asarray(ss.freq_grid_hz, dtype="<f8").tobytes())
        fh.write(np.asarray(ss.labels, dtype="u1").tobytes())
        fh.write(np.ascontiguousarray(ss.re, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ss.im, dtype="<f4").tobytes())


def load_spectrograms(path: str | Path) -> SpectrogramSet:
    with open(path, "rb") as fh:
        head = fh.read(_SPEC_HEADER.size)
        if len(head) != _SPEC_HEADER.size:
            raise TruncatedFile("spectrogram header is short")
        magic, version, n, f, c, t, k, fs = _SPEC_HEADER.unpack(head)
        if magic != SPEC_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SPEC_MAGIC!r}")
        if version != SPEC_VERSION:
            raise FormatError(f"unsupported spectrogram version {version}")

        def take(count: int, dtype: str) -> np.ndarray:
            nbytes = count * np.dtype(dtype).itemsize
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise TruncatedFile(f"expected {nbytes} bytes, got {len(buf)}")
            return np.frombuffer(buf, dtype=dtype)

        grid = take(f, "<f8").astype(np.float64)
        labels = take(n, "u1").astype(np.int64)
        re = take(n * f * c * t, "<f4").reshape(n, f, c, t).astype(np.float32)
        im = take(n * f * c * t, "<f4").reshape(n, f, c, t).astype(np.float32)
    return SpectrogramSet(re, im, labels, grid, fs, k)
