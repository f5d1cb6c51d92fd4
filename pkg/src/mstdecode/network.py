"""Dual-encoder convolutional classifier over complex spectrogram volumes.

Per encoder, for an input ``[B, F, C, T]`` (frequency maps, channels, time):

1. batch-norm over the F maps
2. filter convolution spanning one whole axis, two output maps per input map
   (stages 1 and 2 are evaluated as one fused linear map)
3. batch-norm + ELU
4. average pooling along time (length 4)
5. depthwise temporal convolution (kernel 16, same padding, no bias)
6. pointwise mix of the 2F maps into 16 (with bias)
7. batch-norm + ELU
8. flatten

Encoder outputs are concatenated and fed to a linear head.  Gradients are
derived by hand per layer; see :mod:`mstdecode.layers`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import FormatError, InvalidConfig, ShapeMismatch, TruncatedFile, UnsupportedAxis

FILTER_AXES = ("spatial", "frequency", "temporal")


@dataclass(frozen=True)
class EncoderConfig:
    n_freq: int
    n_channels: int = 128
    n_time: int = 300
    pool_len: int = 4
    temporal_kernel: int = 16
    mix_maps: int = 16
    filter_axis: str = "spatial"
    depth_multiplier: int = 2

    def __post_init__(self) -> None:
        if self.filter_axis not in FILTER_AXES:
            raise UnsupportedAxis(f"filter_axis must be one of {FILTER_AXES}, got {self.filter_axis!r}")
        for name in ("n_freq", "n_channels", "n_time", "pool_len", "temporal_kernel", "mix_maps", "depth_multiplier"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.filter_axis != "temporal":
            if self.n_time % self.pool_len:
                raise InvalidConfig(f"n_time={self.n_time} not divisible by pool_len={self.pool_len}")
            if self.temporal_kernel > self.n_time // self.pool_len:
                raise InvalidConfig("temporal_kernel exceeds pooled length")

    @property
    def n_maps(self) -> int:
        return self.depth_multiplier * self.n_freq

    @property
    def filter_shape(self) -> tuple[int, int]:
        span = {"spatial": self.n_channels, "frequency": self.n_freq, "temporal": self.n_time}[self.filter_axis]
        return (self.n_maps, span)

    @property
    def filtered_dims(self) -> tuple[int, int]:
        """(residual extent, time length) after the filter stage."""
        if self.filter_axis == "spatial":
            return 1, self.n_time
        if self.filter_axis == "frequency":
            return self.n_channels, self.n_time
        return self.n_channels, 1

    @property
    def effective_pool(self) -> int:
        # A collapsed time axis leaves nothing to pool.
        return 1 if self.filter_axis == "temporal" else self.pool_len

    @property
    def flat_dim(self) -> int:
        extent, length = self.filtered_dims
        return self.mix_maps * extent * (length // self.effective_pool)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.n_freq, self.n_channels, self.n_time)


def _encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    m = cfg.n_maps
    return {
        "bn0.gamma": (cfg.n_freq,),
        "bn0.beta": (cfg.n_freq,),
        "filter.weight": cfg.filter_shape,
        "bn1.gamma": (m,),
        "bn1.beta": (m,),
        "depthwise.weight": (m, cfg.temporal_kernel),
        "pointwise.weight": (cfg.mix_maps, m),
        "pointwise.bias": (cfg.mix_maps,),
        "bn2.gamma": (cfg.mix_maps,),
        "bn2.beta": (cfg.mix_maps,),
    }


def parameter_count(cfg: EncoderConfig, n_classes: int = 6, n_encoders: int = 2) -> int:
    """Learnable scalars of the whole model; running statistics excluded."""
    per_encoder = sum(int(np.prod(s)) for s in _encoder_shapes(cfg).values())
    head_in = n_encoders * cfg.flat_dim
    return n_encoders * per_encoder + n_classes * head_in + n_classes


@dataclass(eq=False)
class ModelParams:
    """Learnable tensors (``params``) and batch-norm running statistics (``buffers``).

    Names are ``<encoder>.<layer>.<tensor>`` for encoder tensors and
    ``head.weight`` / ``head.bias`` for the classifier.
    """

    config: EncoderConfig
    n_classes: int
    encoders: tuple[str, ...]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    seed: int = 0

    @property
    def head_in(self) -> int:
        return len(self.encoders) * self.config.flat_dim

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def encoder_params(self, name: str) -> dict[str, np.ndarray]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, self.n_classes, tuple(self.encoders),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.seed,
        )

    def astype(self, dtype) -> "ModelParams":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.buffers = {k: v.astype(dtype) for k, v in m.buffers.items()}
        return m

    def n_learnable(self) -> int:
        return sum(v.size for v in self.params.values())


def _fan_in(cfg: EncoderConfig, tensor: str) -> int:
    return {
        "filter.weight": cfg.filter_shape[1],
        "depthwise.weight": cfg.temporal_kernel,
        "pointwise.weight": cfg.n_maps,
        "pointwise.bias": cfg.n_maps,
    }[tensor]


def build_filter_variant(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
    """Freshly initialized tensors and running statistics for one encoder.

    Convolution weights are uniform in +-sqrt(1/fan_in); batch-norm scales
    start at 1 and shifts at 0.
    """
    params = {}
    for name, shape in _encoder_shapes(cfg).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(1.0 / _fan_in(cfg, name))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    buffers = {}
    for bn, n in (("bn0", cfg.n_freq), ("bn1", cfg.n_maps), ("bn2", cfg.mix_maps)):
        buffers[f"{bn}.running_mean"] = np.zeros(n, dtype=dtype)
        buffers[f"{bn}.running_var"] = np.ones(n, dtype=dtype)
    return params, buffers


def init_model(
    cfg: EncoderConfig,
    n_classes: int = 6,
    encoders: Sequence[str] = ("real", "imag"),
    seed: int = 0,
    dtype=np.float64,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    if n_classes < 2:
        raise InvalidConfig("need at least two classes")
    if len(set(encoders)) != len(encoders) or not encoders:
        raise InvalidConfig(f"encoder names must be unique and non-empty: {encoders}")
    rng = np.random.default_rng(seed) if rng is None else rng
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for enc in encoders:
        p, b = build_filter_variant(cfg, rng, dtype)
        params.update({f"{enc}.{k}": v for k, v in p.items()})
        buffers.update({f"{enc}.{k}": v for k, v in b.items()})
    head_in = len(encoders) * cfg.flat_dim
    bound = np.sqrt(1.0 / head_in)
    params["head.weight"] = rng.uniform(-bound, bound, size=(n_classes, head_in)).astype(dtype)
    params["head.bias"] = rng.uniform(-bound, bound, size=n_classes).astype(dtype)
    return ModelParams(cfg, n_classes, tuple(encoders), params, buffers, seed)


# --- normalization + filter stage ----------------------------------------------
#
# The first batch-norm is a per-map affine map y = a_f * x + d_f feeding a
# linear filter, so it is fused with the filter: the scale folds into the
# weights and the shift becomes a per-output-map constant.  Neither the
# normalized input nor its gradient is ever materialized.


def _weight_view(w, cfg: EncoderConfig):
    if cfg.filter_axis == "frequency":
        return w  # [M, F], input map on axis 1
    return w.reshape(cfg.n_freq, cfg.depth_multiplier, -1)  # [F, D, span]


def _scale_by_map(wv, v, cfg: EncoderConfig):
    if cfg.filter_axis == "frequency":
        return wv * v[None, :]
    return wv * v[:, None, None]


def _sum_by_map(wv, cfg: EncoderConfig):
    if cfg.filter_axis == "frequency":
        return wv.sum(axis=0)
    return wv.sum(axis=(1, 2))


def _filter_apply(wv, x, cfg: EncoderConfig):
    b, f, c, t = x.shape
    if cfg.filter_axis == "spatial":
        return np.matmul(wv[None], x).reshape(b, cfg.n_maps, 1, t)
    if cfg.filter_axis == "frequency":
        return np.einsum("bfct,of->boct", x, wv, optimize=True)
    h = np.matmul(x, wv.transpose(0, 2, 1)[None])  # [B, F, C, D]
    return h.transpose(0, 1, 3, 2).reshape(b, cfg.n_maps, c, 1)


def _filter_const(wv, d, cfg: EncoderConfig):
    """Filter response to the constant per-map input ``d``, shape [1, M, 1, 1]."""
    if cfg.filter_axis == "frequency":
        out = wv @ d
    else:
        out = (wv.sum(axis=2) * d[:, None]).reshape(-1)
    return out.reshape(1, -1, 1, 1)


def _filter_wgrad(dh, x, cfg: EncoderConfig):
    """Sum of dh * x over positions, shaped like the weight view."""
    b, f, c, t = x.shape
    d = cfg.depth_multiplier
    if cfg.filter_axis == "spatial":
        return np.matmul(dh.reshape(b, f, d, t), x.transpose(0, 1, 3, 2)).sum(axis=0)
    if cfg.filter_axis == "frequency":
        return np.einsum("boct,bfct->of", dh, x, optimize=True)
    return np.matmul(dh.reshape(b, f, d, c), x).sum(axis=0)


def _filter_ones_grad(dh, cfg: EncoderConfig):
    """Sum of dh over positions for a constant-one input, shaped like the weight view."""
    s = dh.sum(axis=(0, 2, 3))  # per output map
    if cfg.filter_axis == "frequency":
        return np.broadcast_to(s[:, None], (cfg.n_maps, cfg.n_freq))
    return np.broadcast_to(s.reshape(cfg.n_freq, cfg.depth_multiplier, 1), (cfg.n_freq, cfg.depth_multiplier, cfg.filter_shape[1]))


def _norm_filter_forward(x, gamma, beta, w, cfg: EncoderConfig, mode, running_mean=None, running_var=None):
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + L.BN_EPS)
    a = gamma * inv
    d = beta - a * mean
    wv = _weight_view(w, cfg)
    h = _filter_apply(_scale_by_map(wv, a, cfg), x, cfg) + _filter_const(wv, d, cfg)
    count = x.size // x.shape[1]
    cache = {"x": x, "mean": mean, "var": var, "inv": inv, "a": a, "d": d, "wv": wv, "count": count}
    return h, cache


def _norm_filter_backward(dh, cache, cfg: EncoderConfig):
    """Gradients (dgamma, dbeta, dw) of the fused stage; the input gradient is not needed."""
    wv = cache["wv"]
    gx = _filter_wgrad(dh, cache["x"], cfg)
    g1 = _filter_ones_grad(dh, cfg)
    # sum over each input map of dL/dy * x and of dL/dy
    ax = _sum_by_map(wv * gx, cfg)
    a1 = _sum_by_map(wv * g1, cfg)
    dgamma = cache["inv"] * (ax - cache["mean"] * a1)
    dbeta = a1
    dw = _scale_by_map(gx, cache["a"], cfg) + _scale_by_map(g1, cache["d"], cfg)
    return dgamma, dbeta, dw.reshape(cfg.filter_shape)


# --- encoder -----------------------------------------------------------------


def encoder_forward(x, p: dict, buffers: dict, cfg: EncoderConfig, mode: str = "eval"):
    """Run one encoder on ``x`` of shape [B, F, C, T]; returns ([B, flat_dim], cache)."""
    if mode not in ("train", "eval"):
        raise InvalidConfig(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ShapeMismatch("encoder input", ("B",) + cfg.input_shape, x.shape)
    cache: dict = {}
    h, cache["bn0"] = _norm_filter_forward(
        x, p["bn0.gamma"], p["bn0.beta"], p["filter.weight"], cfg, mode,
        buffers.get("bn0.running_mean"), buffers.get("bn0.running_var"),
    )
    h, cache["bn1"] = L.batchnorm_forward(
        h, p["bn1.gamma"], p["bn1.beta"], mode, buffers.get("bn1.running_mean"), buffers.get("bn1.running_var")
    )
    h, cache["elu1"] = L.elu_forward(h)
    h, cache["pool"] = L.avgpool_forward(h, cfg.effective_pool)
    h, cache["depthwise"] = L.depthwise_forward(h, p["depthwise.weight"])
    h, cache["pointwise"] = L.pointwise_forward(h, p["pointwise.weight"], p["pointwise.bias"])
    h, cache["bn2"] = L.batchnorm_forward(
        h, p["bn2.gamma"], p["bn2.beta"], mode, buffers.get("bn2.running_mean"), buffers.get("bn2.running_var")
    )
    h, cache["elu2"] = L.elu_forward(h)
    cache["shape"] = h.shape
    cache["cfg"] = cfg
    return h.reshape(h.shape[0], -1), cache


def encoder_backward(dfeat, cache) -> dict[str, np.ndarray]:
    cfg = cache["cfg"]
    g: dict[str, np.ndarray] = {}
    dh = dfeat.reshape(cache["shape"])
    dh = L.elu_backward(dh, cache["elu2"])
    dh, g["bn2.gamma"], g["bn2.beta"] = L.batchnorm_backward(dh, cache["bn2"])
    dh, g["pointwise.weight"], g["pointwise.bias"] = L.pointwise_backward(dh, cache["pointwise"])
    dh, g["depthwise.weight"] = L.depthwise_backward(dh, cache["depthwise"])
    dh = L.avgpool_backward(dh, cache["pool"])
    dh = L.elu_backward(dh, cache["elu1"])
    dh, g["bn1.gamma"], g["bn1.beta"] = L.batchnorm_backward(dh, cache["bn1"])
    g["bn0.gamma"], g["bn0.beta"], g["filter.weight"] = _norm_filter_backward(dh, cache["bn0"], cfg)
    return g


# --- full model --------------------------------------------------------------


@dataclass
class Batch:
    """One encoder input per entry of ``inputs`` (e.g. real and imaginary planes)."""

    inputs: tuple[np.ndarray, ...]
    labels: np.ndarray | None = None

    @classmethod
    def from_complex(cls, re, im, labels=None) -> "Batch":
        return cls((re, im), None if labels is None else np.asarray(labels))

    @property
    def size(self) -> int:
        return self.inputs[0].shape[0]


def model_forward(inputs: Sequence[np.ndarray], m: ModelParams, mode: str = "eval"):
    """Logits [B, n_classes] (no softmax) and a cache for :func:`model_backward`."""
    if len(inputs) != len(m.encoders):
        raise ShapeMismatch("encoder inputs", (len(m.encoders),), (len(inputs),))
    b = inputs[0].shape[0]
    feats, caches = [], []
    for name, x in zip(m.encoders, inputs):
        if x.shape[0] != b:
            raise ShapeMismatch(f"{name} batch", (b,), (x.shape[0],))
        f, c = encoder_forward(x, m.encoder_params(name), _enc_buffers(m, name), m.config, mode)
        feats.append(f)
        caches.append(c)
    z = np.concatenate(feats, axis=1)
    logits, head_cache = L.linear_forward(z, m.params["head.weight"], m.params["head.bias"])
    return logits, {"encoders": caches, "head": head_cache, "names": m.encoders, "flat": m.config.flat_dim}


def _enc_buffers(m: ModelParams, name: str) -> dict:
    pre = name + "."
    return {k[len(pre):]: v for k, v in m.buffers.items() if k.startswith(pre)}


def model_backward(dlogits, cache) -> dict[str, np.ndarray]:
    """Gradients for every learnable tensor, keyed like ``ModelParams.params``."""
    dz, dw, db = L.linear_backward(dlogits, cache["head"])
    grads = {"head.weight": dw, "head.bias": db}
    flat = cache["flat"]
    for i, (name, ec) in enumerate(zip(cache["names"], cache["encoders"])):
        for k, v in encoder_backward(dz[:, i * flat:(i + 1) * flat], ec).items():
            grads[f"{name}.{k}"] = v
    return grads


def loss_and_grads(m: ModelParams, batch: Batch):
    """Train-mode forward, cross-entropy, backward.  Returns (loss, grads, cache)."""
    logits, cache = model_forward(batch.inputs, m, "train")
    loss, dlogits = L.cross_entropy(logits, batch.labels)
    grads = model_backward(dlogits.astype(logits.dtype, copy=False), cache)
    return loss, grads, cache


def update_running_stats(m: ModelParams, cache) -> None:
    """Fold the batch statistics of a train-mode forward into ``m.buffers``."""
    for name, ec in zip(cache["names"], cache["encoders"]):
        for bn in ("bn0", "bn1", "bn2"):
            L.update_running_stats(
                m.buffers[f"{name}.{bn}.running_mean"], m.buffers[f"{name}.{bn}.running_var"], ec[bn]
            )


def predict_logits(m: ModelParams, inputs: Sequence[np.ndarray], batch_size: int = 64, transform=None):
    """Eval-mode logits for a whole set, in chunks.

    ``transform`` optionally maps each chunk's input tuple to a modified
    tuple (used for occlusion masking) without touching the source arrays.
    """
    n = inputs[0].shape[0]
    out = []
    for s in range(0, n, batch_size):
        chunk = tuple(np.asarray(x[s:s + batch_size], dtype=m.dtype) for x in inputs)
        if transform is not None:
            chunk = transform(chunk)
        logits, _ = model_forward(chunk, m, "eval")
        out.append(logits)
    if not out:
        return np.zeros((0, m.n_classes))
    return np.concatenate(out, axis=0)


# --- checkpoint --------------------------------------------------------------

CKPT_MAGIC = b"MSTNET01"


def save_checkpoint(m: ModelParams, path: str | Path) -> None:
    """magic, u32 config length + UTF-8 JSON config, u32 tensor count, then per
    tensor: u16 name length, name, u8 ndim, u32 dims, f32 payload."""
    config = {
        "encoder": asdict(m.config),
        "n_classes": m.n_classes,
        "seed": m.seed,
        "encoders": list(m.encoders),
        "dtype": np.dtype(m.dtype).name,
    }
    blob = json.dumps(config, sort_keys=True).encode()
    tensors = sorted(m.params.items()) + sorted(m.buffers.items())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFile(f"checkpoint ended at byte {len(data)}, needed {pos + n}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(8) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (n_blob,) = struct.unpack("<I", take(4))
    config = json.loads(take(n_blob))
    dtype = np.dtype(config.get("dtype", "float32"))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(dtype)
    if pos != len(data):
        raise FormatError("trailing bytes in checkpoint")
    cfg = EncoderConfig(**config["encoder"])
    params = {k: v for k, v in tensors.items() if "running_" not in k}
    buffers = {k: v for k, v in tensors.items() if "running_" in k}
    return ModelParams(cfg, config["n_classes"], tuple(config["encoders"]), params, buffers, config["seed"])
