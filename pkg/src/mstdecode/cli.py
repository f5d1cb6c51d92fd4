"""Command-line entry point: ``mstdecode <subcommand> [options]``.

Every option can also come from ``--config file.json`` (a flat object keyed by
option name, or a previous run manifest); flags given on the command line win.
All outputs land under ``--out`` together with ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidConfig, MstDecodeError, ShapeMismatch
from .importance import (
    FORM_MODES,
    compare_forms,
    frequency_importance,
    frequency_range_sweep,
    model_config_for,
    temporal_importance,
)
from .mst import MstParams, SpectrogramSet, load_spectrograms, save_spectrograms, transform_dataset
from .network import FILTER_AXES, load_checkpoint, save_checkpoint
from .signal_core import load_dataset, read_dataset_header, save_dataset, sidecar_path
from .syndata import SynthConfig, generate
from .trainer import TrainConfig, evaluate, fit, kfold_split, train, write_fold_csv

log = logging.getLogger("mstdecode")

DATASET_FILE = "dataset.bin"
SPECTROGRAM_FILE = "spectrograms.bin"
MANIFEST_FILE = "manifest.json"


class ConfigError(Exception):
    """Bad option value or unknown key; maps to exit code 2."""


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _strs(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


# option name -> (type, default, help); defaults follow the published setup where one exists
OPTIONS = {
    "dataset": (str, None, "dataset directory, dataset.bin or spectrograms.bin"),
    "out": (str, "out", "output directory"),
    "seed": (int, 0, "random seed"),
    # synthetic data
    "classes": (int, 6, "number of classes"),
    "trials_per_class": (int, 20, "trials per class"),
    "channels": (int, 128, "channels"),
    "time": (int, 300, "samples per active segment"),
    "snr_db": (float, 10.0, "signal-to-noise ratio in dB"),
    "onset_ms": (float, 50.0, "onset of the planted response"),
    "carriers": (_floats, None, "per-class carrier frequencies in Hz, comma-separated"),
    "phase_coded": (bool, False, "classes 0 and 1 share a carrier and differ only in phase"),
    # transform
    "f_lo": (float, 0.0, "lowest kept frequency in Hz"),
    "f_hi": (float, 52.0, "highest kept frequency in Hz"),
    "context": (str, "background", "'background' or 'none'"),
    # model and training
    "mode": (str, "real_imag_parallel", f"data form, one of {sorted(FORM_MODES)}"),
    "filter_axis": (str, "spatial", f"first filter axis, one of {list(FILTER_AXES)}"),
    "epochs": (int, 200, "training epochs"),
    "batch": (int, 128, "batch size"),
    "lr": (float, 1e-6, "Adam learning rate"),
    "weight_decay": (float, 1e-4, "L2 weight decay"),
    "folds": (int, 5, "cross-validation folds"),
    "dtype": (str, "float32", "training precision"),
    # evaluation and importance
    "model": (str, None, "checkpoint file"),
    "axis": (str, "time", "'time' or 'frequency'"),
    "stride": (int, 1, "window stride in samples"),
    "window": (int, 5, "window length in samples"),
    "threshold": (float, None, "accuracy threshold (default chance + 0.1)"),
    "fold": (int, 0, "held-out fold used for importance when no --model is given"),
    "ranges": (_floats, [128.0, 52.0, 38.0], "upper frequency bounds for the sweep"),
    "modes": (_strs, list(FORM_MODES), "data forms to compare"),
}

SYNTH_KEYS = ["classes", "trials_per_class", "channels", "time", "snr_db", "onset_ms", "carriers", "phase_coded"]
MST_KEYS = ["f_lo", "f_hi", "context"]
TRAIN_KEYS = ["epochs", "batch", "lr", "weight_decay", "folds", "dtype", "filter_axis"]

COMMANDS = {
    "generate": ("draw a synthetic dataset", ["out", "seed"] + SYNTH_KEYS),
    "transform": ("cache MST spectrograms", ["dataset", "out"] + MST_KEYS),
    "train": ("cross-validated training", ["dataset", "out", "seed", "mode"] + MST_KEYS + TRAIN_KEYS),
    "eval": ("evaluate a checkpoint", ["dataset", "out", "model"] + MST_KEYS),
    "importance": (
        "occlusion importance curve",
        ["dataset", "out", "seed", "mode", "model", "axis", "stride", "window", "threshold", "fold"]
        + MST_KEYS + TRAIN_KEYS,
    ),
    "sweep": ("retrain over frequency ranges", ["dataset", "out", "seed", "ranges", "mode"] + MST_KEYS + TRAIN_KEYS),
    "compare": ("compare data forms", ["dataset", "out", "seed", "modes"] + MST_KEYS + TRAIN_KEYS),
    "info": ("describe a dataset file", ["dataset"]),
}

# The sweep retrains a single encoder, so its default form differs.
COMMAND_DEFAULTS = {"sweep": {"mode": "real_only"}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mstdecode", description="MST spectrogram decoding pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "info":
            p.add_argument("path", nargs="?", help="dataset file or directory")
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in keys:
            typ, default, text = OPTIONS[key]
            default = COMMAND_DEFAULTS.get(name, {}).get(key, default)
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                               help=f"{text} (default {default})")
            else:
                alias = ["--batch-size"] if key == "batch" else []
                p.add_argument(flag, *alias, dest=key, type=typ, default=None, help=f"{text} (default {default})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON file, then explicit flags."""
    keys = COMMANDS[command][1]
    conf = {k: OPTIONS[k][1] for k in keys}
    conf.update(COMMAND_DEFAULTS.get(command, {}))
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
        if isinstance(loaded, dict) and "config" in loaded and "command" in loaded:
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise ConfigError("config: expected a JSON object")
        for key, value in loaded.items():
            if key not in conf:
                raise ConfigError(f"config: unknown key {key!r} for '{command}'")
            typ = OPTIONS[key][0]
            if value is not None and typ in (_floats, _strs) and isinstance(value, str):
                value = typ(value)
            conf[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    if command == "info" and args.path:
        conf["dataset"] = args.path
    return conf


def _check(conf: dict) -> None:
    if "mode" in conf and conf["mode"] not in FORM_MODES:
        raise ConfigError(f"mode: unknown value {conf['mode']!r}, choose from {sorted(FORM_MODES)}")
    for m in conf.get("modes") or []:
        if m not in FORM_MODES:
            raise ConfigError(f"modes: unknown value {m!r}, choose from {sorted(FORM_MODES)}")
    if "axis" in conf and conf["axis"] not in ("time", "frequency"):
        raise ConfigError(f"axis: expected 'time' or 'frequency', got {conf['axis']!r}")
    if "filter_axis" in conf and conf["filter_axis"] not in FILTER_AXES:
        raise ConfigError(f"filter_axis: expected one of {list(FILTER_AXES)}, got {conf['filter_axis']!r}")
    if "context" in conf and conf["context"] not in ("background", "none"):
        raise ConfigError(f"context: expected 'background' or 'none', got {conf['context']!r}")
    for key in ("stride", "window", "epochs", "batch", "folds", "trials_per_class", "channels", "time"):
        if key in conf and conf[key] is not None and conf[key] < 1:
            raise ConfigError(f"{key}: must be >= 1, got {conf[key]}")


def _train_config(conf: dict) -> TrainConfig:
    return TrainConfig(
        epochs=conf["epochs"], batch_size=conf["batch"], lr=conf["lr"], weight_decay=conf["weight_decay"],
        seed=conf["seed"], folds=conf["folds"], dtype=conf["dtype"],
    )


def _dataset_file(path: str | None) -> Path:
    if not path:
        raise ConfigError("dataset: a dataset path is required")
    p = Path(path)
    if p.is_dir():
        for name in (SPECTROGRAM_FILE, DATASET_FILE):
            if (p / name).exists():
                return p / name
        raise FileNotFoundError(f"no {DATASET_FILE} or {SPECTROGRAM_FILE} in {p}")
    return p


def _is_spectrogram_file(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(8) == b"MSTSPEC1"


def load_spectrogram_set(conf: dict) -> SpectrogramSet:
    """Spectrograms for the configured frequency range, transforming raw data if needed."""
    path = _dataset_file(conf["dataset"])
    if _is_spectrogram_file(path):
        return load_spectrograms(path).crop(conf["f_lo"], conf["f_hi"])
    ds = load_dataset(path)
    return transform_dataset(ds, MstParams(sample_rate_hz=ds.sample_rate_hz), conf["f_lo"], conf["f_hi"], conf["context"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_generate(conf: dict, out: Path) -> dict:
    cfg = SynthConfig(
        n_classes=conf["classes"], trials_per_class=conf["trials_per_class"], n_channels=conf["channels"],
        n_time=conf["time"], onset_ms=conf["onset_ms"],
        carrier_hz=tuple(conf["carriers"]) if conf["carriers"] else None,
        snr_db=conf["snr_db"], phase_coded=bool(conf["phase_coded"]), seed=conf["seed"],
    )
    ds = generate(cfg)
    save_dataset(ds, out / DATASET_FILE)
    return {"dataset": str(out / DATASET_FILE), "n_trials": len(ds)}


def cmd_transform(conf: dict, out: Path) -> dict:
    ss = load_spectrogram_set(conf)
    save_spectrograms(ss, out / SPECTROGRAM_FILE)
    return {"spectrograms": str(out / SPECTROGRAM_FILE), "shape": list(ss.re.shape)}


def cmd_train(conf: dict, out: Path) -> dict:
    ss = load_spectrogram_set(conf)
    form = FORM_MODES[conf["mode"]]
    tc = _train_config(conf)
    cfg = model_config_for(ss, filter_axis=conf["filter_axis"])
    res = train(ss.features(form), ss.labels, cfg, tc, ss.n_classes, tuple(form.split("+")))
    write_fold_csv(res, out / "folds.csv")
    with open(out / "fold_reports.jsonl", "w") as fh:
        for rep in res.reports:
            fh.write(rep.to_json() + "\n")
    for rep, model in zip(res.reports, res.models):
        save_checkpoint(model, out / f"model_fold{rep.fold_id}.ckpt")
    print(f"accuracy {res.mean_accuracy:.4f} ± {res.std_accuracy:.4f} over {len(res.reports)} folds")
    return {"mean_accuracy": res.mean_accuracy, "std_accuracy": res.std_accuracy,
            "fold_accuracies": res.accuracies.tolist()}


def _model_inputs(model, ss: SpectrogramSet):
    if model.config.n_freq != ss.dims[0]:
        raise ShapeMismatch("frequency bins", (model.config.n_freq,), (ss.dims[0],))
    return ss.features("+".join(model.encoders))


def cmd_eval(conf: dict, out: Path) -> dict:
    if not conf["model"]:
        raise ConfigError("model: a checkpoint path is required")
    model = load_checkpoint(conf["model"])
    ss = load_spectrogram_set(conf)
    res = evaluate(model, _model_inputs(model, ss), ss.labels)
    report = {"accuracy": res.accuracy, "confusion": res.confusion.tolist(), "n_trials": len(ss)}
    _write_json(out / "eval.json", report)
    print(f"accuracy {res.accuracy:.4f} on {len(ss)} trials")
    return {"accuracy": res.accuracy}


def cmd_importance(conf: dict, out: Path) -> dict:
    ss = load_spectrogram_set(conf)
    if conf["model"]:
        model = load_checkpoint(conf["model"])
        inputs, labels = _model_inputs(model, ss), ss.labels
    else:
        # Train on every fold but one and measure importance on the held-out fold.
        tc = _train_config(conf)
        form = FORM_MODES[conf["mode"]]
        splits = kfold_split(ss.labels, tc.folds, tc.seed)
        if not 0 <= conf["fold"] < len(splits):
            raise ConfigError(f"fold: must lie in [0, {len(splits) - 1}]")
        tr, va = splits[conf["fold"]]
        rng = np.random.default_rng(np.random.SeedSequence(tc.seed).spawn(len(splits))[conf["fold"]])
        x = ss.features(form)
        model, _, _ = fit([a[tr] for a in x], ss.labels[tr], model_config_for(ss, filter_axis=conf["filter_axis"]),
                          tc, ss.n_classes, tuple(form.split("+")), rng)
        save_checkpoint(model, out / "model.ckpt")
        inputs, labels = [a[va] for a in x], ss.labels[va]
    if conf["axis"] == "time":
        curve = temporal_importance(model, inputs, labels, conf["window"], conf["stride"], threshold=conf["threshold"])
    else:
        curve = frequency_importance(model, inputs, labels, ss.freq_grid_hz, threshold=conf["threshold"])
    stem = f"importance_{conf['axis']}"
    curve.to_csv(out / f"{stem}.csv")
    curve.to_svg(out / f"{stem}.svg")
    summary = curve.summary()
    _write_json(out / f"{stem}.json", summary)
    print(f"{len(curve)} points, baseline {curve.baseline_accuracy:.4f}, "
          f"first above {curve.threshold:.3f}: {summary['first_above_threshold']}")
    return summary


def cmd_sweep(conf: dict, out: Path) -> dict:
    ss = load_spectrogram_set(conf)
    form = FORM_MODES[conf["mode"]]
    rows = frequency_range_sweep(ss, conf["ranges"], _train_config(conf), form, conf["f_lo"],
                                 filter_axis=conf["filter_axis"])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f_hi_hz", "n_freq", "mean_accuracy", "std_accuracy"])
        for r in rows:
            w.writerow([f"{r.f_hi_hz:g}", r.n_freq, f"{r.mean_accuracy:.6f}", f"{r.std_accuracy:.6f}"])
    for r in rows:
        print(f"f_hi {r.f_hi_hz:g} Hz: {r.mean_accuracy:.4f} ± {r.std_accuracy:.4f} ({r.seconds:.1f} s)")
    return {"rows": [{"f_hi_hz": r.f_hi_hz, "seconds": r.seconds} for r in rows]}


def cmd_compare(conf: dict, out: Path) -> dict:
    ss = load_spectrogram_set(conf)
    res = compare_forms(ss, _train_config(conf), conf["modes"], filter_axis=conf["filter_axis"])
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "mean_accuracy", "std_accuracy"])
        for r in res.values():
            w.writerow([r.mode, f"{r.mean_accuracy:.6f}", f"{r.std_accuracy:.6f}"])
    for r in res.values():
        print(f"{r.mode}: {r.mean_accuracy:.4f} ± {r.std_accuracy:.4f}")
    return {m: r.mean_accuracy for m, r in res.items()}


def cmd_info(conf: dict, out: Path | None) -> dict:
    path = _dataset_file(conf["dataset"])
    if _is_spectrogram_file(path):
        ss = load_spectrograms(path)
        n, f, c, t = ss.re.shape
        print(f"{n} trials, {ss.n_classes} classes, {f} frequencies × {c}×{t}")
        return {"n_trials": n, "n_classes": ss.n_classes, "shape": [f, c, t]}
    head = read_dataset_header(path)
    print(f"{head['n_trials']} trials, {head['n_classes']} classes, {head['n_channels']}×{head['n_time']}")
    side = sidecar_path(path)
    if side.exists():
        names = json.loads(side.read_text()).get("class_names")
        if names:
            print("classes: " + ", ".join(names))
    return head


HANDLERS = {
    "generate": cmd_generate, "transform": cmd_transform, "train": cmd_train, "eval": cmd_eval,
    "importance": cmd_importance, "sweep": cmd_sweep, "compare": cmd_compare, "info": cmd_info,
}


def _versions() -> dict:
    import matplotlib

    return {"mstdecode": __version__, "numpy": np.__version__, "matplotlib": matplotlib.__version__,
            "python": platform.python_version()}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        conf = resolve_config(args.command, args)
        _check(conf)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(conf["out"]) if "out" in conf else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status, code, result = "ok", 0, None
    try:
        result = HANDLERS[args.command](conf, out)
    except (ConfigError, InvalidConfig) as exc:
        status, code = f"config error: {exc}", 2
    except (MstDecodeError, ValueError, OSError) as exc:
        status, code = f"error: {exc}", 1
    if code:
        print(status, file=sys.stderr)
    if out is not None:
        _write_json(out / MANIFEST_FILE, {
            "command": args.command,
            "config": conf,
            "seed": conf.get("seed"),
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "status": status,
            "result": result,
        })
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
