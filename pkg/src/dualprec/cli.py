"""Command-line interface: train, eval, switch, inspect, report.

Exit codes are a stable contract for scripting: 0 success, 1 runtime
failure, 2 usage or validation error. Commands never modify their inputs;
outputs go to new paths or an explicit --out.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as config_mod
from . import data as data_io
from . import packstore
from .config import ConfigError, TrainConfig
from .engine import EngineError
from .packstore import PackError


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _require_file(path, what="file"):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _read_bytes(path, what="file"):
    _require_file(path, what)
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_OVERRIDES = {
    "epochs": "epochs",
    "phase1_epochs": "phase1_epochs",
    "bits": "bits",
    "seed": "seed",
    "data_dir": "data_dir",
    "dataset": "dataset",
    "arch": "arch",
    "batch_size": "batch_size",
}


def _resolve_train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        config = config_mod.load_config_file(args.config, config)
    overrides = {}
    for arg_name, key in _TRAIN_OVERRIDES.items():
        value = getattr(args, arg_name)
        if value is not None:
            overrides[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    config_mod.apply_overrides(config, overrides)
    config.validate()
    return config


def cmd_train(args) -> int:
    from . import report
    from .trainer import run_training

    config = _resolve_train_config(args)
    out_dir = args.out or os.path.join(
        "runs", f"{config.arch}-{config.dataset}-b{config.bits}-s{config.seed}")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(config_mod.format_config(config))

    trainer, history = run_training(
        config, history_path=os.path.join(out_dir, "history.log"))

    stream = packstore.pack(trainer.export_state(), include_upscale=True)
    with open(os.path.join(out_dir, "model.dpw"), "wb") as fh:
        fh.write(stream)
    report.render_run_report(history, out_dir)

    last = history[-1]
    print(f"run directory: {out_dir}")
    print(f"final accuracy: low {100 * last['acc_low']:.2f}%  "
          f"high {100 * last['acc_high']:.2f}%")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_config(args) -> TrainConfig:
    if args.config:
        config = config_mod.load_config_file(args.config)
    else:
        config = TrainConfig()
    if args.dataset is not None:
        config.dataset = args.dataset
    if args.data_dir is not None:
        config.data_dir = args.data_dir
    if args.seed is not None:
        config.seed = args.seed
    if args.limit:
        config.test_limit = config.train_limit = args.limit
    return config


def cmd_eval(args) -> int:
    data = _read_bytes(args.model, "model file")
    state = packstore.unpack(data)
    if args.precision == "high" and not state.has_upscale:
        raise UsageError("--precision high on a stream without the up-scale section")
    net = state.to_network(args.precision)

    config = _eval_config(args)
    train_set, test_set = data_io.load_datasets(config)
    dataset = train_set if args.split == "train" else test_set
    correct = 0
    for xb, yb in data_io.iter_batches(dataset, 500):
        logits, _ = net.forward(xb, train=False)
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    result = {
        "model": args.model,
        "precision": args.precision,
        "split": dataset.split,
        "n": len(dataset),
        "accuracy": correct / len(dataset),
        "levels": state.level_counts(args.precision),
    }
    print(json.dumps(result, indent=2))
    return 0


# ---------------------------------------------------------------------------
# switch
# ---------------------------------------------------------------------------

def cmd_switch(args) -> int:
    data = _read_bytes(args.model, "model file")
    stem = args.model[:-4] if args.model.endswith(".dpw") else args.model
    if args.direction == "down":
        stream, plane = packstore.switch_precision(data, "down")
        out = args.out or f"{stem}.low.dpw"
        plane_path = args.bitplane or f"{stem}.dpb"
        with open(out, "wb") as fh:
            fh.write(stream)
        with open(plane_path, "wb") as fh:
            fh.write(plane)
        print(f"wrote {out} and detached bit-plane {plane_path}")
    else:
        if not args.bitplane:
            raise UsageError("--direction up needs --bitplane")
        plane = _read_bytes(args.bitplane, "bit-plane file")
        stream, _ = packstore.switch_precision(data, "up", plane)
        out = args.out or f"{stem}.dual.dpw"
        with open(out, "wb") as fh:
            fh.write(stream)
        print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    data = _read_bytes(args.model, "model file")
    state = packstore.unpack(data)
    layers = []
    for entry in state.quant_entries():
        low = state.levels_low(entry)
        info = {
            "name": entry.name,
            "shape": list(entry.shape),
            "bits_low": state.bits,
            "scale_low": low.scale,
            "histogram_low": _histogram(low),
            "distinct_low": low.distinct_levels(),
        }
        if state.has_upscale:
            high = state.levels_high(entry)
            info.update({
                "bits_high": state.bits + 1,
                "scale_high": high.scale,
                "histogram_high": _histogram(high),
                "distinct_high": high.distinct_levels(),
            })
        layers.append(info)
    doc = {
        "arch": state.arch,
        "bits": state.bits,
        "scale_rule": state.scale_rule.value,
        "has_upscale": state.has_upscale,
        "layers": layers,
    }
    print(json.dumps(doc, indent=2))
    if args.plot:
        from . import report

        report.plot_index_histograms(state, args.plot)
    return 0


def _histogram(levels):
    lo, hi = levels.spec.lower_clip, levels.spec.upper_clip
    counts = np.bincount((levels.indices.reshape(-1) - lo).astype(np.int64),
                         minlength=hi - lo + 1)
    return {str(level): int(c) for level, c in zip(range(lo, hi + 1), counts)}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    from . import report

    _require_file(args.history, "history log")
    records = report.load_history(args.history)
    if not records:
        raise UsageError(f"history log is empty: {args.history}")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.history))
    os.makedirs(out_dir, exist_ok=True)
    report.render_run_report(records, out_dir)
    print(f"wrote history.csv, accuracy.png, levels.png to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualprec",
        description="Train and serve dual-precision quantized networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run two-phase dual-precision training")
    p.add_argument("config", nargs="?", help="key = value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int)
    p.add_argument("--bits", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synth"])
    p.add_argument("--arch", choices=["mlp256", "miniconvbn"])
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    p.add_argument("--out", help="run directory (default runs/<name>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a packed model")
    p.add_argument("model")
    p.add_argument("--precision", choices=["low", "high"], default="low")
    p.add_argument("--config", help="config (e.g. a run's config.resolved) naming the dataset")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synth"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--seed", type=int, help="seed for the synth dataset")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("switch", help="attach or strip the up-scaling bit-plane")
    p.add_argument("model")
    p.add_argument("--direction", choices=["up", "down"], required=True)
    p.add_argument("--bitplane", help="detached .dpb path (input for up, output for down)")
    p.add_argument("--out", help="output .dpw path")
    p.set_defaults(func=cmd_switch)

    p = sub.add_parser("inspect", help="per-layer scales, histograms, level counts")
    p.add_argument("model")
    p.add_argument("--plot", help="also render histogram figure to this path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="render figures and CSV from a history log")
    p.add_argument("history")
    p.add_argument("--out", help="output directory (default: alongside the log)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, PackError, data_io.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EngineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
