"""Figure and table rendering for training runs and packed models."""
from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def load_history(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def history_to_csv(records, path):
    """Flatten history records into one delimited table."""
    layer_names = sorted(records[0].get("levels_high") or records[0]["levels_low"] or {})
    header = ["epoch", "phase", "trainable", "train_loss", "acc_low", "acc_high"]
    header += [f"levels_low.{n}" for n in layer_names]
    header += [f"levels_high.{n}" for n in layer_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            row = [rec["epoch"], rec["phase"], rec["trainable"], rec["train_loss"],
                   rec["acc_low"], rec["acc_high"]]
            row += [(rec["levels_low"] or {}).get(n) for n in layer_names]
            row += [(rec["levels_high"] or {}).get(n) for n in layer_names]
            writer.writerow(row)


def _phase_boundary(records):
    for rec in records:
        if rec["phase"] == 2:
            return rec["epoch"] - 0.5
    return None


def plot_accuracy(records, path):
    """Both modes' test accuracy per epoch, phase transition marked."""
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(epochs, [100 * r["acc_low"] for r in records], label="low precision", lw=1.4)
    if records and records[0]["acc_high"] is not None:
        ax.plot(epochs, [100 * r["acc_high"] for r in records],
                label="high precision", lw=1.4)
    boundary = _phase_boundary(records)
    if boundary is not None:
        ax.axvline(boundary, color="gray", ls="--", lw=1, label="phase transition")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_level_counts(records, path):
    """Max distinct index levels across layers per epoch, both modes."""
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    low = [max(r["levels_low"].values()) if r["levels_low"] else 0 for r in records]
    ax.step(epochs, low, where="mid", label="low precision", lw=1.4)
    if records and records[0]["levels_high"] is not None:
        high = [max(r["levels_high"].values()) if r["levels_high"] else 0 for r in records]
        ax.step(epochs, high, where="mid", label="high precision", lw=1.4)
    boundary = _phase_boundary(records)
    if boundary is not None:
        ax.axvline(boundary, color="gray", ls="--", lw=1, label="phase transition")
    ax.set_xlabel("epoch")
    ax.set_ylabel("max distinct index levels")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_index_histograms(state, path):
    """Per-layer index histograms, low mode on top, high mode underneath."""
    entries = state.quant_entries()
    rows = 2 if state.has_upscale else 1
    fig, axes = plt.subplots(rows, max(len(entries), 1),
                             figsize=(2.6 * max(len(entries), 1), 2.4 * rows),
                             squeeze=False)
    for col, entry in enumerate(entries):
        low = state.levels_low(entry)
        _bar_hist(axes[0][col], low, f"{entry.name}\nb={state.bits} s={low.scale:.4g}")
        if rows == 2:
            high = state.levels_high(entry)
            _bar_hist(axes[1][col], high, f"b={state.bits + 1} s={high.scale:.4g}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _bar_hist(ax, levels, title):
    lo, hi = levels.spec.lower_clip, levels.spec.upper_clip
    values = np.arange(lo, hi + 1)
    counts = np.bincount((levels.indices.reshape(-1) - lo).astype(np.int64),
                         minlength=hi - lo + 1)
    ax.bar(values, counts, width=0.85)
    ax.set_title(title, fontsize=8)
    ax.set_xticks(values if len(values) <= 16 else values[::len(values) // 8])
    ax.tick_params(labelsize=7)


def render_run_report(records, out_dir):
    """Write the standard figure/table set for one run directory."""
    import os

    history_to_csv(records, os.path.join(out_dir, "history.csv"))
    plot_accuracy(records, os.path.join(out_dir, "accuracy.png"))
    plot_level_counts(records, os.path.join(out_dir, "levels.png"))
