"""Figures and inspection dumps: sweep curves, BO traces, heightmap/ROI PGMs."""

from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cloudcore import save_pgm  # noqa: E402


def plot_sweep(sweep, path, metric: str = "shifted_accuracy") -> Path:
    """Accuracy against augmented-sample count, one line per strategy, baseline dashed."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    base = [r for r in sweep.rows if r["strategy"] == "baseline"]
    by_strategy = {}
    for r in sweep.rows:
        if r["strategy"] != "baseline":
            by_strategy.setdefault(r["strategy"], []).append(r)
    for name, rows in by_strategy.items():
        rows = sorted(rows, key=lambda r: r["count"])
        ax.plot([r["count"] for r in rows], [100 * r[metric] for r in rows], marker="o", ms=3, label=name)
    if base:
        ax.axhline(100 * base[0][metric], color="k", ls="--", lw=1, label="no augmentation")
    ax.set_xlabel("augmented samples")
    ax.set_ylabel(f"{metric.replace('_', ' ')} (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def read_bo_csv(path) -> tuple:
    """(dims, history) from a BO history CSV; history rows are (iteration, plan, value)."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    dims = tuple(rows[0][1:-1])
    hist = [(int(r[0]), tuple(int(v) for v in r[1:-1]), float(r[-1])) for r in rows[1:]]
    return dims, hist


def plot_bo(history, dims, path) -> Path:
    """Incumbent trace plus one pairwise panel per pair of plan dimensions."""
    path = Path(path)
    pairs = list(itertools.combinations(range(len(dims)), 2))
    fig, axes = plt.subplots(1, 1 + len(pairs), figsize=(4 * (1 + len(pairs)), 3.8))
    axes = np.atleast_1d(axes)
    values = np.array([v for _, _, v in history])
    plans = np.array([p for _, p, _ in history]).reshape(len(history), len(dims))
    axes[0].plot(np.arange(len(values)), 100 * values, "o", ms=3, color="0.5", label="evaluated")
    axes[0].plot(np.arange(len(values)), 100 * np.maximum.accumulate(values), "-", label="best so far")
    axes[0].set_xlabel("evaluation")
    axes[0].set_ylabel("accuracy (%)")
    axes[0].legend(fontsize=8)
    best = int(np.argmax(values))
    for ax, (i, j) in zip(axes[1:], pairs):
        sc = ax.scatter(plans[:, i], plans[:, j], c=100 * values, cmap="viridis", s=30)
        ax.plot(plans[best, i], plans[best, j], "r*", ms=12)
        ax.set_xlabel(dims[i])
        ax.set_ylabel(dims[j])
        fig.colorbar(sc, ax=ax, fraction=0.046)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def dump_rois(cells, rois, out_dir, stem: str, probs=None) -> Path:
    """Write the heightmap, one PGM per ROI patch, and a JSON record of boxes/scores."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pgm(np.asarray(cells, dtype=np.uint8), out / f"{stem}.pgm")
    records = []
    for k, roi in enumerate(rois):
        name = f"{stem}-roi{k:02d}.pgm"
        save_pgm(roi.patch, out / name)
        rec = {**roi.to_json(), "patch": name}
        if probs is not None:
            rec["p_casualty"] = float(probs[k])
        records.append(rec)
    path = out / f"{stem}.json"
    path.write_text(json.dumps({"heightmap": f"{stem}.pgm", "rois": records}, indent=1))
    return path
