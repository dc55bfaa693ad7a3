"""Report figures (PNG via the Agg backend) and delimited table output."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finite(x):
    return float(x) if x is not None and math.isfinite(float(x)) else None


def jsonable(obj):
    """Recursively convert numpy values; non-finite floats become strings ("inf", "nan")."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_report(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(report), indent=2))


def write_csv(path, rows):
    """Rows are flat dicts; nested {"mean": ...} cells are written as their mean."""
    rows = [{k: (v["mean"] if isinstance(v, dict) and "mean" in v else v) for k, v in r.items()
             if not isinstance(v, (list, tuple))} for r in rows]
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def plot_history(history, path, title="training"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [h["iteration"] for h in history]
    for key in ("loss", "I", "S", "F", "motion"):
        vals = [h.get(key) for h in history]
        if any(v is not None for v in vals):
            ax.plot(its, [np.nan if v is None else v for v in vals], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_dynamic_noise(report, path):
    table = report["table"]
    modes = list(dict.fromkeys(r["mode"] for r in table))
    scales = report["scales"]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    width = 0.8 / len(modes)
    for ax, key in zip(axes, ("e_t", "psnr")):
        for k, m in enumerate(modes):
            vals = [next(r[key] for r in table if r["mode"] == m and r["scale"] == s) for s in scales]
            vals = [_finite(v) or 0.0 for v in vals]
            ax.bar(np.arange(len(scales)) + k * width, vals, width, label=m)
        ax.set_xticks(np.arange(len(scales)) + 0.4 - width / 2)
        ax.set_xticklabels([f"{int(s * 100)}%" for s in scales])
        ax.set_xlabel("box noise scale")
        ax.set_ylabel({"e_t": "mean e_t (m), held-out frames", "psnr": "PSNR (dB)"}[key])
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_rows(report, path, metrics):
    """One panel per metric, one bar (mean with std error bar) per table row."""
    table = report["table"]
    names = [r["row"] for r in table]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.6 * len(metrics), 3.4))
    axes = np.atleast_1d(axes)
    for ax, key in zip(axes, metrics):
        means = [_finite(r[key]["mean"]) or 0.0 for r in table]
        stds = [_finite(r[key]["std"]) or 0.0 for r in table]
        ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="tab:blue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bench(report, path):
    stages = report["stages"]
    inc = stages["increments"]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bottom = 0.0
    for name, value in inc.items():
        ax.barh([0], [value * 1e3], left=[bottom], label=name)
        bottom += value * 1e3
    ax.set_yticks([])
    ax.set_xlabel("milliseconds per frame (cumulative)")
    ax.set_title(f"{report['n_gaussians']} Gaussians, {report['width']}x{report['height']}")
    ax.legend(fontsize=8, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_image_pairs(pairs, path, titles=("render", "target")):
    """Grid of (rendered, target) image pairs, clipped to [0, 1]."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 2, figsize=(6, 2.2 * n), squeeze=False)
    for r, (a, b) in enumerate(pairs):
        for c, img in enumerate((a, b)):
            axes[r, c].imshow(np.clip(img, 0.0, 1.0))
            axes[r, c].axis("off")
            if r == 0:
                axes[r, c].set_title(titles[c])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_tracks(tracks, gt, path):
    """Top-down trajectories of fitted tracks against the ground truth."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt.states[:, 0], gt.states[:, 1], "k-", lw=2, label="ground truth")
    for name, tr in tracks.items():
        ax.plot(tr.states[:, 0], tr.states[:, 1], ".-", lw=1, ms=3, label=name)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
