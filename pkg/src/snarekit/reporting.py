"""Figure rendering from the delimited outputs (curves, reports, trajectories).

This module consumes the CSV bundles that training/evaluation emit and draws
matplotlib figures next to them; it never computes metrics itself. All
renderers write PNG files and return the written path.
"""

from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Ellipse

from .control import Scenario
from .evaluation import curves_from_csv, reports_from_csv

CURVE_PANELS = [
    ("gmean_opt_gap", "gmean optimality gap"),
    ("gmean_ineq_viol", "gmean ineq violation"),
    ("gmean_eq_viol", "gmean eq violation"),
    ("max_opt_gap", "max optimality gap"),
    ("max_ineq_viol", "max ineq violation"),
    ("max_eq_viol", "max eq violation"),
]

BAR_PANELS = [
    ("gmean_opt_gap", "gmean optimality gap"),
    ("gmean_ineq_error", "gmean ineq error"),
    ("gmean_eq_error", "gmean eq error"),
    ("max_opt_gap", "max optimality gap"),
    ("max_ineq_error", "max ineq error"),
    ("max_eq_error", "max eq error"),
]


def _ensure_dir(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def render_training_curves(curve_files: dict[str, str], out_png: str, decay_epoch: int | None = None) -> str:
    """2x3 grid of validation metrics vs epoch, one line per labeled run.

    `curve_files` maps a legend label (e.g. "snare seed 0") to a curves CSV.
    """
    fig, axes = plt.subplots(2, 3, figsize=(13, 7), sharex=True)
    for label, path in curve_files.items():
        rows = curves_from_csv(open(path).read())
        epochs = [r["epoch"] for r in rows]
        for ax, (key, _) in zip(axes.ravel(), CURVE_PANELS):
            ax.plot(epochs, [max(r[key], 1e-18) for r in rows], label=label, lw=1.2)
    for ax, (_, title) in zip(axes.ravel(), CURVE_PANELS):
        ax.set_yscale("log")
        ax.set_title(title, fontsize=10)
        ax.grid(True, alpha=0.3)
        if decay_epoch is not None:
            ax.axvline(decay_epoch, color="red", ls="--", lw=1.0)
    for ax in axes[1]:
        ax.set_xlabel("epoch")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    _ensure_dir(out_png)
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def render_report_bars(report_csv: str, out_png: str, title: str = "") -> str:
    """2x3 grid of bar charts, one bar per method, error bars over seeds.

    Aggregate rows (method names ending in :mean/:std) are ignored; the
    per-seed rows are re-aggregated here so the figure matches the raw data.
    """
    reports = [r for r in reports_from_csv(open(report_csv).read()) if ":" not in r.method]
    by_method: dict[str, list] = defaultdict(list)
    for r in reports:
        key = r.method if r.tol == 0 else f"{r.method}\ntol={r.tol:g}"
        by_method[key].append(r)
    methods = sorted(by_method)
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    xs = np.arange(len(methods))
    for ax, (key, panel_title) in zip(axes.ravel(), BAR_PANELS):
        vals = np.array([[getattr(r, key) for r in by_method[m]] for m in methods], dtype=float)
        means = np.maximum(vals.mean(axis=1), 1e-18)
        stds = vals.std(axis=1)
        ax.bar(xs, means, yerr=stds, capsize=3, color="tab:blue", ecolor="black")
        ax.set_yscale("log")
        ax.set_xticks(xs)
        ax.set_xticklabels(methods, fontsize=7)
        ax.set_title(panel_title, fontsize=10)
        ax.grid(True, axis="y", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _ensure_dir(out_png)
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def render_trajectories(trajectory_files: dict[str, str], scenario_path: str, out_png: str) -> str:
    """Planar paths over the scenario's obstacles, start markers and origin."""
    scenario = Scenario.load(scenario_path)
    fig, ax = plt.subplots(figsize=(8, 7))
    for obs in scenario.obstacles:
        ax.add_patch(
            Ellipse((obs.cx, obs.cy), 2 * obs.rx, 2 * obs.ry, fc="lightgray", ec="dimgray")
        )
    for label, path in trajectory_files.items():
        data = np.genfromtxt(path, delimiter=",", names=True)
        px = np.atleast_1d(data["px"])
        py = np.atleast_1d(data["py"])
        (line,) = ax.plot(px, py, lw=1.3, label=label)
        ax.plot(px[0], py[0], marker="o", color=line.get_color(), ms=5)
    ax.plot(0, 0, marker="*", color="black", ms=12)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    if len(trajectory_files) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _ensure_dir(out_png)
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png
