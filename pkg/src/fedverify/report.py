"""SVG figures for a results bundle: ROC, accuracy/loss, error rates, comparison."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import DISPLAY_NAMES, ResultsBundle  # noqa: E402

log = logging.getLogger(__name__)

# text stays as <text> elements and ids are stable, so reruns give identical files
RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "fedverify",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "figure.dpi": 100,
}

FIGURES = {
    "roc": "roc.svg",
    "accuracy_loss": "accuracy_loss.svg",
    "error_rates": "error_rates.svg",
    "accuracy_comparison": "accuracy_comparison.svg",
}

FAR_GRID = np.linspace(0.0, 1.0, 201)


def _colors(methods):
    cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    return {m: cycle[i % len(cycle)] for i, m in enumerate(methods)}


def seed_band(bundle: ResultsBundle, method: str, field: str):
    """Rounds, and the seed mean/min/max of one RoundRecord field."""
    series = [[getattr(r, field) for r in bundle.records[(method, s)]] for s in bundle.seeds(method)]
    length = min(len(s) for s in series)
    arr = np.array([s[:length] for s in series], dtype=float)
    rounds = np.arange(1, length + 1)
    return rounds, arr.mean(axis=0), arr.min(axis=0), arr.max(axis=0)


def roc_on_grid(curve) -> np.ndarray:
    """Best TPR reachable at or below each FAR grid value (step ROC)."""
    far = np.array([p[0] for p in curve])
    tpr = np.array([p[1] for p in curve])
    out = np.zeros_like(FAR_GRID)
    for k, g in enumerate(FAR_GRID):
        hit = tpr[far <= g + 1e-12]
        out[k] = hit.max() if hit.size else 0.0
    return out


def _series_axes(ax, bundle, field, colors, ylabel):
    for m in bundle.methods():
        rounds, mean, lo, hi = seed_band(bundle, m, field)
        if rounds.size == 0:
            continue
        ax.plot(rounds, mean, color=colors[m], label=DISPLAY_NAMES[m], lw=1.4)
        ax.fill_between(rounds, lo, hi, color=colors[m], alpha=0.18, lw=0)
    ax.set_xlabel("Round")
    ax.set_ylabel(ylabel)


def plot_roc(bundle):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    colors = _colors(bundle.methods())
    for m in bundle.methods():
        curves = [roc_on_grid(bundle.roc[(m, s)]) for s in bundle.seeds(m) if (m, s) in bundle.roc]
        if not curves:
            continue
        arr = np.array(curves)
        ax.plot(FAR_GRID, arr.mean(axis=0), color=colors[m], label=DISPLAY_NAMES[m], lw=1.4)
        ax.fill_between(FAR_GRID, arr.min(axis=0), arr.max(axis=0), color=colors[m], alpha=0.18, lw=0)
    ax.plot([0, 1], [0, 1], color="grey", ls=":", lw=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("False accept rate")
    ax.set_ylabel("True accept rate")
    ax.set_title("ROC curves (final round)")
    ax.legend(loc="lower right")
    return fig


def plot_accuracy_loss(bundle):
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.8))
    colors = _colors(bundle.methods())
    _series_axes(ax_acc, bundle, "accuracy", colors, "Verification accuracy")
    _series_axes(ax_loss, bundle, "mean_loss", colors, "Contrastive loss (eval pairs)")
    ax_acc.set_title("Accuracy per round")
    ax_loss.set_title("Loss per round")
    ax_acc.legend(loc="lower right")
    fig.tight_layout()
    return fig


def plot_error_rates(bundle):
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    colors = _colors(bundle.methods())
    for ax, (field, label) in zip(axes, [("eer", "EER"), ("far", "FAR"), ("frr", "FRR")]):
        _series_axes(ax, bundle, field, colors, label)
        ax.set_title(f"{label} per round")
    axes[0].legend(loc="upper right")
    fig.tight_layout()
    return fig


def plot_accuracy_comparison(bundle):
    fig, ax = plt.subplots(figsize=(6.5, 4))
    _series_axes(ax, bundle, "accuracy", _colors(bundle.methods()), "Verification accuracy")
    ax.set_title("Accuracy by method per round")
    ax.legend(loc="lower right")
    ax.margins(y=0.05)
    return fig


PLOTTERS = {
    "roc": plot_roc,
    "accuracy_loss": plot_accuracy_loss,
    "error_rates": plot_error_rates,
    "accuracy_comparison": plot_accuracy_comparison,
}


def emit_plots(bundle: ResultsBundle, output_dir) -> list[Path]:
    """Write the four SVG figures; an empty bundle writes nothing."""
    if not bundle.records or not any(bundle.records.values()):
        log.warning("no round records to plot; skipping figures")
        return []
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with plt.rc_context(RC):
        for key, name in FIGURES.items():
            fig = PLOTTERS[key](bundle)
            path = out / name
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths
