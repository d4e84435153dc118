"""Figure rendering for experiment reports.

Renders the comparison bar charts and training curves to image files next to
the delimited tables the harness writes. Uses the Agg backend so it works
headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

BAR_COLOR = "#4878a8"
HIGHLIGHT_COLOR = "#b2453c"
HIGHLIGHT_MODELS = ("pnn", "pddt")


def comparison_bar_chart(reports, path, title=None) -> Path:
    """Mean metric with a std whisker per model, personalized models
    highlighted; accuracy charts get a 0..1 axis."""
    path = Path(path)
    reports = sorted(reports, key=lambda r: r.mean,
                     reverse=reports[0].metric != "loss")
    labels = [f"{r.model}\n({r.framing})" for r in reports]
    means = [r.mean for r in reports]
    stds = [r.std for r in reports]
    colors = [HIGHLIGHT_COLOR if r.model in HIGHLIGHT_MODELS else BAR_COLOR
              for r in reports]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(reports)), 4.0))
    x = np.arange(len(reports))
    ax.bar(x, means, yerr=stds, capsize=3, color=colors)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    metric = reports[0].metric
    ax.set_ylabel(f"test {metric}")
    if metric == "accuracy":
        ax.set_ylim(0.0, 1.0)
        ax.axhline(1.0, color="gray", lw=0.5, ls=":")
    domain = reports[0].domain
    ax.set_title(title or f"{domain}: mean test {metric} over "
                          f"{len(reports[0].per_seed)} seeds")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def loss_curve_plot(curves: dict, path, title="training loss") -> Path:
    """One line per labeled loss curve."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, curve in curves.items():
        ax.plot(np.arange(1, len(curve) + 1), curve, label=label, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def adaptation_accuracy_plot(points: dict, path,
                             title="accuracy after adapting on k observations") -> Path:
    """Accuracy on the remainder of held-out schedules vs adaptation prefix."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ks = sorted(points)
    ax.plot(ks, [points[k] for k in ks], marker="o")
    ax.set_xlabel("observations adapted on")
    ax.set_ylabel("accuracy on remaining observations")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
