"""Matplotlib renderers for report artifacts; every figure is written to a file."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_filtering_curve(series, path, title="Filtered target fraction") -> None:
    steps = [s for s, _ in series]
    fractions = [f for _, f in series]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, fractions, marker="o")
    ax.set_xlabel("adaptation step")
    ax.set_ylabel("filtered fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_projection(coords, labels, path, title="Feature projection") -> None:
    coords = np.asarray(coords)
    fig, ax = plt.subplots(figsize=(5, 5))
    if labels is None:
        ax.scatter(coords[:, 0], coords[:, 1], s=8, alpha=0.7)
    else:
        labels = np.asarray(labels)
        for c in np.unique(labels):
            mask = labels == c
            ax.scatter(coords[mask, 0], coords[mask, 1], s=8, alpha=0.7,
                       label=str(c))
        ax.legend(title="class", fontsize=8)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curves(trace, path, title="Adaptation losses") -> None:
    steps = [s.step for s in trace.steps]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [s.source_loss for s in trace.steps], label="source", alpha=0.8)
    ax.plot(steps, [s.ufl_prediction for s in trace.steps], label="target prediction",
            alpha=0.8)
    ax.plot(steps, [s.ufl_distance for s in trace.steps], label="target distance",
            alpha=0.8)
    ax.set_xlabel("adaptation step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_bars(summary, path, title="Ablation accuracy") -> None:
    names = [row["name"] for row in summary]
    accs = [row["mean_accuracy"] * 100.0 for row in summary]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 2))
    positions = np.arange(len(names))
    ax.barh(positions, accs, color="steelblue")
    ax.set_yticks(positions)
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("target accuracy (%)")
    ax.set_title(title)
    for pos, acc in zip(positions, accs):
        ax.text(acc + 0.5, pos, f"{acc:.1f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_accuracy_curve(trace, path, title="Target accuracy at refreshes") -> None:
    points = [(r.step, r.eval_accuracy) for r in trace.refreshes
              if r.eval_accuracy is not None]
    if not points:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xlabel("adaptation step")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
