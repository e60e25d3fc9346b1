"""Static diagnostic plots written as image files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["reliability_diagram", "counterfactual_curve", "training_curves"]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def reliability_diagram(table, path):
    """Bar chart of per-bin accuracy against the diagonal, from ece() bins."""
    fig, ax = plt.subplots(figsize=(4, 4))
    centers = [(b.lo + b.hi) / 2 for b in table]
    width = table[0].hi - table[0].lo if table else 0.1
    accs = [b.acc if b.count else 0.0 for b in table]
    ax.bar(centers, accs, width=width * 0.9, color="#4878cf", label="accuracy")
    ax.plot([0, 1], [0, 1], "k--", linewidth=1, label="perfect")
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left")
    return _save(fig, path)


def counterfactual_curve(rows, path):
    """FID and target confidence against the attack budget."""
    fig, ax = plt.subplots(figsize=(5, 4))
    eps = [r.eps for r in rows]
    ax.plot(eps, [r.fid for r in rows], "o-", color="#4878cf", label="FID")
    ax.set_xlabel("attack budget")
    ax.set_ylabel("counterfactual FID")
    ax2 = ax.twinx()
    ax2.plot(eps, [r.confidence for r in rows], "s--", color="#d65f5f", label="confidence")
    ax2.set_ylabel("target confidence")
    ax2.set_ylim(0, 1.05)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [l.get_label() for l in lines], loc="center right")
    return _save(fig, path)


def training_curves(train_csv, path):
    """Loss terms over steps, read from a training log."""
    steps, total, atce, bce = [], [], [], []
    with open(train_csv, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            total.append(float(row["loss_total"]))
            atce.append(float(row["loss_atce"]))
            bce.append(float(row["loss_bce"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, total, label="total", color="#333333")
    ax.plot(steps, atce, label="adversarial CE", color="#4878cf", alpha=0.8)
    ax.plot(steps, bce, label="generative", color="#d65f5f", alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)
