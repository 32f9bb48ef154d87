"""Per-epoch loss and selection-BLEU curves written as SVG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("mbt", "vse", "cbt", "cpt", "mt", "total")


def training_curves(history: dict, path, title: str = "") -> Path:
    """Plot loss terms (left) and round-trip selection BLEU (right) per epoch."""
    epochs = [e["epoch"] for e in history["epochs"]]
    fig, (ax_l, ax_b) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key in LOSS_KEYS:
        vals = [e["losses"].get(key) for e in history["epochs"]]
        if any(v is not None for v in vals):
            ax_l.plot(epochs, [float("nan") if v is None else v for v in vals], marker=".", label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend(fontsize=7)
    sel = [e["selection"] for e in history["epochs"]]
    ax_b.plot(epochs, [s["round_trip_x"] for s in sel], marker=".", label="round trip x")
    ax_b.plot(epochs, [s["round_trip_y"] for s in sel], marker=".", label="round trip y")
    ax_b.plot(epochs, [s["score"] for s in sel], marker=".", color="k", label="score")
    ax_b.set_xlabel("epoch")
    ax_b.set_ylabel("BLEU")
    ax_b.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def pretrain_curve(losses: dict, path, title: str = "") -> Path:
    """``losses`` maps a stage name to its per-epoch mean loss."""
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    for name, vals in losses.items():
        ax.plot(range(len(vals)), vals, marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
