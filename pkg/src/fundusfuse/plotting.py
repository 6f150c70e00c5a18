"""Static figures: loss and weight trajectories, Recall@K bars, confusion heatmaps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .objectives import LOSS_NAMES  # noqa: E402


def plot_history(history: list[dict], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    epochs = [row["epoch"] for row in history]
    weights = np.array([[row[f"w_{n}"] for n in LOSS_NAMES] for row in history])
    if not np.allclose(weights.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("loss weights in history do not sum to 1")

    fig, ax = plt.subplots(figsize=(6, 4))
    for n in LOSS_NAMES:
        ax.plot(epochs, [row[f"l_{n}"] for row in history], label=n)
    ax.plot(epochs, [row["train_total"] for row in history], "k-", lw=2, label="train total")
    ax.plot(epochs, [row["val_total"] for row in history], "k--", lw=2, label="val total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    losses = out_dir / "loss_curves.png"
    fig.savefig(losses, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.stackplot(epochs, weights.T, labels=LOSS_NAMES)
    ax.set_xlabel("epoch")
    ax.set_ylabel("softmax weight")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    weights_path = out_dir / "loss_weights.png"
    fig.savefig(weights_path, dpi=100)
    plt.close(fig)
    return [losses, weights_path]


def plot_retrieval(report: dict, out_dir) -> Path:
    ks = sorted(report["recall_at"], key=int)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([f"R@{k}" for k in ks], [report["recall_at"][k] for k in ks], color="tab:blue")
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.set_title(f"{report['protocol']} (M={report['gallery_size']})")
    fig.tight_layout()
    path = Path(out_dir) / f"recall_{report['protocol']}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_confusion(report: dict, out_dir) -> list[Path]:
    paths = []
    for scheme in ("sdrg", "icdr"):
        cm = np.asarray(report[f"confusion_{scheme}"])
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(cm, cmap="Blues")
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=8)
        ax.set_xlabel("predicted grade")
        ax.set_ylabel("true grade")
        ax.set_title(f"{scheme.upper()} accuracy {report[f'{scheme}_accuracy']:.1f}%")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        path = Path(out_dir) / f"confusion_{scheme}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
