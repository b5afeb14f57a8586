"""Figure rendering for the report path (all files, no interactive windows)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gradmap import GradientMap  # noqa: E402
from .trigger import save_png  # noqa: E402


def save_training_curves(log: list[dict], path) -> None:
    """Loss and accuracy per epoch, one panel each."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    epochs = [row["epoch"] for row in log]
    axes[0].plot(epochs, [row["loss"] for row in log], color="tab:red")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[1].plot(epochs, [row["accuracy"] for row in log], color="tab:blue")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("training accuracy")
    axes[1].set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_bars(rows: list[dict], path) -> None:
    """Grouped ASR/CDA bars, one group per ablation cell."""
    labels = [row["cell_id"] for row in rows]
    x = np.arange(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(5.0, 1.1 * len(labels) + 2), 3.6))
    ax.bar(x - width / 2, [row["asr"] for row in rows], width, label="ASR",
           color="tab:orange")
    ax.bar(x + width / 2, [row["cda"] for row in rows], width, label="CDA",
           color="tab:blue")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rate_curves(rows: list[dict], path) -> None:
    """ASR and CDA as a function of the poisoning rate."""
    pairs = sorted((row["spec"]["poison"]["rate"], row) for row in rows)
    rates = [p[0] for p in pairs]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(rates, [p[1]["asr"] for p in pairs], marker="o", label="ASR",
            color="tab:orange")
    ax.plot(rates, [p[1]["cda"] for p in pairs], marker="s", label="CDA",
            color="tab:blue")
    ax.set_xlabel("poisoning rate")
    ax.set_ylabel("fraction")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gradmap_overlay(image: np.ndarray, gmap: GradientMap, path) -> None:
    """Heat-map overlay, written at the exact pixel size of the input image."""
    values = gmap.values.astype(np.float64)
    peak = values.max()
    norm = values / peak if peak > 0 else values
    heat = plt.get_cmap("inferno")(norm)[..., :3].astype(np.float32)
    overlay = np.clip(0.55 * image + 0.45 * heat, 0.0, 1.0).astype(np.float32)
    save_png(path, overlay)
