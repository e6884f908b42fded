"""Report rendering: plain-text and CSV summaries plus matplotlib figures
(training curves, confusion-matrix heatmaps, preprocessing contact sheets)
written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import metrics  # noqa: E402
from .train import EpochStats  # noqa: E402


def plot_history(history: list[EpochStats], path) -> None:
    epochs = [h.epoch for h in history]
    fig, (ax_loss, ax_qwk) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [h.train_loss for h in history], marker="o", color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_title("Ordinal loss")
    ax_loss.grid(alpha=0.3)
    ax_qwk.plot(epochs, [h.train_qwk for h in history], marker="o", label="train")
    ax_qwk.plot(epochs, [h.val_qwk for h in history], marker="s", label="validation")
    ax_qwk.set_xlabel("epoch")
    ax_qwk.set_ylabel("QWK")
    ax_qwk.set_title("Quadratic weighted kappa")
    ax_qwk.legend()
    ax_qwk.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(cm: np.ndarray, path, title: str = "Confusion matrix") -> None:
    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xlabel("predicted grade")
    ax.set_ylabel("true grade")
    ax.set_title(title)
    ax.set_xticks(range(cm.shape[1]))
    ax.set_yticks(range(cm.shape[0]))
    thresh = cm.max() / 2 if cm.max() > 0 else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    color="white" if cm[i, j] > thresh else "black", fontsize=9)
    fig.colorbar(im, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_contact_sheet(per_image_stages, path) -> None:
    """Grid of preprocessing snapshots: one row per image, one column per stage."""
    if not per_image_stages:
        return
    n_rows = len(per_image_stages)
    n_cols = max(len(stages) for stages in per_image_stages)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.1 * n_cols, 2.2 * n_rows),
                             squeeze=False)
    for r, stages in enumerate(per_image_stages):
        for c in range(n_cols):
            ax = axes[r][c]
            ax.axis("off")
            if c < len(stages):
                label, img = stages[c]
                ax.imshow(img)
                if r == 0:
                    ax.set_title(label, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_eval_report(out_dir, tag: str, qwk_value: float, cm: np.ndarray) -> None:
    """QWK + confusion matrix + per-class accuracy as text, CSV, and a figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acc = metrics.per_class_accuracy(cm)
    acc_text = ", ".join("n/a" if np.isnan(a) else f"{a:.4f}" for a in acc)
    report = (f"evaluation: {tag}\n"
              f"samples: {int(np.asarray(cm).sum())}\n"
              f"qwk: {qwk_value:.6f}\n"
              f"per-class accuracy: {acc_text}\n\n"
              f"{metrics.format_confusion(cm)}\n")
    (out_dir / f"report_{tag}.txt").write_text(report, encoding="utf-8")
    (out_dir / f"confusion_{tag}.csv").write_text(metrics.confusion_csv(cm), encoding="utf-8")
    acc_lines = ["grade,accuracy"]
    for g, a in enumerate(acc):
        acc_lines.append(f"{g}," + ("" if np.isnan(a) else repr(float(a))))
    (out_dir / f"per_class_{tag}.csv").write_text("\n".join(acc_lines) + "\n", encoding="utf-8")
    plot_confusion(cm, out_dir / f"confusion_{tag}.png", f"Confusion ({tag}), QWK={qwk_value:.3f}")
