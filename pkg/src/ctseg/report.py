"""Delimited reports and the matplotlib figures rendered alongside them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .objective import aggregate  # noqa: E402


def write_metrics_report(per_volume_dice, path, total_kind="pooled-foreground"):
    """Tab-separated per-volume Dice lines plus summary mean/std lines.

    per_volume_dice: {volume_id: {metric_name: value}}. The report header
    records which "total" convention the foreground column uses.
    """
    metrics = sorted({m for entry in per_volume_dice.values() for m in entry})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# total = {total_kind}\n")
        for vid in sorted(per_volume_dice):
            for metric in metrics:
                if metric in per_volume_dice[vid]:
                    fh.write(f"{vid}\t{metric}\t{per_volume_dice[vid][metric]:.6f}\n")
        for metric in metrics:
            vals = [
                entry[metric] for entry in per_volume_dice.values()
                if metric in entry
            ]
            mean, std = aggregate(vals)
            fh.write(f"summary\t{metric}\t{mean:.6f}\t{std:.6f}\n")


def write_loss_curve(log_entries, path):
    """Tab-separated training log: epoch, train loss, val loss, seconds."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# epoch\ttrain_loss\tval_loss\tseconds\n")
        for e in log_entries:
            fh.write(
                f"{e.epoch}\t{e.train_loss:.8f}\t{e.val_loss:.8f}\t{e.seconds:.3f}\n"
            )


def save_dice_figure(per_volume_dice, path, title="Per-volume Dice"):
    """Grouped scatter of per-volume Dice with mean bars, one group per metric."""
    metrics = sorted({m for entry in per_volume_dice.values() for m in entry})
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, metric in enumerate(metrics):
        vals = [
            entry[metric] for entry in per_volume_dice.values() if metric in entry
        ]
        xs = [i] * len(vals)
        ax.scatter(xs, vals, s=18, alpha=0.7, zorder=3)
        mean, std = aggregate(vals)
        ax.errorbar([i], [mean], yerr=[std], fmt="_", color="black",
                    capsize=8, markersize=22, zorder=4)
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Dice")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(log_entries, path, title="Training"):
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [e.epoch for e in log_entries]
    ax.plot(epochs, [e.train_loss for e in log_entries], label="train")
    ax.plot(epochs, [e.val_loss for e in log_entries], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("combined loss")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
