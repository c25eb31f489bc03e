"""Matplotlib renderings of training curves, metric tables, and round logs.

Every report path of the CLI writes these figures next to its delimited
text output. All rendering targets files (Agg backend), never a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport


def save_loss_curve(losses: list[float], path, title: str = "training loss",
                    ylabel: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=0.8, color="#30506d", alpha=0.55, label="per step")
    if len(losses) >= 20:
        w = max(len(losses) // 40, 5)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w - 1, len(losses)), smooth, lw=1.8,
                color="#b3412c", label=f"{w}-step mean")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_metric_bars(report: MetricReport, path) -> None:
    names = ["macro_f1_14", "micro_f1_14", "macro_f1_5", "micro_f1_5",
             "average_score", "hallucination_rate", "terminology_adherence"]
    values = [getattr(report, n) for n in names]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    colors = ["#30506d"] * 5 + ["#b3412c", "#4a7c59"]
    ax.bar(range(len(names)), values, color=colors)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([n.replace("_", "\n") for n in names], fontsize=7)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    for i, v in enumerate(values):
        ax.text(i, v + 1.5, f"{v:.1f}", ha="center", fontsize=7)
    ax.set_title("clinical metrics", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_round_log_figure(records: list[dict], path) -> None:
    if not records:
        return
    rounds = [r["round"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    axes[0].plot(rounds, [r["macro_f1_14"] for r in records], "o-", color="#30506d")
    axes[0].set_title("validation macro F1 (14)", fontsize=9)
    axes[1].plot(rounds, [r["hallucination_rate"] for r in records], "o-", color="#b3412c")
    axes[1].set_title("hallucination rate (%)", fontsize=9)
    axes[2].plot(rounds, [r["mean_reward"] for r in records], "o-", color="#4a7c59")
    axes[2].set_title("mean rollout reward", fontsize=9)
    for ax in axes:
        ax.set_xlabel("round")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_robustness_figure(means: dict[str, float], path) -> None:
    kinds = list(means)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(kinds, [means[k] for k in kinds], color="#30506d")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean ROUGE-L vs unperturbed")
    for i, k in enumerate(kinds):
        ax.text(i, means[k] + 0.02, f"{means[k]:.3f}", ha="center", fontsize=8)
    ax.set_title("report consistency under perturbation", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
