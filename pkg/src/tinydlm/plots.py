"""Matplotlib figures written next to the line-delimited reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curve(reports: Sequence, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        steps = [r.step for r in reports if r.step > 0]
        ax.plot(steps, [r.loss for r in reports if r.step > 0], lw=1, label="train")
        ev = [(r.step, r.eval_loss) for r in reports if r.eval_loss is not None]
        if ev:
            ax.plot(*zip(*ev), "o-", ms=3, label="held-out")
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(reports: Sequence, knob: str, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        labels = [str(r.config.get(knob)) for r in reports]
        ax.bar(labels, [r.value for r in reports], color="0.35")
        ax.set_ylim(0, 1)
        ax.set_xlabel(knob)
        ax.set_ylabel(reports[0].metric if reports else "")
        ax.set_title(reports[0].task if reports else "")
        return _save(fig, path)


def plot_throughput(reports: Sequence, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        labels = [f"{r.sampler}\nG={r.max_new_tokens}" for r in reports]
        ax.bar(labels, [r.tokens_per_s for r in reports], color="0.35")
        ax.set_ylabel("tokens / s")
        return _save(fig, path)
