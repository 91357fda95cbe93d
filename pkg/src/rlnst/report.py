"""Figure emission for the command-line reports.

Every command that writes delimited output also renders a matplotlib figure
next to it: training curves beside the metrics CSV, a contact sheet beside
the per-step images, and per-step loss bars beside the eval table.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVEFIG = dict(dpi=110, metadata={"Software": "rlnst"})


def training_curves(rows: Sequence[dict], path) -> None:
    """Loss and actor-critic traces over iterations, two stacked panels."""
    iters = [r["iter"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 7), sharex=True)
    ax1.plot(iters, [r["L"] for r in rows], label="combined", lw=1.2)
    ax1.plot(iters, [r["Lco"] for r in rows], label="content", lw=0.9)
    ax1.plot(iters, [max(r["Lst"], 1e-30) for r in rows], label="style", lw=0.9)
    if rows and rows[0].get("Lct") is not None:
        ax1.plot(iters, [r["Lct"] for r in rows], label="temporal", lw=0.9)
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(alpha=0.3)

    ax2.plot(iters, [r["Jq"] for r in rows], label="J_Q", lw=0.9)
    ax2.plot(iters, [r["Jpi"] for r in rows], label="J_pi", lw=0.9)
    ax2.plot(iters, [r["reward_mean"] for r in rows], label="reward", lw=0.9)
    ax2.plot(iters, [r["alpha"] for r in rows], label="alpha", lw=0.9)
    ax2.set_xlabel("iteration")
    ax2.legend(loc="upper right", fontsize=8)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def contact_sheet(images: Sequence[np.ndarray], path,
                  titles: Optional[Sequence[str]] = None,
                  cols: int = 5) -> None:
    """Grid of CHW images in [0,1]."""
    n = len(images)
    cols = min(cols, n)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows),
                             squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i].transpose(1, 2, 0), 0, 1))
            if titles is not None:
                ax.set_title(titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def eval_chart(steps: Sequence[int], content: Sequence[float],
               style: Sequence[float], path) -> None:
    """Per-step mean content and style losses on twin axes."""
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(steps, content, "o-", color="tab:blue", label="content loss")
    ax1.set_xlabel("step")
    ax1.set_ylabel("content loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(steps, style, "s-", color="tab:red", label="style loss")
    ax2.set_ylabel("style loss", color="tab:red")
    ax2.set_yscale("log")
    ax1.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
