"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_convergence", "plot_lambda_density", "plot_interaction_boxplot", "plot_tv_curve"]

_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def plot_convergence(history: Sequence[tuple[int, float, float]], path: str | Path) -> Path:
    """Training and validation loss per epoch, one panel each."""
    epochs = [h[0] for h in history]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    top.plot(epochs, [h[1] for h in history], color="tab:blue")
    top.set_ylabel("training loss")
    bottom.plot(epochs, [h[2] for h in history], color="tab:orange")
    bottom.set_ylabel("validation loss")
    bottom.set_xlabel("epoch")
    return _save(fig, path)


def plot_lambda_density(density: Sequence[tuple[float, int]], path: str | Path) -> Path:
    """Histogram of the per-user λ picks on a symmetric-log axis."""
    lams = np.array([d[0] for d in density])
    counts = np.array([d[1] for d in density])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(np.arange(lams.size), counts, width=1.0, color="tab:green")
    ticks = np.linspace(0, lams.size - 1, 6).astype(int)
    ax.set_xticks(ticks)
    ax.set_xticklabels([f"{lams[t]:.0e}" if lams[t] else "0" for t in ticks])
    ax.set_xlabel("λ")
    ax.set_ylabel("users")
    return _save(fig, path)


def plot_interaction_boxplot(groups: Mapping[str, np.ndarray], path: str | Path,
                             marks: Mapping[str, float] | None = None) -> Path:
    """Boxplots of interaction probabilities, with optional marked values per group."""
    labels = list(groups)
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2, 4))
    ax.boxplot([np.asarray(groups[k]) for k in labels], showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels)
    if marks:
        for pos, k in enumerate(labels, start=1):
            if k in marks:
                ax.plot(pos, marks[k], marker="*", color="tab:red", markersize=12)
    ax.set_ylabel("interaction probability")
    return _save(fig, path)


def plot_tv_curve(rows, path: str | Path) -> Path:
    """Mean TV (and marginal TV) against sample size, log-log."""
    Ns = sorted({r.N for r in rows})
    tv = [np.nanmean([r.tv for r in rows if r.N == N]) for N in Ns]
    tvm = [np.nanmean([r.tv_marginal for r in rows if r.N == N]) for N in Ns]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(Ns, tv, "o-", label="ratings")
    ax.loglog(Ns, tvm, "s--", label="entry marginals")
    ax.set_xlabel("N")
    ax.set_ylabel("L1 distance to p")
    ax.legend()
    return _save(fig, path)
