"""Figures written next to the metric files. Uses the non-interactive backend
so runs work headless."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps reruns byte-stable where the backend allows it
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_curve(xs, ys, ses, path, xlabel="t", ylabel="estimate", title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, ys, yerr=2 * np.asarray(ses), marker="o", capsize=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_histograms(grid, empirical, null, path, title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = grid[1] - grid[0] if len(grid) > 1 else 1.0
    ax.bar(grid, empirical, width=width, alpha=0.6, label="rollout means")
    ax.plot(grid, null, color="k", lw=1, label="binomial null")
    ax.set_xlabel("mean reward over rollouts")
    ax.set_ylabel("probability")
    ax.legend()
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_samples(groups: dict, path, title=None):
    """Scatter (2D and up, first two coordinates) or histogram (1D)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, x in groups.items():
        x = np.atleast_2d(x)
        if x.shape[1] == 1:
            ax.hist(x[:, 0], bins=60, density=True, histtype="step", label=label)
        else:
            ax.scatter(x[:, 0], x[:, 1], s=2, alpha=0.4, label=label)
    ax.legend(markerscale=4)
    if title:
        ax.set_title(title)
    _save(fig, path)
