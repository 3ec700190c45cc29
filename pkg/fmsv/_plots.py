"""
This module writes the diagnostic plots: parameter traces and posterior
volatility bands. Plots are SVG files; nothing is shown on screen.
"""

import math

import numpy as np
import matplotlib

matplotlib.use("Agg")

from matplotlib import rcParams  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402


# Fixed ids and no date make the SVG output deterministic
rcParams["svg.hashsalt"] = "fmsv"
_METADATA = {"Date": None, "Creator": "fmsv"}


def _save(fig, filename):
    fig.savefig(filename, format="svg", metadata=_METADATA)


def _grid(n):
    cols = min(n, 3)
    return int(math.ceil(n / cols)), cols


def plot_traces(filename, draws, names=None, truth=None):
    """Plot the traces of the given parameters (default: all) of a
    ChainDraws, with a horizontal line at the true value when known.
    """
    names = list(draws.names if names is None else names)
    if not names:
        raise ValueError("plot_traces() needs at least one parameter")
    truth = truth or {}
    rows, cols = _grid(len(names))
    fig = Figure(figsize=(4 * cols, 2.2 * rows))
    axes = fig.subplots(rows, cols, squeeze=False)
    for ax, name in zip(axes.flat, names):
        ax.plot(draws.column(name), lw=0.5, color="C0")
        if name in truth:
            ax.axhline(truth[name], color="C3", lw=1)
        ax.set_title(name, fontsize=9)
        ax.tick_params(labelsize=7)
    for ax in axes.flat[len(names) :]:
        ax.set_visible(False)
    fig.tight_layout()
    _save(fig, filename)


def plot_volatility(filename, mean, sd, truth=None, label="h"):
    """Plot posterior mean log-volatility paths with +-2 sd bands, one
    panel per series. ``mean`` and ``sd`` are (n, T) arrays; ``truth``
    optionally overlays the true paths.
    """
    mean = np.atleast_2d(mean)
    sd = np.atleast_2d(sd)
    if mean.shape != sd.shape:
        raise ValueError(f"Mean and sd shapes differ: {mean.shape} vs {sd.shape}")
    n, T = mean.shape
    t = np.arange(1, T + 1)
    fig = Figure(figsize=(8, 1.8 * n))
    axes = fig.subplots(n, 1, squeeze=False, sharex=True)
    for i, ax in enumerate(axes[:, 0]):
        ax.fill_between(
            t, mean[i] - 2 * sd[i], mean[i] + 2 * sd[i], color="C0", alpha=0.3, lw=0
        )
        ax.plot(t, mean[i], color="C0", lw=0.8)
        if truth is not None:
            ax.plot(t, truth[i], color="C3", lw=0.6)
        ax.set_ylabel(f"{label}{i + 1}", fontsize=8)
        ax.tick_params(labelsize=7)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    _save(fig, filename)
