"""Matplotlib renderings of the experiment artifacts (written next to the CSVs)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def get_publication_quality_plot(width=8, height=None, nrows=1, ncols=1):
    """Figure and axes with font sizes scaled to the figure width."""
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    if not height:
        height = width * golden_ratio
    fig, axes = plt.subplots(nrows, ncols, figsize=(width, height), facecolor="w",
                             squeeze=False)
    for ax in axes.flat:
        ax.tick_params(labelsize=width * 1.1)
    return fig, axes


def _extent(spectrum):
    k, e = spectrum.momentum_axis, spectrum.energy_axis
    return [k.minimum, k.maximum, e.minimum, e.maximum]


def plot_panels(panels, path, titles, second_derivatives=None):
    """Row of spectra (and optionally a second row of their second derivatives)."""
    nrows = 2 if second_derivatives else 1
    fig, axes = get_publication_quality_plot(width=3.2 * len(panels), height=3.2 * nrows,
                                             nrows=nrows, ncols=len(panels))
    for j, (s, title) in enumerate(zip(panels, titles)):
        ax = axes[0, j]
        ax.imshow(s.values, origin="lower", aspect="auto", extent=_extent(s), cmap="Greys")
        ax.set_title(title)
        if second_derivatives:
            d2 = second_derivatives[j]
            ax2 = axes[1, j]
            # minima mark bands; show the negative part only
            ax2.imshow(np.minimum(d2.values, 0), origin="lower", aspect="auto",
                       extent=_extent(d2), cmap="Greys_r")
            ax2.set_xlabel(s.momentum_axis.label)
    axes[0, 0].set_ylabel("energy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_traces(traces: dict, path, truth=None):
    """Peak position and width against energy for each method."""
    fig, axes = get_publication_quality_plot(width=8, height=4, ncols=2)
    for name, rows in traces.items():
        e = [r[0] for r in rows]
        axes[0, 0].plot([r[1].peak_position for r in rows], e, ".", label=name)
        axes[0, 1].plot(e, [r[1].width for r in rows], ".-", label=name)
    if truth is not None:
        axes[0, 0].plot(truth[1], truth[0], "k-", lw=1, label="truth")
    axes[0, 0].set_xlabel("peak position")
    axes[0, 0].set_ylabel("energy")
    axes[0, 1].set_xlabel("energy")
    axes[0, 1].set_ylabel("HWHM")
    axes[0, 0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_table(x, ys: dict, path, xlabel, ylabel, kind="line"):
    fig, axes = get_publication_quality_plot(width=6)
    ax = axes[0, 0]
    if kind == "bar":
        names = list(ys)
        ax.bar(names, [ys[n] for n in names], color="0.5")
    else:
        for label, y in ys.items():
            ax.plot(x, y, "o-", label=label)
        if len(ys) > 1:
            ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
