"""Figures for the report command.

SVG output is made byte-stable: a fixed hash salt for element ids and no
creation date in the metadata.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 4.0),
    "font.size": 10,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "svg.hashsalt": "diffrates",
    "svg.fonttype": "none",
}

MARKERS = {"ODE_PLAIN": "o", "ODE_ACCEL": "s", "DDPM_PLAIN": "^", "DDPM_ACCEL": "D"}


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_rates(series: dict, slopes: dict, path) -> Path:
    """Log-log TV against T, one line per sampler, with the fitted slope in the legend.

    ``series`` maps kind -> (T array, TV array); ``slopes`` maps kind -> slope.
    """
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for kind in sorted(series):
            T, tv = series[kind]
            label = kind if kind not in slopes else f"{kind} (slope {slopes[kind]:.2f})"
            ax.loglog(T, tv, marker=MARKERS.get(kind, "o"), ms=4, label=label)
        ax.set_xlabel("T (number of steps)")
        ax.set_ylabel("TV(q1, p1)")
        ax.grid(True, which="both", lw=0.3, alpha=0.5)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        _save(fig, path)
    return path


def plot_density(y, p1, q1, title: str, path) -> Path:
    """Reverse-chain density against the target marginal, with the pointwise gap underneath."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, (top, bot) = plt.subplots(2, 1, sharex=True, height_ratios=[3, 1])
        top.plot(y, q1, color="k", lw=1.0, label="q1")
        top.plot(y, p1, color="C3", ls="--", label="p1")
        top.set_ylabel("density")
        top.set_title(title, fontsize=9)
        top.legend(frameon=False, fontsize=8)
        bot.semilogy(y, np.maximum(np.abs(p1 - q1), 1e-300), color="C0", lw=0.8)
        bot.set_ylim(bottom=max(1e-12, float(np.abs(p1 - q1).max()) * 1e-8))
        bot.set_xlabel("y")
        bot.set_ylabel("|p1 - q1|")
        fig.tight_layout()
        _save(fig, path)
    return path
