"""Static matplotlib figures rendered straight to PNG bytes."""

import io
from typing import Dict, Sequence, Tuple

import numpy as np
from matplotlib.figure import Figure

from .histstats import BIN_COUNT, Histogram, compare

# Comparison panels: (left histogram, right histogram, title)
HISTOGRAM_PANELS: Tuple[Tuple[str, str, str], ...] = (
    ("original", "healthy", "Original vs synthetic healthy"),
    ("path", "healthy", "Synthetic pathological vs healthy"),
)


def figure_to_png(fig: Figure, dpi: int = 100) -> bytes:
    """Render a Figure to PNG bytes."""
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", dpi=dpi)
    buf.seek(0)
    data = buf.read()
    buf.close()
    return data


def histogram_figure(histograms: Dict[str, Histogram], panels=HISTOGRAM_PANELS) -> Figure:
    """Side-by-side outline plots of a* histograms, one panel per pair."""
    fig = Figure(figsize=(5 * len(panels), 3.5))
    bins = np.arange(BIN_COUNT)
    for i, (left, right, title) in enumerate(panels):
        ax = fig.add_subplot(1, len(panels), i + 1)
        p, q = histograms[left], histograms[right]
        ax.step(bins, p.bins, where="mid", label=left, color="tab:red")
        ax.step(bins, q.bins, where="mid", label=right, color="tab:green")
        metrics = compare(p, q)
        ax.set_title(f"{title}\nBC={metrics.bhattacharyya:.3f}  KS={metrics.ks:.3f}", fontsize=9)
        support = np.flatnonzero((p.bins > 0) | (q.bins > 0))
        if support.size:
            ax.set_xlim(max(support[0] - 5, 0), min(support[-1] + 5, BIN_COUNT - 1))
        ax.set_xlabel("a* (offset)")
        ax.set_ylabel("density")
        ax.legend(fontsize=8)
    return fig


def loss_curve_figure(epoch_losses: Sequence[float]) -> Figure:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(np.arange(1, len(epoch_losses) + 1), epoch_losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("flow-matching loss")
    ax.set_yscale("log")
    return fig
