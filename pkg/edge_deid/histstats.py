"""Normalized a*-channel histograms and distribution comparison metrics."""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .colorlab import AStarPlane
from .errors import DimensionMismatchError, EmptyRegionError
from .maskdiff import BinaryMask

BIN_COUNT = 256
_BIN_VALUES = np.arange(BIN_COUNT, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Histogram:
    """256 densities indexed by offset-a* value."""

    bins: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.shape != (BIN_COUNT,):
            raise ValueError(f"histogram needs {BIN_COUNT} bins, got shape {bins.shape}")
        if np.any(bins < 0):
            raise ValueError("histogram densities must be non-negative")
        object.__setattr__(self, "bins", bins)

    @classmethod
    def from_densities(cls, densities: Sequence[float]) -> "Histogram":
        """Leading densities, zero-padded to 256 bins."""
        bins = np.zeros(BIN_COUNT)
        values = np.asarray(densities, dtype=np.float64)
        bins[: len(values)] = values
        return cls(bins)

    @classmethod
    def point_mass(cls, value: int) -> "Histogram":
        bins = np.zeros(BIN_COUNT)
        bins[value] = 1.0
        return cls(bins)


@dataclass(frozen=True)
class DistComparison:
    """Distance and shape statistics for a pair of histograms (p, q)."""

    bhattacharyya: float
    ks: float
    mean_p: float
    mean_q: float
    std_p: float
    std_q: float
    peak_p: float
    peak_q: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "bhattacharyya": self.bhattacharyya,
            "ks": self.ks,
            "mean_p": self.mean_p,
            "mean_q": self.mean_q,
            "std_p": self.std_p,
            "std_q": self.std_q,
            "peak_p": self.peak_p,
            "peak_q": self.peak_q,
        }


def histogram(plane: AStarPlane, restrict: Optional[BinaryMask] = None) -> Histogram:
    """Density per bin over the plane, or over the pixels selected by `restrict`."""
    values = plane.values
    if restrict is not None:
        if restrict.shape != plane.shape:
            raise DimensionMismatchError(
                f"restriction mask {restrict.shape} vs plane {plane.shape}"
            )
        if restrict.is_empty():
            raise EmptyRegionError("histogram restriction selects no pixels")
        values = values[restrict.bits]
    counts = np.bincount(values.ravel(), minlength=BIN_COUNT).astype(np.float64)
    return Histogram(counts / counts.sum())


def bhattacharyya(p: Histogram, q: Histogram) -> float:
    """Σ sqrt(p_i q_i), clipped into [0, 1]."""
    return float(min(1.0, np.sum(np.sqrt(p.bins * q.bins))))


def ks_statistic(p: Histogram, q: Histogram) -> float:
    """max over bins of |CDF_p - CDF_q| on the binned cumulative sums."""
    gap = np.abs(np.cumsum(p.bins) - np.cumsum(q.bins))
    return float(min(1.0, gap.max()))


def summary_stats(p: Histogram) -> Tuple[float, float, float]:
    """Density-weighted mean, population std and peak density of the bin values."""
    mean = float(np.sum(_BIN_VALUES * p.bins))
    variance = float(np.sum(p.bins * (_BIN_VALUES - mean) ** 2))
    return mean, float(np.sqrt(max(variance, 0.0))), float(p.bins.max())


def compare(p: Histogram, q: Histogram) -> DistComparison:
    """All comparison metrics for one histogram pair."""
    mean_p, std_p, peak_p = summary_stats(p)
    mean_q, std_q, peak_q = summary_stats(q)
    return DistComparison(
        bhattacharyya=bhattacharyya(p, q),
        ks=ks_statistic(p, q),
        mean_p=mean_p,
        mean_q=mean_q,
        std_p=std_p,
        std_q=std_q,
        peak_p=peak_p,
        peak_q=peak_q,
    )


def histograms_frame(histograms: Dict[str, Histogram]) -> pd.DataFrame:
    """Wide table with one `bin` column and one density column per histogram."""
    frame = pd.DataFrame({"bin": np.arange(BIN_COUNT)})
    for name, hist in histograms.items():
        frame[name] = hist.bins
    return frame
