"""Differential masks, IoU, threshold calibration and comparative overlays.

A mask is the set of pixels whose twin difference strictly exceeds a threshold θ.
Calibration sweeps a θ grid and keeps the smallest θ with the best IoU against a
reference mask.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .colorlab import DiffMap, RgbImage
from .errors import DimensionMismatchError
from .rng import substream

logger = logging.getLogger(__name__)

# Background pixels of the overlay are scaled by this factor
OVERLAY_DIM_FACTOR = 0.35

WHITE = (255, 255, 255)
GREEN = (0, 255, 0)
MAGENTA = (255, 0, 255)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """One boolean per pixel, shape (height, width)."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"BinaryMask bits must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits.astype(bool))

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def shape(self) -> tuple:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_pixels(cls, height: int, width: int, pixels) -> "BinaryMask":
        """Build a mask from (row, col) coordinates."""
        bits = np.zeros((height, width), dtype=bool)
        for row, col in pixels:
            bits[row, col] = True
        return cls(bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of a θ sweep: θ*, the best IoU, and the full (θ, IoU) curve."""

    theta_star: float
    best_iou: float
    curve: List[Tuple[float, float]] = field(default_factory=list)

    def to_summary(self) -> dict:
        return {"theta_star": self.theta_star, "best_iou": self.best_iou}


@dataclass(frozen=True)
class StabilitySummary:
    """Mean and population std of pairwise IoU over a set of masks."""

    mean: float
    std: float
    pairwise: List[float] = field(default_factory=list)


def _check_shapes(first, second) -> None:
    if first.shape != second.shape:
        raise DimensionMismatchError(f"mask shapes differ: {first.shape} vs {second.shape}")


def default_theta_grid() -> List[float]:
    """Half-integer grid 0.5, 1.5, ..., 254.5 over the a* difference scale."""
    return [i + 0.5 for i in range(255)]


def threshold_mask(diff: DiffMap, theta: float) -> BinaryMask:
    """Pixels whose difference strictly exceeds `theta`."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    return BinaryMask(diff.values > theta)


def iou(m1: BinaryMask, m2: BinaryMask) -> float:
    """|m1 ∩ m2| / |m1 ∪ m2|; two empty masks agree perfectly (1.0)."""
    _check_shapes(m1, m2)
    union = np.logical_or(m1.bits, m2.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(m1.bits, m2.bits).sum() / union)


def _validate_grid(grid: Sequence[float]) -> List[float]:
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("theta grid must not be empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("theta grid must be strictly increasing")
    if grid[0] < 0:
        raise ValueError("theta grid values must be >= 0")
    return grid


def _select(curve: List[Tuple[float, float]]) -> CalibrationResult:
    # Smallest θ among the maxima; curve is in grid order.
    best = max(score for _, score in curve)
    theta_star = next(theta for theta, score in curve if score == best)
    return CalibrationResult(theta_star=theta_star, best_iou=best, curve=curve)


def calibrate_threshold(
    diff: DiffMap,
    reference: BinaryMask,
    grid: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> CalibrationResult:
    """Sweep `grid` and return θ* = smallest argmax of IoU(reference, mask(θ)).

    Args:
        diff: Twin difference map.
        reference: Reference mask of the original pathology.
        grid: Strictly increasing θ values; defaults to `default_theta_grid()`.
        workers: Evaluate grid points on a thread pool; the result does not
            depend on evaluation order.

    Returns:
        CalibrationResult with the full curve.
    """
    grid = _validate_grid(default_theta_grid() if grid is None else grid)
    _check_shapes(diff, reference)

    def score(theta: float) -> float:
        return iou(reference, threshold_mask(diff, theta))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, grid))
    else:
        scores = [score(theta) for theta in grid]

    result = _select(list(zip(grid, scores)))
    logger.debug("calibrated theta*=%s best_iou=%.4f", result.theta_star, result.best_iou)
    return result


def calibrate_cohort(
    diffs: Sequence[DiffMap],
    references: Sequence[BinaryMask],
    grid: Optional[Sequence[float]] = None,
) -> CalibrationResult:
    """Single θ maximizing the mean IoU across a cohort of (diff, reference) pairs."""
    if len(diffs) != len(references):
        raise ValueError("cohort needs one reference per difference map")
    if not diffs:
        raise ValueError("cohort must not be empty")
    grid = _validate_grid(default_theta_grid() if grid is None else grid)
    for diff, reference in zip(diffs, references):
        _check_shapes(diff, reference)

    curve = []
    for theta in grid:
        scores = [iou(ref, threshold_mask(d, theta)) for d, ref in zip(diffs, references)]
        curve.append((theta, float(np.mean(scores))))
    return _select(curve)


def overlay_composite(m_orig: BinaryMask, m_syn: BinaryMask, base: RgbImage) -> RgbImage:
    """Comparative overlay: intersection white, orig-only green, syn-only magenta.

    Pixels in neither mask show the base image dimmed by OVERLAY_DIM_FACTOR.
    """
    _check_shapes(m_orig, m_syn)
    if base.shape != m_orig.shape:
        raise DimensionMismatchError(f"overlay base {base.shape} vs masks {m_orig.shape}")

    out = np.floor(base.data.astype(np.float64) * OVERLAY_DIM_FACTOR).astype(np.uint8)
    both = m_orig.bits & m_syn.bits
    out[m_orig.bits & ~m_syn.bits] = GREEN
    out[m_syn.bits & ~m_orig.bits] = MAGENTA
    out[both] = WHITE
    return RgbImage(out)


def mask_stability(masks: Sequence[BinaryMask]) -> StabilitySummary:
    """Mean and population std of IoU over all unordered mask pairs."""
    if len(masks) < 2:
        raise ValueError(f"mask stability needs at least 2 masks, got {len(masks)}")
    for mask in masks[1:]:
        _check_shapes(masks[0], mask)
    pairwise = [iou(a, b) for a, b in combinations(masks, 2)]
    return StabilitySummary(
        mean=float(np.mean(pairwise)),
        std=float(np.std(pairwise)),
        pairwise=pairwise,
    )


# =============================================================================
# MORPHOLOGY (optional cleanup, off by default)
# =============================================================================


def _shift_stack(bits: np.ndarray, radius: int) -> np.ndarray:
    padded = np.pad(bits, radius, mode="constant", constant_values=False)
    h, w = bits.shape
    size = 2 * radius + 1
    return np.stack([
        padded[dy:dy + h, dx:dx + w] for dy in range(size) for dx in range(size)
    ])


def dilate(mask: BinaryMask, radius: int = 1) -> BinaryMask:
    """Square-structuring-element dilation."""
    if radius <= 0:
        return mask
    return BinaryMask(_shift_stack(mask.bits, radius).any(axis=0))


def erode(mask: BinaryMask, radius: int = 1) -> BinaryMask:
    """Square-structuring-element erosion; pixels beyond the frame count as unset."""
    if radius <= 0:
        return mask
    return BinaryMask(_shift_stack(mask.bits, radius).all(axis=0))


def clean_mask(mask: BinaryMask, radius: int = 1) -> BinaryMask:
    """Morphological opening (erode then dilate)."""
    return dilate(erode(mask, radius), radius)


def permuted_baseline_iou(mask: BinaryMask, reference: BinaryMask, seed: int = 0) -> float:
    """IoU of a random pixel permutation of `mask` against `reference`."""
    _check_shapes(mask, reference)
    flat = mask.bits.ravel().copy()
    substream(seed, "permuted-baseline").shuffle(flat)
    return iou(BinaryMask(flat.reshape(mask.shape)), reference)
