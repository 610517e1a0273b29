"""Inversion-free editing over the toy flow model.

The edit never recovers a noise pivot for the source. Instead it integrates a
displacement D from a partially noised copy of the source:

    Y_s   = (1 - s) X_src + s ε_s            (fresh ε_s per step)
    D    <- D + Δs (v̂_tgt(Y_s + D) - v̂_src(Y_s))

for noise levels s descending from s_max in `steps` uniform decrements. Noise
level s corresponds to model time t = 1 - s. Each branch applies its own
classifier-free guidance, v̂ = v_uncond + γ (v_cond - v_uncond), so with D = 0
the velocity difference equals γ_tgt (v_tgt - v_uncond) - γ_src (v_src - v_uncond).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .colorlab import DiffMap, RgbImage, srgb_to_lab
from .errors import DegenerateRequestError, DimensionMismatchError, DivergenceError
from .maskdiff import BinaryMask, calibrate_threshold, iou, threshold_mask
from .rng import substream
from .toyflow import (
    FEATURE_COLOR,
    SKIN,
    Condition,
    FlowModel,
    LatentCode,
    SceneSpec,
    denormalize,
    feature_dot_mask,
    normalize,
)

logger = logging.getLogger(__name__)

# a* excess over the frame median that counts as redness when no reference mask exists
DEFAULT_EXCESS_THRESHOLD = 5.0


@dataclass(frozen=True)
class GuidanceParams:
    gamma_src: float = 1.5
    gamma_tgt: float = 2.0
    steps: int = 50
    s_max: float = 0.9
    noise_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.gamma_src < 0 or self.gamma_tgt < 0:
            raise ValueError("guidance scales must be >= 0")
        if not 0.0 < self.s_max <= 1.0:
            raise ValueError("s_max must lie in (0, 1]")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class EditStep:
    step: int
    s: float
    displacement_norm: float
    velocity_diff_norm: float


@dataclass
class EditTrace:
    """Per-step record of the displacement ODE."""

    steps: List[EditStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def max_displacement(self) -> float:
        return max((step.displacement_norm for step in self.steps), default=0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [asdict(step) for step in self.steps],
            columns=["step", "s", "displacement_norm", "velocity_diff_norm"],
        )


@dataclass
class EditResult:
    image: RgbImage
    trace: EditTrace
    edited_normalized: np.ndarray
    max_abs_displacement: float = 0.0


def mix_guidance(
    v_uncond: np.ndarray,
    v_src: np.ndarray,
    v_tgt: np.ndarray,
    gamma_src: float,
    gamma_tgt: float,
) -> np.ndarray:
    """v_uncond + γ_src (v_src - v_uncond) + γ_tgt (v_tgt - v_uncond)."""
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    return (
        v_uncond
        + gamma_src * (np.asarray(v_src, dtype=np.float64) - v_uncond)
        + gamma_tgt * (np.asarray(v_tgt, dtype=np.float64) - v_uncond)
    )


def _check_finite(v: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"non-finite {what}")
    return v


def guided_velocity(
    model: FlowModel,
    x: np.ndarray,
    t: float,
    c_src: Condition,
    c_tgt: Condition,
    g: GuidanceParams,
) -> np.ndarray:
    """Mixed guidance field with all three velocities evaluated at the same (x, t)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    emb = np.stack([model.embed(Condition.null()), model.embed(c_src), model.embed(c_tgt)])
    v = _check_finite(model.velocity(np.stack([x, x, x]), t, emb), "model velocity")
    return mix_guidance(v[0], v[1], v[2], g.gamma_src, g.gamma_tgt)


def _branch_velocity(model: FlowModel, x: np.ndarray, t: float, c: Condition, gamma: float) -> np.ndarray:
    # Same-shaped [null, cond] batch for every branch so equal inputs give equal bits.
    emb = np.stack([model.embed(Condition.null()), model.embed(c)])
    v = _check_finite(model.velocity(np.stack([x, x]), t, emb), "model velocity")
    return v[0] + gamma * (v[1] - v[0])


def flow_edit(
    model: FlowModel,
    source: RgbImage,
    c_src: Condition,
    c_tgt: Condition,
    g: GuidanceParams,
) -> EditResult:
    """Edit `source` from c_src toward c_tgt with the displacement ODE."""
    x_src = normalize(source)
    if x_src.size != model.dim:
        raise DimensionMismatchError(
            f"source of {source.width}x{source.height} does not match model dimension {model.dim}"
        )

    displacement = np.zeros_like(x_src)
    ds = g.s_max / g.steps
    trace = EditTrace()
    max_abs = 0.0
    for k in range(g.steps):
        s = g.s_max * (1.0 - k / g.steps)
        eps = substream(g.noise_seed, "flowedit", k).standard_normal(model.dim)
        y = (1.0 - s) * x_src + s * eps
        t = 1.0 - s
        v_src = _branch_velocity(model, y, t, c_src, g.gamma_src)
        v_tgt = _branch_velocity(model, y + displacement, t, c_tgt, g.gamma_tgt)
        dv = v_tgt - v_src
        displacement = displacement + ds * dv
        if not np.all(np.isfinite(displacement)):
            raise DivergenceError(f"edit displacement became non-finite at step {k}")
        max_abs = max(max_abs, float(np.max(np.abs(displacement))))
        trace.steps.append(EditStep(
            step=k,
            s=s,
            displacement_norm=float(np.linalg.norm(displacement)),
            velocity_diff_norm=float(np.linalg.norm(dv)),
        ))

    edited = x_src + displacement
    logger.debug("flow_edit done: |D|max=%.4f", max_abs)
    return EditResult(
        image=denormalize(edited, source.shape),
        trace=trace,
        edited_normalized=edited,
        max_abs_displacement=max_abs,
    )


def anchor_for(g: GuidanceParams, dim: int) -> LatentCode:
    """The de-identified latent anchor tied to an edit's noise seed."""
    return LatentCode.from_seed(g.noise_seed, dim)


def check_distinct_identities(src_c: Condition, surrogate_c: Condition) -> None:
    if src_c.identity == surrogate_c.identity:
        raise DegenerateRequestError(
            f"surrogate identity {surrogate_c.identity} equals the source identity; "
            "de-identification would be a no-op"
        )


def de_identify(
    model: FlowModel,
    original: RgbImage,
    src_c: Condition,
    surrogate_c: Condition,
    g: GuidanceParams,
) -> Tuple[RgbImage, LatentCode]:
    """Replace the source identity by a surrogate; returns (surrogate, anchor)."""
    check_distinct_identities(src_c, surrogate_c)
    result = flow_edit(model, original, src_c, surrogate_c, g)
    return result.image, anchor_for(g, model.dim)


# =============================================================================
# MEASUREMENTS
# =============================================================================


def excess_a_map(image: RgbImage) -> DiffMap:
    """Per-pixel a* above the frame median (skin baseline), floored at zero."""
    a = srgb_to_lab(image).a
    return DiffMap(np.clip(a - np.median(a), 0.0, None))


def pathology_iou(
    source: RgbImage,
    edited: RgbImage,
    reference: Optional[BinaryMask] = None,
    grid: Optional[Sequence[float]] = None,
) -> float:
    """IoU between the redness masks of source and edited image.

    The threshold is calibrated on the source against `reference` when given,
    otherwise DEFAULT_EXCESS_THRESHOLD is used for both images.
    """
    source_map = excess_a_map(source)
    edited_map = excess_a_map(edited)
    theta = DEFAULT_EXCESS_THRESHOLD
    if reference is not None:
        theta = calibrate_threshold(source_map, reference, grid).theta_star
    return iou(threshold_mask(source_map, theta), threshold_mask(edited_map, theta))


def anchoring_sweep(
    model: FlowModel,
    cases: Sequence[Tuple[RgbImage, Condition, Condition]],
    gammas: Sequence[float],
    g: GuidanceParams,
    reference: Optional[BinaryMask] = None,
) -> List[Tuple[float, float]]:
    """Mean pathology retention IoU over `cases` for each γ_src in `gammas`."""
    rows = []
    for gamma in gammas:
        params = GuidanceParams(
            gamma_src=gamma,
            gamma_tgt=g.gamma_tgt,
            steps=g.steps,
            s_max=g.s_max,
            noise_seed=g.noise_seed,
        )
        scores = [
            pathology_iou(source, flow_edit(model, source, c_src, c_tgt, params).image, reference)
            for source, c_src, c_tgt in cases
        ]
        rows.append((float(gamma), float(np.mean(scores))))
        logger.info("anchoring gamma_src=%.2f mean IoU %.4f", gamma, rows[-1][1])
    return rows


def _dark_threshold() -> float:
    palette = np.rint(np.array([[SKIN, FEATURE_COLOR]]) * 255.0).astype(np.uint8)
    lightness = srgb_to_lab(RgbImage(palette)).L[0]
    return float(lightness.mean())


def feature_persistence(
    image: RgbImage,
    spec: SceneSpec,
    source_identity: int,
    surrogate_identity: int,
) -> Dict[str, float]:
    """Fraction of each identity's feature-dot pixels that render dark in `image`.

    A high source fraction after de-identification means the biometric feature
    survived the edit; it is reported, never enforced.
    """
    dark = srgb_to_lab(image).L < _dark_threshold()
    out = {}
    for key, identity in (("source_dot", source_identity), ("surrogate_dot", surrogate_identity)):
        bits = feature_dot_mask(spec, identity).bits
        out[key] = float(dark[bits].mean()) if bits.any() else 0.0
    return out
