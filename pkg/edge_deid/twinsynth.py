"""Counterfactual twin synthesis and the end-to-end de-identification pipeline.

A de-identified surrogate is regenerated twice from its latent anchor, once under
the pathological condition and once under the healthy one. Subtracting the twins
in the a* channel cancels anatomy and leaves the pathology, which is thresholded
at a calibrated θ* into a mask.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from . import __version__
from .backends import GeneratorBackend, as_backend
from .colorlab import DiffMap, RgbImage, a_star_plane, color_diff_map
from .errors import DegenerateRequestError, EdgeDeidError, StageError
from .flowedit import GuidanceParams, feature_persistence
from .histstats import DistComparison, Histogram, compare, histogram
from .maskdiff import (
    BinaryMask,
    CalibrationResult,
    StabilitySummary,
    calibrate_cohort,
    calibrate_threshold,
    clean_mask,
    iou,
    mask_stability,
    overlay_composite,
    threshold_mask,
)
from .rng import derive_seed
from .toyflow import (
    Condition,
    FlowModel,
    Health,
    LatentCode,
    SceneSpec,
    distractor_mask,
    oracle_generate,
    oracle_ground_truth_mask,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "edge-deid-manifest/1"


class TwinMode(str, Enum):
    SEED_RESAMPLE = "seed_resample"
    EDIT_HEAL = "edit_heal"


@dataclass(frozen=True, eq=False)
class TwinPair:
    path_image: RgbImage
    healthy_image: RgbImage
    anchor: LatentCode
    mode: TwinMode

    def __post_init__(self):
        if self.path_image.shape != self.healthy_image.shape:
            raise ValueError("twin images must share dimensions")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that determines a pipeline run apart from the case seed."""

    spec: SceneSpec = field(default_factory=SceneSpec)
    source_identity: int = 0
    surrogate_identity: int = 1
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    theta_grid: Optional[Tuple[float, ...]] = None
    twin_mode: TwinMode = TwinMode.SEED_RESAMPLE
    histogram_region: Literal["full", "pathology"] = "full"
    diff_metric: Literal["a_star", "delta_e"] = "a_star"
    cleanup_radius: int = 0

    def __post_init__(self):
        object.__setattr__(self, "twin_mode", TwinMode(self.twin_mode))
        if self.theta_grid is not None:
            object.__setattr__(self, "theta_grid", tuple(float(t) for t in self.theta_grid))
        if self.histogram_region not in ("full", "pathology"):
            raise ValueError(f"unknown histogram region {self.histogram_region!r}")
        if self.cleanup_radius < 0:
            raise ValueError("cleanup_radius must be >= 0")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["twin_mode"] = self.twin_mode.value
        data["theta_grid"] = list(self.theta_grid) if self.theta_grid is not None else "default"
        data["guidance"].pop("noise_seed")
        return data


@dataclass
class PipelineResult:
    original: RgbImage
    de_identified: RgbImage
    twins: TwinPair
    diff: DiffMap
    mask: BinaryMask
    reference: BinaryMask
    calibration: CalibrationResult
    stats: DistComparison
    original_stats: DistComparison
    histograms: Dict[str, Histogram]
    manifest: Dict


@dataclass
class SweepReport:
    identities: List[int]
    results: List[PipelineResult]
    stability: StabilitySummary
    reference_ious: List[float]
    overlays: List[RgbImage]
    cohort: Optional[CalibrationResult] = None

    def summary(self) -> Dict:
        return {
            "identities": self.identities,
            "stability": {"mean": self.stability.mean, "std": self.stability.std},
            "reference_ious": self.reference_ious,
            "theta_stars": [r.calibration.theta_star for r in self.results],
            "cohort": self.cohort.to_summary() if self.cohort else None,
        }


# =============================================================================
# TWINS
# =============================================================================


def generate_twins(
    generator: Union[GeneratorBackend, FlowModel],
    anchor: LatentCode,
    identity: int,
    mode: TwinMode = TwinMode.SEED_RESAMPLE,
    g: Optional[GuidanceParams] = None,
    path_health: Health = Health.PATHOLOGICAL,
    healthy_health: Health = Health.HEALTHY,
) -> TwinPair:
    """Pathological and healthy twins from one anchor.

    seed_resample regenerates both twins from the anchor; edit_heal regenerates
    the pathological twin and edits it with the health label flipped.
    """
    if Health(path_health) == Health(healthy_health):
        raise DegenerateRequestError("pathological and healthy conditions are identical")
    backend = as_backend(generator)
    c_path = Condition(identity, Health(path_health))
    c_healthy = Condition(identity, Health(healthy_health))

    path = backend.generate(anchor, c_path)
    if TwinMode(mode) == TwinMode.SEED_RESAMPLE:
        healthy = backend.generate(anchor, c_healthy)
    else:
        params = g or GuidanceParams(noise_seed=anchor.seed)
        healthy = backend.edit(path, c_path, c_healthy, params)
    return TwinPair(path_image=path, healthy_image=healthy, anchor=anchor, mode=TwinMode(mode))


def differential(pair: TwinPair, metric: str = "a_star") -> DiffMap:
    """Pathological minus healthy twin as a per-pixel color difference."""
    return color_diff_map(pair.path_image, pair.healthy_image, metric)


# =============================================================================
# PIPELINE
# =============================================================================


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (EdgeDeidError, ValueError, ArithmeticError) as exc:
        logger.error("stage %s failed: %s", name, exc)
        raise StageError(name, exc) from exc


def _image_digest(img: RgbImage) -> str:
    return hashlib.sha256(np.ascontiguousarray(img.data).tobytes()).hexdigest()[:16]


def manifest_hash(manifest: Dict) -> str:
    """Content hash of a manifest in canonical JSON form."""
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def case_seeds(case_seed: int) -> Dict[str, int]:
    """Per-purpose seeds for one case."""
    return {
        "case": int(case_seed),
        "original": derive_seed(case_seed, "original"),
        "anchor": derive_seed(case_seed, "anchor"),
    }


def synthesize_original(spec: SceneSpec, identity: int, case_seed: int) -> RgbImage:
    """Stand-in patient photograph: a pathological oracle scene of the source identity."""
    z = LatentCode.from_seed(case_seeds(case_seed)["original"], spec.dim)
    return oracle_generate(spec, z, Condition(identity, Health.PATHOLOGICAL))


def run_pipeline(
    config: PipelineConfig,
    generator: Union[GeneratorBackend, FlowModel],
    case_seed: int,
    original: Optional[RgbImage] = None,
    reference: Optional[BinaryMask] = None,
) -> PipelineResult:
    """original → de-identify → twins → difference → θ* → histograms → manifest.

    Without `original` a pathological oracle scene of the source identity is
    synthesized from the case seed; without `reference` the oracle ground-truth
    ellipse is the calibration target. Every failure is re-raised as a StageError
    naming the stage.
    """
    backend = as_backend(generator)
    spec = config.spec
    seeds = case_seeds(case_seed)
    g = replace(config.guidance, noise_seed=seeds["anchor"])
    src_c = Condition(config.source_identity, Health.PATHOLOGICAL)
    surrogate_c = Condition(config.surrogate_identity, Health.PATHOLOGICAL)

    with _stage("original"):
        if original is None:
            original = synthesize_original(spec, config.source_identity, case_seed)
        if original.shape != (spec.image_size, spec.image_size):
            raise ValueError(
                f"original is {original.width}x{original.height}, scene is {spec.image_size}px"
            )
        reference = reference if reference is not None else oracle_ground_truth_mask(spec)

    with _stage("de_identify"):
        outcome = backend.de_identify(original, src_c, surrogate_c, g)

    with _stage("twins"):
        twins = generate_twins(backend, outcome.anchor, config.surrogate_identity, config.twin_mode, g)

    with _stage("differential"):
        diff = differential(twins, config.diff_metric)

    with _stage("calibrate"):
        calibration = calibrate_threshold(diff, reference, config.theta_grid)
        raw_mask = threshold_mask(diff, calibration.theta_star)
        mask = clean_mask(raw_mask, config.cleanup_radius) if config.cleanup_radius else raw_mask

    with _stage("stats"):
        region = reference if config.histogram_region == "pathology" else None
        histograms = {
            "original": histogram(a_star_plane(original), region),
            "path": histogram(a_star_plane(twins.path_image), region),
            "healthy": histogram(a_star_plane(twins.healthy_image), region),
        }
        original_stats = compare(histograms["original"], histograms["healthy"])
        stats = compare(histograms["path"], histograms["healthy"])
        persistence = feature_persistence(
            outcome.image, spec, config.source_identity, config.surrogate_identity
        )

    with _stage("manifest"):
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "version": __version__,
            "seeds": seeds,
            "backend": backend.describe(),
            "config": config.to_dict(),
            "calibration": calibration.to_summary(),
            # pixels/iou describe the stored mask; raw_* the mask at θ* before cleanup
            "mask": {
                "pixels": mask.count(),
                "reference_pixels": reference.count(),
                "iou_vs_reference": iou(mask, reference),
                "cleanup_radius": config.cleanup_radius,
                "raw_pixels": raw_mask.count(),
                "raw_iou_vs_reference": iou(raw_mask, reference),
                "distractor_overlap": int((mask.bits & distractor_mask(spec).bits).sum()),
            },
            "histograms": {
                "original_vs_healthy": original_stats.to_dict(),
                "path_vs_healthy": stats.to_dict(),
            },
            "feature_persistence": persistence,
            "edit": {
                "steps": len(outcome.trace),
                "max_displacement_norm": outcome.trace.max_displacement,
            } if outcome.trace is not None else None,
            "digests": {
                "deid": _image_digest(outcome.image),
                "twin_path": _image_digest(twins.path_image),
                "twin_healthy": _image_digest(twins.healthy_image),
            },
        }

    logger.info(
        "case %d: theta*=%s iou=%.4f", case_seed, calibration.theta_star, calibration.best_iou
    )
    return PipelineResult(
        original=original,
        de_identified=outcome.image,
        twins=twins,
        diff=diff,
        mask=mask,
        reference=reference,
        calibration=calibration,
        stats=stats,
        original_stats=original_stats,
        histograms=histograms,
        manifest=manifest,
    )


def identity_sweep(
    config: PipelineConfig,
    generator: Union[GeneratorBackend, FlowModel],
    surrogate_identities: Sequence[int],
    case_seed: int,
    workers: int = 1,
    calibration: Literal["per_image", "cohort"] = "per_image",
) -> SweepReport:
    """Run the pipeline once per surrogate identity and summarize mask stability.

    In cohort mode a single θ maximizing the mean IoU across the sweep replaces
    each per-image θ* when forming the masks.
    """
    identities = [int(i) for i in surrogate_identities]
    if len(identities) < 2:
        raise ValueError(f"identity sweep needs at least 2 surrogate identities, got {len(identities)}")
    backend = as_backend(generator)

    def run(identity: int) -> PipelineResult:
        return run_pipeline(replace(config, surrogate_identity=identity), backend, case_seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, identities))
    else:
        results = [run(identity) for identity in identities]

    cohort = None
    masks = [r.mask for r in results]
    if calibration == "cohort":
        cohort = calibrate_cohort([r.diff for r in results], [r.reference for r in results], config.theta_grid)
        masks = [threshold_mask(r.diff, cohort.theta_star) for r in results]
        if config.cleanup_radius:
            masks = [clean_mask(m, config.cleanup_radius) for m in masks]
    elif calibration != "per_image":
        raise ValueError(f"unknown calibration mode {calibration!r}")

    return SweepReport(
        identities=identities,
        results=results,
        stability=mask_stability(masks),
        reference_ious=[iou(m, r.reference) for m, r in zip(masks, results)],
        overlays=[overlay_composite(r.reference, m, r.de_identified) for m, r in zip(masks, results)],
        cohort=cohort,
    )
