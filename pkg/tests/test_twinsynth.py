"""
Tests for counterfactual twins and the end-to-end pipeline.
"""

from dataclasses import replace

import numpy as np
import pytest

from edge_deid.backends import FlowBackend, OracleBackend
from edge_deid.colorlab import RgbImage
from edge_deid.errors import DegenerateRequestError, StageError
from edge_deid.maskdiff import BinaryMask, clean_mask, dilate, iou, permuted_baseline_iou, threshold_mask
from edge_deid.toyflow import (
    Health,
    LatentCode,
    SceneSpec,
    distractor_mask,
    oracle_ground_truth_mask,
    zero_model,
)
from edge_deid.twinsynth import (
    MANIFEST_SCHEMA,
    PipelineConfig,
    TwinMode,
    TwinPair,
    case_seeds,
    differential,
    generate_twins,
    identity_sweep,
    manifest_hash,
    run_pipeline,
    synthesize_original,
)


# =============================================================================
# TWINS
# =============================================================================


class TestGenerateTwins:
    """Tests for twin synthesis."""

    @pytest.mark.parametrize("mode", list(TwinMode))
    def test_oracle_twins_differ_inside_ellipse(self, oracle, spec, mode):
        """Test oracle twins differ only inside the dilated ground truth."""
        anchor = LatentCode.from_seed(12, spec.dim)
        pair = generate_twins(oracle, anchor, 1, mode)
        support = differential(pair).values > 0
        assert support.any()
        assert not np.any(support & ~dilate(oracle_ground_truth_mask(spec), 1).bits)
        assert pair.mode == mode

    def test_same_anchor(self, oracle, spec):
        """Test both twins come from the given anchor."""
        anchor = LatentCode.from_seed(3, spec.dim)
        assert generate_twins(oracle, anchor, 0).anchor is anchor

    def test_degenerate_request(self, oracle, spec):
        """Test identical prompts are rejected."""
        with pytest.raises(DegenerateRequestError):
            generate_twins(oracle, LatentCode.from_seed(0, spec.dim), 0,
                           path_health=Health.HEALTHY, healthy_health=Health.HEALTHY)

    def test_misaligned_pair(self):
        """Test twins must share dimensions."""
        with pytest.raises(ValueError):
            TwinPair(RgbImage.filled(2, 2, (0, 0, 0)), RgbImage.filled(3, 3, (0, 0, 0)),
                     LatentCode.from_seed(0, 12), TwinMode.SEED_RESAMPLE)


class TestDifferential:
    """Tests for the twin difference."""

    def test_identical_twins(self, spec):
        """Test identical twins give a zero map."""
        img = RgbImage.filled(4, 4, (200, 100, 90))
        pair = TwinPair(img, img, LatentCode.from_seed(0, 48), TwinMode.SEED_RESAMPLE)
        assert not differential(pair).values.any()

    def test_delta_e_metric(self, oracle, spec):
        """Test the ΔE metric shares the oracle support."""
        pair = generate_twins(oracle, LatentCode.from_seed(1, spec.dim), 2)
        a_support = differential(pair, "a_star").values > 0
        e_support = differential(pair, "delta_e").values > 0
        assert np.array_equal(a_support, e_support)


# =============================================================================
# PIPELINE
# =============================================================================


class TestRunPipeline:
    """Tests for the end-to-end pipeline on the oracle backend."""

    @pytest.mark.parametrize("seed", [0, 3, 11])
    def test_oracle_mask_matches_ground_truth(self, pipeline_config, oracle, seed):
        """Test the calibrated mask recovers the ellipse."""
        result = run_pipeline(pipeline_config, oracle, seed)
        assert result.manifest["mask"]["iou_vs_reference"] >= 0.95
        assert result.calibration.best_iou >= 0.95

    def test_distractor_excluded(self, pipeline_config, oracle, spec):
        """Test the distractor never enters the mask."""
        result = run_pipeline(pipeline_config, oracle, 5)
        assert not np.any(result.mask.bits & distractor_mask(spec).bits)
        assert result.manifest["mask"]["distractor_overlap"] == 0

    def test_mask_consistent_with_theta(self, pipeline_config, oracle):
        """Test mask = threshold_mask(diff, θ*)."""
        result = run_pipeline(pipeline_config, oracle, 2)
        assert result.mask == threshold_mask(result.diff, result.calibration.theta_star)

    def test_deterministic(self, pipeline_config, oracle):
        """Test identical config and seed give identical manifests."""
        a = run_pipeline(pipeline_config, oracle, 7).manifest
        b = run_pipeline(pipeline_config, oracle, 7).manifest
        assert a == b
        assert manifest_hash(a) == manifest_hash(b)

    def test_seed_changes_manifest(self, pipeline_config, oracle):
        """Test different seeds give different digests."""
        a = run_pipeline(pipeline_config, oracle, 1).manifest
        b = run_pipeline(pipeline_config, oracle, 2).manifest
        assert a["digests"] != b["digests"]

    def test_manifest_contents(self, pipeline_config, oracle):
        """Test the manifest records seeds, config, metrics and no noise seed override."""
        manifest = run_pipeline(pipeline_config, oracle, 4).manifest
        assert manifest["schema"] == MANIFEST_SCHEMA
        assert manifest["seeds"] == case_seeds(4)
        assert manifest["backend"]["name"] == "oracle"
        assert set(manifest["histograms"]) == {"original_vs_healthy", "path_vs_healthy"}
        assert "noise_seed" not in manifest["config"]["guidance"]
        assert manifest["edit"] is None

    def test_histogram_panels(self, pipeline_config, oracle):
        """Test both histogram comparisons are produced."""
        result = run_pipeline(pipeline_config, oracle, 0)
        assert set(result.histograms) == {"original", "path", "healthy"}
        assert 0.0 <= result.stats.bhattacharyya <= 1.0
        assert 0.0 <= result.original_stats.ks <= 1.0

    def test_pathology_region_histograms(self, oracle, spec):
        """Test histograms can be restricted to the pathology region."""
        config = PipelineConfig(spec=spec, histogram_region="pathology")
        result = run_pipeline(config, oracle, 0)
        assert result.histograms["path"].bins.sum() == pytest.approx(1.0)

    def test_surrogate_carries_surrogate_dot(self, pipeline_config, oracle):
        """Test the surrogate shows the surrogate identity's feature dot."""
        persistence = run_pipeline(pipeline_config, oracle, 0).manifest["feature_persistence"]
        assert persistence["surrogate_dot"] == 1.0
        assert persistence["source_dot"] == 0.0

    def test_supplied_reference(self, pipeline_config, oracle, spec):
        """Test an external reference mask drives calibration."""
        reference = BinaryMask.from_pixels(spec.image_size, spec.image_size, [(0, 0)])
        result = run_pipeline(pipeline_config, oracle, 0, reference=reference)
        assert result.reference == reference
        assert result.manifest["mask"]["reference_pixels"] == 1

    def test_same_identity_fails_in_stage(self, oracle, spec):
        """Test a same-identity request is reported as a de_identify stage failure."""
        config = PipelineConfig(spec=spec, source_identity=1, surrogate_identity=1)
        with pytest.raises(StageError) as exc_info:
            run_pipeline(config, oracle, 0)
        assert exc_info.value.stage == "de_identify"

    def test_wrong_original_size(self, pipeline_config, oracle):
        """Test a mis-sized original fails in the original stage."""
        with pytest.raises(StageError, match="stage 'original' failed"):
            run_pipeline(pipeline_config, oracle, 0, original=RgbImage.filled(8, 8, (0, 0, 0)))

    def test_cleanup_keeps_ellipse_core(self, oracle, spec):
        """Test the optional opening keeps the bulk of the mask."""
        config = PipelineConfig(spec=spec, cleanup_radius=1)
        result = run_pipeline(config, oracle, 0)
        assert result.mask.count() > 0.5 * oracle_ground_truth_mask(spec).count()

    def test_manifest_records_cleanup(self, oracle, spec):
        """Test the manifest tells the stored mask apart from the raw θ* mask."""
        config = PipelineConfig(spec=spec, cleanup_radius=1)
        result = run_pipeline(config, oracle, 0)
        raw = threshold_mask(result.diff, result.calibration.theta_star)
        section = result.manifest["mask"]
        assert section["cleanup_radius"] == 1
        assert section["raw_pixels"] == raw.count()
        assert section["raw_iou_vs_reference"] == result.calibration.best_iou
        assert result.mask == clean_mask(raw, 1)
        assert section["pixels"] == result.mask.count()

    def test_manifest_without_cleanup(self, pipeline_config, oracle):
        """Test raw and stored masks agree when no cleanup is configured."""
        section = run_pipeline(pipeline_config, oracle, 2).manifest["mask"]
        assert section["cleanup_radius"] == 0
        assert section["raw_pixels"] == section["pixels"]
        assert section["raw_iou_vs_reference"] == section["iou_vs_reference"]

    def test_synthesize_original(self, spec):
        """Test the stand-in original is deterministic per case seed."""
        assert synthesize_original(spec, 0, 9) == synthesize_original(spec, 0, 9)
        assert synthesize_original(spec, 0, 9) != synthesize_original(spec, 0, 10)

    def test_flow_backend_pipeline(self):
        """Test the pipeline runs on a flow backend and records the edit."""
        spec = SceneSpec(image_size=8)
        config = replace(PipelineConfig(spec=spec), guidance=replace(PipelineConfig().guidance, steps=4))
        result = run_pipeline(config, FlowBackend(zero_model(spec), sample_steps=4), 0)
        assert result.manifest["edit"]["steps"] == 4
        assert result.manifest["backend"]["name"] == "trained"


# =============================================================================
# SWEEP
# =============================================================================


class TestIdentitySweep:
    """Tests for mask stability across surrogate identities."""

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle_stability(self, pipeline_config, oracle, seed):
        """Test oracle masks are stable across identities."""
        report = identity_sweep(pipeline_config, oracle, [1, 2, 3], case_seed=seed)
        assert report.stability.mean >= 0.9
        assert report.stability.std <= 0.05
        assert len(report.overlays) == 3
        assert all(score >= 0.95 for score in report.reference_ious)
        assert all(r.manifest["mask"]["distractor_overlap"] == 0 for r in report.results)

    def test_duplicated_identity(self, pipeline_config, oracle):
        """Test a duplicated identity gives perfect agreement."""
        report = identity_sweep(pipeline_config, oracle, [2, 2], case_seed=1)
        assert report.stability.mean == 1.0

    def test_cohort_mode(self, pipeline_config, oracle):
        """Test cohort calibration shares one θ."""
        report = identity_sweep(pipeline_config, oracle, [1, 2], case_seed=0, calibration="cohort")
        assert report.cohort is not None
        assert report.summary()["cohort"]["theta_star"] == report.cohort.theta_star

    def test_parallel_matches_serial(self, pipeline_config, oracle):
        """Test thread-pool execution gives the same summary."""
        serial = identity_sweep(pipeline_config, oracle, [1, 2, 3], case_seed=2)
        parallel = identity_sweep(pipeline_config, oracle, [1, 2, 3], case_seed=2, workers=3)
        assert serial.summary() == parallel.summary()

    def test_needs_two(self, pipeline_config, oracle):
        """Test a single surrogate is rejected."""
        with pytest.raises(ValueError, match="at least 2"):
            identity_sweep(pipeline_config, oracle, [1], case_seed=0)

    def test_unknown_calibration(self, pipeline_config, oracle):
        """Test unknown calibration modes are rejected."""
        with pytest.raises(ValueError):
            identity_sweep(pipeline_config, oracle, [1, 2], case_seed=0, calibration="global")


# =============================================================================
# TRAINED MODEL
# =============================================================================


@pytest.mark.slow
class TestTrainedTwins:
    """Regression bounds for twins from the session-trained model."""

    def test_difference_concentrates_in_ellipse(self, trained_model):
        """Test mean |Δa*| is larger inside the ellipse than outside."""
        spec = trained_model.spec
        backend = FlowBackend(trained_model)
        inside = oracle_ground_truth_mask(spec).bits
        for seed in range(3):
            diff = differential(generate_twins(backend, LatentCode.from_seed(seed, spec.dim), 1)).values
            assert diff[inside].mean() > diff[~inside].mean()

    def test_sweep_std(self, trained_model):
        """Test trained-backend mask stability stays within bound."""
        spec = trained_model.spec
        report = identity_sweep(PipelineConfig(spec=spec), FlowBackend(trained_model), [1, 2, 3], case_seed=0)
        assert report.stability.std <= 0.1

    def test_pipeline_masks_beat_permutation(self, trained_model):
        """Test calibrated pipeline masks beat a pixel-permutation baseline by 0.2 IoU."""
        spec = trained_model.spec
        backend = FlowBackend(trained_model)
        config = PipelineConfig(spec=spec)
        scores, baselines = [], []
        for seed in range(5):
            result = run_pipeline(config, backend, seed)
            scores.append(iou(result.mask, result.reference))
            baselines.append(permuted_baseline_iou(result.mask, result.reference, seed=seed))
        assert np.median(scores) >= np.median(baselines) + 0.2
