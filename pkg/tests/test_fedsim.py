"""
Tests for the federated round-trip simulation.

Tests cover:
- Per-pixel features and the logistic segmenter
- Local training and FedAvg aggregation
- Wire format and privacy audit
- Gradient inversion probe
- Full federation runs on the oracle backend
"""

import json

import numpy as np
import pytest

from edge_deid.colorlab import RgbImage
from edge_deid.errors import AuditFailure, DegenerateGradientError, EmptyRegionError
from edge_deid.fedsim import (
    MAX_WIRE_BYTES,
    WIRE_FIELDS,
    ClientState,
    SegModel,
    WireMessage,
    audit_wire,
    build_client,
    client_identities,
    evaluate_iou,
    featurize,
    federate,
    fedavg,
    gradient_inversion_probe,
    heldout_dataset,
    local_train,
    logistic_gradient,
    logistic_loss,
    neighborhood_mean,
    per_pixel_gradients,
    run_federation,
    stable_learning_rate,
)
from edge_deid.maskdiff import BinaryMask
from edge_deid.toyflow import feature_dot_mask
from edge_deid.twinsynth import run_pipeline
from edge_deid.vault import OriginalVault


def message(client_id=0, delta=(0.1, -0.2, 0.3), sample_count=10, round=1):
    return WireMessage(round=round, client_id=client_id, delta=delta,
                       sample_count=sample_count, manifest_hash="0123456789abcdef")


class RecordingVault(OriginalVault):
    def __init__(self):
        super().__init__()
        self.seen = []

    def deposit(self, image, case_id=None):
        self.seen.append(image)
        return super().deposit(image, case_id)


class SealedVault(OriginalVault):
    def __init__(self):
        super().__init__()
        self.sealed = False

    def get(self, case_id):
        if self.sealed:
            raise AssertionError(f"original {case_id} read after sealing")
        return super().get(case_id)


def toy_dataset():
    """Two pixels, linearly separable on the first feature."""
    features = np.array([[[-1.0, -1.0, 1.0], [1.0, 1.0, 1.0]]])
    return [(features, BinaryMask(np.array([[False, True]])))]


# =============================================================================
# FEATURES AND MODEL
# =============================================================================


class TestFeatures:
    """Tests for per-pixel features."""

    def test_constant_image(self):
        """Test a constant image gives constant planes and a unit bias."""
        features = featurize(RgbImage.filled(5, 5, (200, 120, 110)))
        assert features.shape == (5, 5, 3)
        for k in range(3):
            assert np.all(features[..., k] == features[0, 0, k])
        assert np.all(features[..., 2] == 1.0)

    def test_hot_pixel_spreads(self):
        """Test a single hot pixel spreads over its 3x3 neighborhood."""
        plane = np.zeros((5, 5))
        plane[2, 2] = 9.0
        mean = neighborhood_mean(plane)
        assert np.all(mean[1:4, 1:4] == 1.0)
        assert mean.sum() == 9.0

    def test_edge_clamping(self):
        """Test corners average clamped copies of themselves."""
        plane = np.zeros((3, 3))
        plane[0, 0] = 9.0
        assert neighborhood_mean(plane)[0, 0] == 4.0

    def test_seg_model_shape(self):
        """Test the segmenter has exactly three finite weights."""
        with pytest.raises(ValueError):
            SegModel(np.zeros(4))
        with pytest.raises(ValueError):
            SegModel(np.array([np.nan, 0.0, 0.0]))


class TestLocalTrain:
    """Tests for client-side gradient descent."""

    def test_zero_epochs(self):
        """Test zero epochs give a zero delta."""
        update = local_train(ClientState(0, toy_dataset()), epochs=0, lr=0.5)
        assert not update.delta.any()
        assert len(update.losses) == 1

    def test_separable_loss_decreases(self):
        """Test the loss strictly decreases each epoch on separable data."""
        update = local_train(ClientState(0, toy_dataset()), epochs=10, lr=0.5)
        assert all(b < a for a, b in zip(update.losses, update.losses[1:]))

    def test_model_advances(self):
        """Test the client's model moves to the end weights."""
        state = ClientState(0, toy_dataset())
        update = local_train(state, epochs=3, lr=0.5)
        np.testing.assert_array_equal(state.model.weights, update.delta)

    def test_gradient_matches_finite_differences(self):
        """Test the analytic gradient within 1e-5 relative error."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((40, 3))
        y = (rng.random(40) < 0.5).astype(float)
        w = rng.standard_normal(3)
        analytic = logistic_gradient(w, x, y)
        eps = 1e-6
        numeric = np.array([
            (logistic_loss(w + eps * e, x, y) - logistic_loss(w - eps * e, x, y)) / (2 * eps)
            for e in np.eye(3)
        ])
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-5

    def test_stable_rate_non_increasing(self, pipeline_config, oracle):
        """Test the computed step bound keeps the loss non-increasing on pipeline data."""
        result = run_pipeline(pipeline_config, oracle, 0)
        dataset = [(featurize(result.de_identified), result.mask)]
        lr = stable_learning_rate(dataset)
        update = local_train(ClientState(0, dataset), epochs=15, lr=lr)
        assert all(b <= a + 1e-12 for a, b in zip(update.losses, update.losses[1:]))

    def test_invalid_lr(self):
        """Test non-positive step sizes are rejected."""
        with pytest.raises(ValueError):
            local_train(ClientState(0, toy_dataset()), epochs=1, lr=0.0)

    def test_empty_dataset(self):
        """Test an empty dataset is rejected."""
        with pytest.raises(EmptyRegionError):
            local_train(ClientState(0, []), epochs=1, lr=0.1)


# =============================================================================
# AGGREGATION
# =============================================================================


class TestFedAvg:
    """Tests for sample-weighted averaging."""

    def test_single_client(self):
        """Test one client adds its delta to the base."""
        base = SegModel(np.array([1.0, 2.0, 3.0]))
        out = fedavg([message(delta=(0.5, 0.5, -1.0))], base)
        np.testing.assert_allclose(out.weights, [1.5, 2.5, 2.0])

    def test_opposite_deltas_cancel(self):
        """Test equal counts with deltas d and -d leave the base unchanged."""
        base = SegModel(np.array([0.2, 0.0, -0.1]))
        out = fedavg([message(0, (1.0, 2.0, 3.0)), message(1, (-1.0, -2.0, -3.0))], base)
        np.testing.assert_allclose(out.weights, base.weights)

    def test_weighted_mean(self):
        """Test counts (1, 3) with deltas (4, 0) move the base by 1."""
        out = fedavg([message(0, (4.0, 0.0, 0.0), 1), message(1, (0.0, 0.0, 0.0), 3)], SegModel())
        assert out.weights[0] == 1.0

    def test_order_independent(self):
        """Test message order does not change the result."""
        msgs = [message(k, tuple(np.random.default_rng(k).standard_normal(3)), 5 + k) for k in range(4)]
        assert fedavg(msgs, SegModel()) == fedavg(msgs[::-1], SegModel())

    def test_empty(self):
        """Test an empty message list is rejected."""
        with pytest.raises(ValueError):
            fedavg([], SegModel())

    def test_mixed_rounds(self):
        """Test messages from different rounds are rejected."""
        with pytest.raises(ValueError, match="mixed rounds"):
            fedavg([message(0, round=1), message(1, round=2)], SegModel())


# =============================================================================
# WIRE AUDIT
# =============================================================================


class TestAuditWire:
    """Tests for the serialized-message audit."""

    def test_well_formed_passes(self):
        """Test a normal message passes."""
        verdict = audit_wire(message())
        assert verdict.passed
        assert bool(verdict)
        assert verdict.size <= MAX_WIRE_BYTES

    def test_canonical_bytes(self):
        """Test messages serialize with sorted keys and no whitespace."""
        payload = message().to_bytes()
        assert b" " not in payload
        assert tuple(json.loads(payload)) == WIRE_FIELDS
        assert WireMessage.from_bytes(payload) == message()

    def test_image_field_fails_size(self, spec):
        """Test a message carrying an image array fails the size bound."""
        data = message().to_dict()
        data["image"] = np.zeros((spec.image_size, spec.image_size, 3), dtype=int).tolist()
        verdict = audit_wire(json.dumps(data, sort_keys=True).encode("utf-8"))
        assert not verdict.passed
        assert verdict.reason.startswith("size bound")

    def test_leaked_window_fails(self):
        """Test bytes of an original image are caught."""
        vault = OriginalVault()
        original = RgbImage(np.random.default_rng(1).integers(0, 256, (8, 8, 3), dtype=np.uint8))
        vault.deposit(original, "case")
        payload = b'{"leak":"' + original.data.tobytes()[:64] + b'"}'
        verdict = audit_wire(payload, vault)
        assert not verdict.passed
        assert verdict.reason.startswith("leakage match")

    def test_extra_field_fails_schema(self):
        """Test a small extra field fails the schema check."""
        data = message().to_dict()
        data["note"] = "hi"
        verdict = audit_wire(json.dumps(data).encode("utf-8"))
        assert not verdict.passed
        assert verdict.reason.startswith("schema")

    def test_non_json_fails_schema(self):
        """Test arbitrary bytes fail the schema check."""
        assert audit_wire(b"\xff\xfe").reason.startswith("schema")

    def test_bad_delta_length(self):
        """Test a delta of the wrong length fails the schema check."""
        data = message().to_dict()
        data["delta"] = [0.0, 1.0]
        assert audit_wire(json.dumps(data).encode("utf-8")).reason.startswith("schema")


# =============================================================================
# GRADIENT INVERSION PROBE
# =============================================================================


class TestInversionProbe:
    """Tests for the single-image gradient inversion attack."""

    @pytest.mark.parametrize("case_seed", [0, 1, 2])
    def test_reconstructs_surrogate_not_original(self, pipeline_config, oracle, spec, case_seed):
        """Test leaked gradients expose the surrogate, not the source identity."""
        result = run_pipeline(pipeline_config, oracle, case_seed)
        features = featurize(result.de_identified)
        gradient = per_pixel_gradients(SegModel(), features, result.mask)
        source_dot = feature_dot_mask(spec, pipeline_config.source_identity).bits.astype(float)
        report = gradient_inversion_probe(gradient, result.mask, features, source_dot)
        assert report.success
        assert report.corr_surrogate >= 0.99
        assert report.corr_original <= 0.2
        assert report.corr_surrogate > report.corr_original
        assert report.label_agreement == 1.0

    def test_zero_gradient(self):
        """Test an all-zero gradient reports failure."""
        report = gradient_inversion_probe(np.zeros((4, 4, 3)))
        assert not report.success
        assert report.reconstruction is None

    def test_zero_gradient_raises_on_request(self):
        """Test the failure can be raised instead."""
        with pytest.raises(DegenerateGradientError):
            gradient_inversion_probe(np.zeros((4, 4, 3)), raise_on_failure=True)


# =============================================================================
# FEDERATION
# =============================================================================


class TestFederation:
    """Tests for full federation runs on the oracle backend."""

    def test_client_split_is_disjoint(self):
        """Test identity subsets are disjoint and cover all identities."""
        splits = client_identities(2, 4)
        assert splits == [[0, 2], [1, 3]]
        assert client_identities(4, 4) == [[0], [1], [2], [3]]

    def test_single_client_single_round(self, pipeline_config, oracle):
        """Test one client and one round equals local training applied to the base."""
        result = run_federation(1, 1, pipeline_config, seed=3, generator=oracle, epochs=5, lr=0.5)
        client = build_client(0, client_identities(1, 4)[0], 2, pipeline_config, oracle, 3, OriginalVault())
        update = local_train(client, epochs=5, lr=0.5)
        np.testing.assert_allclose(result.global_model.weights, update.delta, rtol=1e-12, atol=1e-15)

    def test_deterministic(self, pipeline_config):
        """Test the same seed gives identical round reports."""
        a = run_federation(2, 2, pipeline_config, seed=1, epochs=5)
        b = run_federation(2, 2, pipeline_config, seed=1, epochs=5)
        assert a.to_frame().equals(b.to_frame())
        assert a.audit_log == b.audit_log

    def test_parallel_clients_match(self, pipeline_config):
        """Test concurrent client training gives the same reports."""
        serial = run_federation(2, 2, pipeline_config, seed=4, epochs=5)
        parallel = run_federation(2, 2, pipeline_config, seed=4, epochs=5, workers=2)
        assert serial.to_frame().equals(parallel.to_frame())

    def test_global_model_competitive(self, pipeline_config):
        """Test the final global model is at least as good as the best round-1 client."""
        result = run_federation(4, 5, pipeline_config, seed=0)
        assert len(result.reports) == 5
        best_local = max(result.client_round1_iou.values())
        assert best_local > 0
        assert result.reports[-1].heldout_iou >= best_local

    def test_default_rate_is_stable(self, pipeline_config):
        """Test default per-client step sizes never raise a local loss."""
        result = run_federation(2, 1, pipeline_config, seed=6, epochs=10)
        for loss in result.reports[0].client_losses.values():
            assert loss < np.log(2.0)

    def test_training_never_reads_originals(self, pipeline_config, oracle):
        """Test emptying the vault before training changes nothing."""
        baseline = run_federation(2, 2, pipeline_config, seed=8, generator=oracle, epochs=5)

        vault = SealedVault()
        splits = client_identities(2, pipeline_config.spec.identity_count)
        clients = [build_client(k, splits[k], 2, pipeline_config, oracle, 8, vault) for k in range(2)]
        vault.purge_all()
        vault.sealed = True
        result = federate(clients, heldout_dataset(pipeline_config, 8), 2, vault, epochs=5)

        assert len(vault) == 0
        assert result.to_frame().equals(baseline.to_frame())
        np.testing.assert_array_equal(result.global_model.weights, baseline.global_model.weights)

    def test_owned_vault_closed_after_run(self, pipeline_config, monkeypatch):
        """Test a run-owned vault drops its leak index when the run ends."""
        created = []

        class TrackedVault(OriginalVault):
            def __init__(self):
                super().__init__()
                created.append(self)

        monkeypatch.setattr("edge_deid.fedsim.OriginalVault", TrackedVault)
        run_federation(1, 1, pipeline_config, seed=2, epochs=1)
        assert len(created) == 1
        assert created[0].index_size == 0

    def test_audit_log(self, pipeline_config):
        """Test every message is audited and logged."""
        result = run_federation(2, 3, pipeline_config, seed=0, epochs=2)
        assert len(result.audit_log) == 6
        assert all(entry["passed"] for entry in result.audit_log)

    def test_originals_never_retained(self, pipeline_config):
        """Test originals are purged from the vault but stay fingerprinted."""
        vault = RecordingVault()
        run_federation(1, 1, pipeline_config, seed=2, epochs=1, vault=vault)
        assert len(vault) == 0
        assert len(vault.seen) == 2
        assert vault.find_leak(vault.seen[0].data.tobytes()[:64]) == 0

    def test_client_dataset_shape(self, pipeline_config, oracle):
        """Test each client case contributes one feature stack and mask."""
        vault = OriginalVault()
        client = build_client(0, [1], 1, pipeline_config, oracle, 5, vault)
        features, mask = client.dataset[0]
        size = pipeline_config.spec.image_size
        assert features.shape == (size, size, 3)
        assert len(client.manifest_hashes) == 1
        assert len(vault) == 0
        assert client.sample_count == mask.bits.size

    def test_audit_failure_aborts(self, pipeline_config, monkeypatch):
        """Test an oversized message aborts the federation."""
        monkeypatch.setattr("edge_deid.fedsim.MAX_WIRE_BYTES", 10)
        with pytest.raises(AuditFailure, match="size bound") as exc_info:
            run_federation(1, 1, pipeline_config, seed=0, epochs=1)
        assert isinstance(exc_info.value.message, WireMessage)

    def test_invalid_sizes(self, pipeline_config):
        """Test zero clients or rounds are rejected."""
        with pytest.raises(ValueError):
            run_federation(0, 1, pipeline_config, seed=0)

    def test_evaluate_empty(self):
        """Test evaluation needs data."""
        with pytest.raises(EmptyRegionError):
            evaluate_iou(SegModel(), [])
