"""Federated round-trip simulation over de-identified pipeline outputs.

Each client turns its (synthetic surrogate, differential mask) pairs into
per-pixel features, trains a 3-weight logistic segmenter locally, and sends only
the weight delta. The aggregator averages deltas by sample count (FedAvg) in a
star topology with synchronous rounds.

Every wire message is audited on its serialized bytes before aggregation: exact
schema, a size cap independent of image dimensions, and no 64-byte window that
matches an original image held in the edge vault.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .backends import GeneratorBackend, OracleBackend, as_backend
from .colorlab import A_STAR_OFFSET, RgbImage, a_star_plane
from .errors import AuditFailure, DegenerateGradientError, EmptyRegionError, TrainingFailure
from .maskdiff import BinaryMask, iou
from .rng import derive_seed
from .toyflow import Condition, FlowModel, Health, LatentCode, oracle_generate, oracle_ground_truth_mask
from .twinsynth import PipelineConfig, manifest_hash, run_pipeline
from .vault import OriginalVault

logger = logging.getLogger(__name__)

FEATURE_COUNT = 3
# Offset a* is centered on the neutral axis and scaled by this many units
FEATURE_SCALE = 16.0
# Serialized wire messages larger than this fail the audit
MAX_WIRE_BYTES = 512
WIRE_FIELDS = ("client_id", "delta", "manifest_hash", "round", "sample_count")

Dataset = List[Tuple[np.ndarray, BinaryMask]]


# =============================================================================
# FEATURES AND MODEL
# =============================================================================


def neighborhood_mean(plane: np.ndarray) -> np.ndarray:
    """3x3 box mean with edge clamping."""
    padded = np.pad(np.asarray(plane, dtype=np.float64), 1, mode="edge")
    h, w = plane.shape
    total = sum(padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    return total / 9.0


def featurize(image: RgbImage) -> np.ndarray:
    """Per-pixel (scaled offset a*, its 3x3 mean, 1) as an (H, W, 3) array."""
    a = (a_star_plane(image).values.astype(np.float64) - A_STAR_OFFSET) / FEATURE_SCALE
    return np.stack([a, neighborhood_mean(a), np.ones_like(a)], axis=-1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class SegModel:
    """Per-pixel logistic classifier p(pathology) = σ(w · x)."""

    weights: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_COUNT))

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (FEATURE_COUNT,):
            raise ValueError(f"SegModel needs {FEATURE_COUNT} weights, got shape {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("SegModel weights must be finite")
        object.__setattr__(self, "weights", weights)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(features @ self.weights)

    def predict_mask(self, features: np.ndarray) -> BinaryMask:
        return BinaryMask(features @ self.weights > 0.0)

    def __eq__(self, other) -> bool:
        return isinstance(other, SegModel) and np.array_equal(self.weights, other.weights)

    __hash__ = None


def _stack(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    if not dataset:
        raise EmptyRegionError("client dataset is empty")
    x = np.concatenate([features.reshape(-1, FEATURE_COUNT) for features, _ in dataset])
    y = np.concatenate([mask.bits.ravel().astype(np.float64) for _, mask in dataset])
    return x, y


def logistic_loss(weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-pixel binary cross-entropy."""
    z = x @ weights
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def logistic_gradient(weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return x.T @ (_sigmoid(x @ weights) - y) / len(y)


def stable_learning_rate(dataset: Dataset) -> float:
    """Step size below which full-batch gradient descent never increases the loss.

    The logistic Hessian is bounded by XᵀX / (4N), so 1/L = 4 / λmax(XᵀX / N).
    """
    x, _ = _stack(dataset)
    lam = float(np.linalg.eigvalsh(x.T @ x / len(x)).max())
    return 4.0 / lam


@dataclass
class ClientState:
    client_id: int
    dataset: Dataset
    model: SegModel = field(default_factory=SegModel)
    manifest_hashes: List[str] = field(default_factory=list)

    @property
    def sample_count(self) -> int:
        return sum(mask.bits.size for _, mask in self.dataset)


@dataclass
class LocalUpdate:
    delta: np.ndarray
    losses: List[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def local_train(state: ClientState, epochs: int, lr: float) -> LocalUpdate:
    """Full-batch gradient descent from the client's current model.

    Returns end - start weights and the loss before each epoch plus the final
    loss. The client's local model copy is advanced to the end weights.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    x, y = _stack(state.dataset)
    start = state.model.weights.copy()
    w = start.copy()
    losses = []
    for epoch in range(epochs + 1):
        loss = logistic_loss(w, x, y)
        if not np.isfinite(loss):
            raise TrainingFailure(f"client {state.client_id}: non-finite loss at epoch {epoch}")
        losses.append(loss)
        if epoch < epochs:
            w = w - lr * logistic_gradient(w, x, y)
    state.model = SegModel(w)
    return LocalUpdate(delta=w - start, losses=losses)


def evaluate_iou(model: SegModel, dataset: Dataset) -> float:
    """Mean IoU of the model's predicted masks against the dataset masks."""
    if not dataset:
        raise EmptyRegionError("evaluation dataset is empty")
    return float(np.mean([iou(model.predict_mask(f), m) for f, m in dataset]))


# =============================================================================
# WIRE FORMAT AND AUDIT
# =============================================================================


@dataclass(frozen=True)
class WireMessage:
    round: int
    client_id: int
    delta: Tuple[float, float, float]
    sample_count: int
    manifest_hash: str

    def __post_init__(self):
        object.__setattr__(self, "delta", tuple(float(v) for v in self.delta))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["delta"] = list(self.delta)
        return data

    def to_bytes(self) -> bytes:
        """Canonical JSON: sorted keys, no whitespace."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, payload: bytes) -> "WireMessage":
        return cls(**json.loads(payload.decode("utf-8")))


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    reason: str
    size: int

    def __bool__(self) -> bool:
        return self.passed


def _schema_problem(data) -> Optional[str]:
    if not isinstance(data, dict):
        return "schema: payload is not a JSON object"
    if tuple(sorted(data)) != WIRE_FIELDS:
        extra = sorted(set(data) - set(WIRE_FIELDS))
        missing = sorted(set(WIRE_FIELDS) - set(data))
        return f"schema: unexpected fields {extra}, missing fields {missing}"
    for key in ("round", "client_id", "sample_count"):
        if not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < 0:
            return f"schema: {key} must be a non-negative integer"
    delta = data["delta"]
    if (
        not isinstance(delta, list)
        or len(delta) != FEATURE_COUNT
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in delta)
        or not all(np.isfinite(delta))
    ):
        return f"schema: delta must be {FEATURE_COUNT} finite numbers"
    if not isinstance(data["manifest_hash"], str) or len(data["manifest_hash"]) > 64:
        return "schema: manifest_hash must be a string of at most 64 characters"
    return None


def audit_wire(message: Union[WireMessage, bytes], vault: Optional[OriginalVault] = None) -> AuditResult:
    """Check a serialized message: size bound, then original-byte leakage, then schema."""
    payload = message.to_bytes() if isinstance(message, WireMessage) else bytes(message)
    size = len(payload)
    if size > MAX_WIRE_BYTES:
        return AuditResult(False, f"size bound: {size} bytes exceeds {MAX_WIRE_BYTES}", size)
    if vault is not None:
        offset = vault.find_leak(payload)
        if offset is not None:
            return AuditResult(
                False,
                f"leakage match: {vault.window_bytes}-byte window of an original image at offset {offset}",
                size,
            )
    try:
        data = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return AuditResult(False, f"schema: not canonical JSON ({exc})", size)
    problem = _schema_problem(data)
    if problem:
        return AuditResult(False, problem, size)
    return AuditResult(True, "ok", size)


def fedavg(messages: Sequence[WireMessage], base: SegModel) -> SegModel:
    """base + Σ nᵢ Δᵢ / Σ nᵢ, summed in client-id order."""
    if not messages:
        raise ValueError("fedavg needs at least one message")
    rounds = {m.round for m in messages}
    if len(rounds) != 1:
        raise ValueError(f"fedavg received messages from mixed rounds {sorted(rounds)}")
    ordered = sorted(messages, key=lambda m: m.client_id)
    total = sum(m.sample_count for m in ordered)
    if total <= 0:
        raise ValueError("fedavg needs a positive total sample count")
    update = np.zeros(FEATURE_COUNT)
    for m in ordered:
        update += m.sample_count * np.asarray(m.delta)
    return SegModel(base.weights + update / total)


# =============================================================================
# GRADIENT INVERSION PROBE
# =============================================================================


def per_pixel_gradients(model: SegModel, features: np.ndarray, mask: BinaryMask) -> np.ndarray:
    """Loss gradient of every pixel sample, (σ(w·x) - y) x, shaped (H, W, 3).

    This is what an honest-but-curious aggregator could observe if one image's
    per-sample updates were shared.
    """
    residual = model.predict_proba(features) - mask.bits.astype(np.float64)
    return residual[..., None] * features


@dataclass
class ProbeReport:
    success: bool
    reason: str = ""
    reconstruction: Optional[np.ndarray] = None
    corr_surrogate: Optional[float] = None
    corr_original: Optional[float] = None
    label_agreement: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            "success": self.success,
            "reason": self.reason,
            "corr_surrogate": self.corr_surrogate,
            "corr_original": self.corr_original,
            "label_agreement": self.label_agreement,
        }


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def gradient_inversion_probe(
    gradient: np.ndarray,
    label_guess: Optional[BinaryMask] = None,
    surrogate_features: Optional[np.ndarray] = None,
    original_plane: Optional[np.ndarray] = None,
    raise_on_failure: bool = False,
) -> ProbeReport:
    """Invert per-pixel logistic gradients back to the a* feature plane.

    The bias component of each gradient is σ - y, so dividing by it recovers
    x exactly; its sign reveals the label (negative means y = 1). Correlations
    are reported against the surrogate's true a* feature and against an
    original-image plane (e.g. the source identity's feature-dot indicator).
    """
    g = np.asarray(gradient, dtype=np.float64)
    if not np.any(g):
        if raise_on_failure:
            raise DegenerateGradientError("gradient is identically zero")
        return ProbeReport(success=False, reason="degenerate gradient: all zeros")

    scale = g[..., 2]
    valid = scale != 0
    reconstruction = np.zeros(scale.shape)
    reconstruction[valid] = g[..., 0][valid] / scale[valid]

    report = ProbeReport(success=True, reconstruction=reconstruction)
    if surrogate_features is not None:
        report.corr_surrogate = _pearson(reconstruction[valid], surrogate_features[..., 0][valid])
    if original_plane is not None:
        report.corr_original = _pearson(reconstruction[valid], np.asarray(original_plane)[valid])
    if label_guess is not None:
        inferred = scale < 0
        report.label_agreement = float(np.mean(inferred[valid] == label_guess.bits[valid]))
    return report


# =============================================================================
# FEDERATION
# =============================================================================


@dataclass
class RoundReport:
    round: int
    weights: Tuple[float, float, float]
    client_losses: Dict[int, float]
    heldout_iou: float

    def to_row(self) -> Dict:
        row = {"round": self.round, "heldout_iou": self.heldout_iou}
        row.update({f"w{i}": w for i, w in enumerate(self.weights)})
        row.update({f"loss_client_{cid}": loss for cid, loss in sorted(self.client_losses.items())})
        return row


@dataclass
class FederationResult:
    reports: List[RoundReport]
    audit_log: List[Dict]
    global_model: SegModel
    client_round1_iou: Dict[int, float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.reports])


def client_identities(n_clients: int, identity_count: int) -> List[List[int]]:
    """Non-IID split: client k draws surrogates from identities ≡ k (mod n_clients)."""
    if n_clients <= identity_count:
        return [list(range(k, identity_count, n_clients)) for k in range(n_clients)]
    return [[k % identity_count] for k in range(n_clients)]


def build_client(
    client_id: int,
    identities: Sequence[int],
    cases: int,
    config: PipelineConfig,
    backend: GeneratorBackend,
    seed: int,
    vault: OriginalVault,
) -> ClientState:
    """Synthesize a client's local dataset; originals stay in the vault."""
    count = config.spec.identity_count
    if count < 2:
        raise ValueError("federation needs at least 2 identities to de-identify")
    dataset: Dataset = []
    hashes = []
    for j in range(cases):
        surrogate = identities[j % len(identities)]
        case_seed = derive_seed(seed, "client", client_id, "case", j)
        case_config = replace(
            config, source_identity=(surrogate + 1) % count, surrogate_identity=surrogate
        )
        result = run_pipeline(case_config, backend, case_seed)
        case_id = vault.deposit(result.original, f"client{client_id}-case{j}")
        dataset.append((featurize(result.de_identified), result.mask))
        hashes.append(manifest_hash(result.manifest))
        vault.purge(case_id)
    return ClientState(client_id=client_id, dataset=dataset, manifest_hashes=hashes)


def heldout_dataset(config: PipelineConfig, seed: int, cases: int = 4) -> Dataset:
    """Fresh pathological oracle scenes labeled with the ground-truth ellipse."""
    spec = config.spec
    truth = oracle_ground_truth_mask(spec)
    out = []
    for j in range(cases):
        z = LatentCode.from_seed(derive_seed(seed, "holdout", j), spec.dim)
        image = oracle_generate(spec, z, Condition(j % spec.identity_count, Health.PATHOLOGICAL))
        out.append((featurize(image), truth))
    return out


def federate(
    clients: Sequence[ClientState],
    heldout: Dataset,
    rounds: int,
    vault: Optional[OriginalVault] = None,
    epochs: int = 50,
    lr: Optional[float] = None,
    workers: int = 1,
) -> FederationResult:
    """Synchronous FedAvg rounds over already-built clients.

    Training reads only the clients' de-identified features and masks; the
    vault is consulted for its leak index alone. ``lr=None`` gives each
    client its own ``stable_learning_rate``.

    Raises AuditFailure (carrying the offending message) if any wire message
    fails the audit; nothing from that round is aggregated.
    """
    if not clients or rounds < 1:
        raise ValueError("need at least one client and one round")
    rates = {
        c.client_id: lr if lr is not None else stable_learning_rate(c.dataset)
        for c in clients
    }

    global_model = SegModel()
    reports: List[RoundReport] = []
    audit_log: List[Dict] = []
    client_round1_iou: Dict[int, float] = {}

    def train(client: ClientState) -> Tuple[ClientState, LocalUpdate]:
        client.model = global_model
        return client, local_train(client, epochs, rates[client.client_id])

    for r in range(1, rounds + 1):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(train, clients))
        else:
            updates = [train(c) for c in clients]

        messages = []
        for client, update in sorted(updates, key=lambda cu: cu[0].client_id):
            message = WireMessage(
                round=r,
                client_id=client.client_id,
                delta=tuple(update.delta),
                sample_count=client.sample_count,
                manifest_hash=manifest_hash({"cases": client.manifest_hashes}),
            )
            verdict = audit_wire(message, vault)
            audit_log.append({
                "round": r,
                "client_id": client.client_id,
                "passed": verdict.passed,
                "reason": verdict.reason,
                "bytes": verdict.size,
            })
            if not verdict.passed:
                raise AuditFailure(verdict.reason, message)
            messages.append(message)
            if r == 1:
                client_round1_iou[client.client_id] = evaluate_iou(client.model, heldout)

        global_model = fedavg(messages, global_model)
        report = RoundReport(
            round=r,
            weights=tuple(float(w) for w in global_model.weights),
            client_losses={c.client_id: u.final_loss for c, u in updates},
            heldout_iou=evaluate_iou(global_model, heldout),
        )
        reports.append(report)
        logger.info("round %d held-out IoU %.4f", r, report.heldout_iou)

    return FederationResult(
        reports=reports,
        audit_log=audit_log,
        global_model=global_model,
        client_round1_iou=client_round1_iou,
    )


def run_federation(
    n_clients: int,
    rounds: int,
    config: PipelineConfig,
    seed: int,
    generator: Optional[Union[GeneratorBackend, FlowModel]] = None,
    epochs: int = 50,
    lr: Optional[float] = None,
    cases_per_client: int = 2,
    workers: int = 1,
    vault: Optional[OriginalVault] = None,
) -> FederationResult:
    """Build the clients, then run ``federate`` on them.

    Without a caller-supplied vault the run owns one and closes it on the
    way out, so no leak index outlives the run.
    """
    if n_clients < 1 or rounds < 1:
        raise ValueError("n_clients and rounds must be >= 1")
    backend = as_backend(generator) if generator is not None else OracleBackend(config.spec)
    owned = vault is None
    if owned:
        vault = OriginalVault()
    try:
        splits = client_identities(n_clients, config.spec.identity_count)
        clients = [
            build_client(k, splits[k], cases_per_client, config, backend, seed, vault)
            for k in range(n_clients)
        ]
        return federate(clients, heldout_dataset(config, seed), rounds, vault, epochs, lr, workers)
    finally:
        if owned:
            vault.close()
