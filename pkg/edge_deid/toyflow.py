"""Desk-scale generator: a procedural scene oracle and a conditional rectified flow.

The oracle renders identity-dependent synthetic "patients" with a known pathology
ellipse, so every downstream mask has an exact ground truth. The flow model is a
small fully connected velocity network trained by flow matching on oracle scenes
and sampled with an Euler integrator.

Conventions:
    t = 0 is noise, t = 1 is data, x_t = (1 - t) x0 + t x1, velocity target x1 - x0.
    Images live in [-1, 1] floats ("normalized space") for all flow math; 8-bit
    pixels appear only at the boundaries. The normalized pixel space doubles as
    the latent space.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import __version__
from .colorlab import RgbImage
from .errors import DimensionMismatchError, DivergenceError, IdentityRangeError, TrainingFailure
from .maskdiff import BinaryMask
from .rng import substream

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "edge-deid-flow/1"

# Scene palette, linear-in-sRGB floats in [0, 1]
SKIN = (0.85, 0.65, 0.55)
ERYTHEMA = (0.80, 0.25, 0.25)
DISTRACTOR_COLOR = (0.75, 0.05, 0.20)
FEATURE_COLOR = (0.20, 0.15, 0.12)
GRADIENT_AMPLITUDE = 0.08

EMBEDDING_SCALE = 1.0


class Health(str, Enum):
    PATHOLOGICAL = "pathological"
    HEALTHY = "healthy"


# =============================================================================
# SCENE SPECIFICATION
# =============================================================================


@dataclass(frozen=True)
class SceneSpec:
    """Procedural scene parameters; coordinates are normalized (x, y) in [0, 1]."""

    image_size: int = 32
    identity_count: int = 4
    pathology_center: Tuple[float, float] = (0.5, 0.6)
    pathology_radii: Tuple[float, float] = (0.25, 0.15)
    distractor_center: Tuple[float, float] = (0.86, 0.86)
    distractor_radius: float = 0.06
    feature_dot_radius: float = 0.07
    noise_amplitude: float = 0.02
    pathology_strength: float = 0.55

    def __post_init__(self):
        object.__setattr__(self, "pathology_center", tuple(float(v) for v in self.pathology_center))
        object.__setattr__(self, "pathology_radii", tuple(float(v) for v in self.pathology_radii))
        object.__setattr__(self, "distractor_center", tuple(float(v) for v in self.distractor_center))
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")
        if self.identity_count < 1:
            raise ValueError("identity_count must be >= 1")
        if not all(0.0 <= v <= 1.0 for v in self.pathology_center):
            raise ValueError("pathology center must lie inside the frame")
        if any(r < 0 for r in self.pathology_radii):
            raise ValueError("pathology radii must be >= 0")
        cx, cy = self.distractor_center
        r = self.distractor_radius
        if r < 0 or cx - r < 0 or cy - r < 0 or cx + r > 1 or cy + r > 1:
            raise ValueError("distractor must lie inside the frame")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        if not 0.0 <= self.pathology_strength <= 1.0:
            raise ValueError("pathology_strength must lie in [0, 1]")

    @property
    def dim(self) -> int:
        """Flattened image dimension (H * W * 3)."""
        return self.image_size * self.image_size * 3

    @property
    def embed_dim(self) -> int:
        return self.identity_count + 2

    def to_dict(self) -> Dict:
        return asdict(self)

    def spec_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class IdentityParams:
    gradient_angle: float
    dot_center: Tuple[float, float]


def identity_params(spec: SceneSpec, identity: int) -> IdentityParams:
    """Background gradient angle and feature-dot position for an identity index."""
    _check_identity(spec, identity)
    n = spec.identity_count
    x = 0.5 if n == 1 else 0.15 + 0.7 * identity / (n - 1)
    return IdentityParams(
        gradient_angle=2.0 * np.pi * identity / n,
        dot_center=(x, 0.22),
    )


def _check_identity(spec: SceneSpec, identity: int) -> None:
    if not 0 <= identity < spec.identity_count:
        raise IdentityRangeError(
            f"identity {identity} outside range [0, {spec.identity_count - 1}]"
        )


@lru_cache(maxsize=64)
def _pixel_centers(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return xs, ys


def _ellipse_bits(size: int, center, radii) -> np.ndarray:
    rx, ry = radii
    if rx <= 0 or ry <= 0:
        return np.zeros((size, size), dtype=bool)
    xs, ys = _pixel_centers(size)
    return ((xs - center[0]) / rx) ** 2 + ((ys - center[1]) / ry) ** 2 <= 1.0


def _disc_bits(size: int, center, radius: float) -> np.ndarray:
    return _ellipse_bits(size, center, (radius, radius))


def oracle_ground_truth_mask(spec: SceneSpec) -> BinaryMask:
    """Exact rasterization of the pathology ellipse (pixel centers inside)."""
    return BinaryMask(_ellipse_bits(spec.image_size, spec.pathology_center, spec.pathology_radii))


def feature_dot_mask(spec: SceneSpec, identity: int) -> BinaryMask:
    """Pixels covered by an identity's biometric feature dot."""
    params = identity_params(spec, identity)
    return BinaryMask(_disc_bits(spec.image_size, params.dot_center, spec.feature_dot_radius))


def distractor_mask(spec: SceneSpec) -> BinaryMask:
    """Pixels covered by the distractor dot (present in every scene)."""
    return BinaryMask(_disc_bits(spec.image_size, spec.distractor_center, spec.distractor_radius))


# =============================================================================
# LATENTS AND CONDITIONS
# =============================================================================


@dataclass(frozen=True, eq=False)
class LatentCode:
    """Seed-derived standard normal vector of the flattened image dimension."""

    seed: int
    vector: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, dim: int) -> "LatentCode":
        vector = substream(seed, "latent").standard_normal(dim)
        vector.flags.writeable = False
        return cls(seed=int(seed), vector=vector)


@dataclass(frozen=True)
class Condition:
    """Structured prompt surrogate: (identity, health), or the empty prompt."""

    identity: int = 0
    health: Health = Health.PATHOLOGICAL
    unconditional: bool = False

    @classmethod
    def null(cls) -> "Condition":
        return cls(identity=0, health=Health.HEALTHY, unconditional=True)

    def with_health(self, health: Health) -> "Condition":
        return replace(self, health=Health(health))

    def with_identity(self, identity: int) -> "Condition":
        return replace(self, identity=identity)

    def embedding(self, identity_count: int) -> np.ndarray:
        """One-hot identity followed by one-hot health, scaled; zeros if unconditional."""
        emb = np.zeros(identity_count + 2)
        if self.unconditional:
            return emb
        if not 0 <= self.identity < identity_count:
            raise IdentityRangeError(
                f"identity {self.identity} outside range [0, {identity_count - 1}]"
            )
        emb[self.identity] = EMBEDDING_SCALE
        emb[identity_count + (0 if self.health == Health.PATHOLOGICAL else 1)] = EMBEDDING_SCALE
        return emb


# =============================================================================
# ORACLE GENERATOR
# =============================================================================


@lru_cache(maxsize=256)
def _base_scene(spec: SceneSpec, identity: int, health: Health) -> np.ndarray:
    size = spec.image_size
    xs, ys = _pixel_centers(size)
    params = identity_params(spec, identity)

    ramp = (xs - 0.5) * np.cos(params.gradient_angle) + (ys - 0.5) * np.sin(params.gradient_angle)
    scene = np.asarray(SKIN)[None, None, :] + GRADIENT_AMPLITUDE * ramp[..., None]

    if health == Health.PATHOLOGICAL:
        inside = _ellipse_bits(size, spec.pathology_center, spec.pathology_radii)
        alpha = spec.pathology_strength * inside[..., None]
        scene = (1.0 - alpha) * scene + alpha * np.asarray(ERYTHEMA)

    scene[_disc_bits(size, spec.distractor_center, spec.distractor_radius)] = DISTRACTOR_COLOR
    scene[_disc_bits(size, params.dot_center, spec.feature_dot_radius)] = FEATURE_COLOR
    scene.flags.writeable = False
    return scene


def _render(spec: SceneSpec, base: np.ndarray, jitter: np.ndarray) -> np.ndarray:
    size = spec.image_size
    texture = spec.noise_amplitude * jitter.reshape(-1, size, size, 3)
    return np.rint(np.clip(base + texture, 0.0, 1.0) * 255.0).astype(np.uint8)


def oracle_generate(spec: SceneSpec, z: LatentCode, c: Condition) -> RgbImage:
    """Render the scene for (z, c): identity background and dot, distractor, and the
    pathology ellipse iff c is pathological. Texture jitter depends only on z."""
    if c.unconditional:
        raise ValueError("the oracle renders concrete conditions only")
    _check_identity(spec, c.identity)
    if z.vector.shape != (spec.dim,):
        raise DimensionMismatchError(
            f"latent of length {z.vector.size} does not match scene dimension {spec.dim}"
        )
    base = _base_scene(spec, c.identity, Health(c.health))
    return RgbImage(_render(spec, base[None], z.vector)[0])


# =============================================================================
# NORMALIZATION
# =============================================================================


def normalize(img: RgbImage) -> np.ndarray:
    """8-bit image to a flat float vector in [-1, 1]."""
    return img.data.astype(np.float64).ravel() / 127.5 - 1.0


def denormalize(vector: np.ndarray, size: Union[int, Tuple[int, int]]) -> RgbImage:
    """Flat normalized vector back to an 8-bit image, clamped.

    `size` is the side of a square image or an explicit (height, width).
    """
    height, width = (size, size) if isinstance(size, (int, np.integer)) else size
    pixels = np.clip(np.rint((np.asarray(vector) + 1.0) * 127.5), 0, 255)
    return RgbImage(pixels.astype(np.uint8).reshape(height, width, 3))


# =============================================================================
# VELOCITY NETWORK
# =============================================================================


def time_features(t: np.ndarray) -> np.ndarray:
    """(t, sin 2πt, cos 2πt) per row."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=-1)


def skip_features(t: np.ndarray) -> np.ndarray:
    """Basis for the time-gated linear skip gain: (1, t, sin 2πt, cos 2πt)."""
    t = np.asarray(t, dtype=np.float64)
    return np.concatenate([np.ones(t.shape + (1,)), time_features(t)], axis=-1)


@dataclass(frozen=True)
class FlowHyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    batches_per_epoch: int = 100
    hidden: int = 256
    cond_dropout: float = 0.1
    optimizer: str = "adam"
    shards: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("batch_size", "epochs", "batches_per_epoch", "hidden", "shards"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(eq=False)
class FlowModel:
    """Velocity MLP v(x, t, c) with two tanh hidden layers and a time-gated skip.

    v = W3 tanh(W2 tanh(W1 [x, τ(t), e(c)] + b1) + b2) + b3 + (s · φ(t)) x
    """

    params: Dict[str, np.ndarray]
    dim: int
    embed_dim: int
    hidden: int
    hyperparams: FlowHyperParams = field(default_factory=FlowHyperParams)
    spec: Optional[SceneSpec] = None
    final_loss: Optional[float] = None

    @property
    def identity_count(self) -> int:
        return self.embed_dim - 2

    def embed(self, c: Condition) -> np.ndarray:
        return c.embedding(self.identity_count)

    def velocity(self, x: np.ndarray, t, emb: np.ndarray) -> np.ndarray:
        """Velocity for a single state (1-D) or a batch (2-D)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        eb = np.broadcast_to(np.asarray(emb, dtype=np.float64), (xb.shape[0], self.embed_dim))
        v, _ = _forward(self.params, xb, tb, eb)
        return v[0] if single else v

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params.values())


def _forward(params, x, t, emb):
    inp = np.concatenate([x, time_features(t), emb], axis=1)
    h1 = np.tanh(inp @ params["W1"] + params["b1"])
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    gain = skip_features(t) @ params["skip"]
    v = h2 @ params["W3"] + params["b3"] + gain[:, None] * x
    return v, (inp, h1, h2)


def loss_and_grad(
    model: FlowModel,
    x_t: np.ndarray,
    t: np.ndarray,
    emb: np.ndarray,
    target: np.ndarray,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean squared flow-matching error and its analytic gradient."""
    p = model.params
    v, (inp, h1, h2) = _forward(p, x_t, t, emb)
    residual = v - target
    loss = float(np.mean(residual ** 2))

    dv = 2.0 * residual / residual.size
    da2 = (dv @ p["W3"].T) * (1.0 - h2 ** 2)
    da1 = (da2 @ p["W2"].T) * (1.0 - h1 ** 2)
    grads = {
        "W3": h2.T @ dv,
        "b3": dv.sum(axis=0),
        "W2": h1.T @ da2,
        "b2": da2.sum(axis=0),
        "W1": inp.T @ da1,
        "b1": da1.sum(axis=0),
        "skip": skip_features(t).T @ np.sum(dv * x_t, axis=1),
    }
    return loss, grads


def init_model(
    dim: int,
    embed_dim: int,
    hidden: int,
    rng: np.random.Generator,
    hyperparams: Optional[FlowHyperParams] = None,
    spec: Optional[SceneSpec] = None,
) -> FlowModel:
    """Scaled-normal initialization; the skip gain starts at zero."""
    in_dim = dim + 3 + embed_dim
    params = {
        "W1": rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim),
        "b1": np.zeros(hidden),
        "W2": rng.standard_normal((hidden, hidden)) / np.sqrt(hidden),
        "b2": np.zeros(hidden),
        "W3": rng.standard_normal((hidden, dim)) / np.sqrt(hidden),
        "b3": np.zeros(dim),
        "skip": np.zeros(4),
    }
    return FlowModel(
        params=params,
        dim=dim,
        embed_dim=embed_dim,
        hidden=hidden,
        hyperparams=hyperparams or FlowHyperParams(hidden=hidden),
        spec=spec,
    )


def zero_model(spec: SceneSpec, hidden: int = 8) -> FlowModel:
    """A model whose velocity is identically zero (identity transport)."""
    model = init_model(spec.dim, spec.embed_dim, hidden, substream(0, "zero"), spec=spec)
    model.params = {name: np.zeros_like(value) for name, value in model.params.items()}
    return model


# =============================================================================
# TRAINING
# =============================================================================


class FlowTask(Protocol):
    """Source of (data, condition-embedding) batches for flow matching."""

    dim: int
    embed_dim: int

    def sample_data(self, rng: np.random.Generator, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        ...


class SceneTask:
    """Oracle scenes over random identities, health labels and texture latents."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.dim = spec.dim
        self.embed_dim = spec.embed_dim
        self._conditions = [
            Condition(identity, health)
            for identity in range(spec.identity_count)
            for health in (Health.PATHOLOGICAL, Health.HEALTHY)
        ]
        self._bases = np.stack([_base_scene(spec, c.identity, c.health) for c in self._conditions])
        self._embeddings = np.stack([c.embedding(spec.identity_count) for c in self._conditions])

    def sample_data(self, rng, batch_size):
        idx = rng.integers(len(self._conditions), size=batch_size)
        jitter = rng.standard_normal((batch_size, self.dim))
        pixels = _render(self.spec, self._bases[idx], jitter)
        x1 = pixels.reshape(batch_size, -1).astype(np.float64) / 127.5 - 1.0
        return x1, self._embeddings[idx]


class TwoGaussianTask:
    """2-D debug task: condition k draws from an isotropic Gaussian at means[k]."""

    def __init__(self, means=((2.0, 2.0), (-2.0, -2.0)), std: float = 0.3):
        self.means = np.asarray(means, dtype=np.float64)
        self.std = std
        self.dim = self.means.shape[1]
        self.embed_dim = self.means.shape[0]

    def embedding(self, k: int) -> np.ndarray:
        return np.eye(self.embed_dim)[k]

    def sample_data(self, rng, batch_size):
        idx = rng.integers(self.embed_dim, size=batch_size)
        x1 = self.means[idx] + self.std * rng.standard_normal((batch_size, self.dim))
        return x1, np.eye(self.embed_dim)[idx]


@dataclass
class TrainedFlow:
    model: FlowModel
    batch_losses: List[float]
    epoch_losses: List[float]

    @property
    def initial_loss(self) -> float:
        return self.batch_losses[0]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            params[name] -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class _SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for name in sorted(params):
            params[name] -= self.lr * grads[name]


def interpolate(x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rectified-flow path point x_t and its velocity target x1 - x0."""
    tt = np.asarray(t)[:, None]
    return (1.0 - tt) * x0 + tt * x1, x1 - x0


def _sharded_loss_and_grad(model, x_t, t, emb, target, shards, pool):
    if shards == 1:
        return loss_and_grad(model, x_t, t, emb, target)
    bounds = np.linspace(0, len(t), shards + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    results = list(pool.map(
        lambda s: loss_and_grad(model, x_t[s], t[s], emb[s], target[s]), chunks
    ))
    # Fixed reduction order: shard index, independent of completion order.
    total = len(t)
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for s, (part_loss, part_grads) in zip(chunks, results):
        weight = (s.stop - s.start) / total
        loss += weight * part_loss
        for k in grads:
            grads[k] += weight * part_grads[k]
    return loss, grads


def train_velocity(
    task: FlowTask,
    hp: FlowHyperParams,
    seed: int,
    spec: Optional[SceneSpec] = None,
    progress: bool = False,
) -> TrainedFlow:
    """Flow-matching training on any FlowTask; deterministic given `seed`."""
    model = init_model(
        task.dim, task.embed_dim, hp.hidden, substream(seed, "train", "init"),
        hyperparams=hp, spec=spec,
    )
    batches = substream(seed, "train", "batches")
    optimizer = _Adam(model.params, hp.learning_rate) if hp.optimizer == "adam" \
        else _SGD(model.params, hp.learning_rate)

    batch_losses: List[float] = []
    epoch_losses: List[float] = []
    pool = ThreadPoolExecutor(max_workers=hp.shards) if hp.shards > 1 else None
    try:
        steps = tqdm(
            range(hp.epochs * hp.batches_per_epoch),
            desc="train-flow",
            disable=not progress,
        )
        for step in steps:
            x1, emb = task.sample_data(batches, hp.batch_size)
            x0 = batches.standard_normal(x1.shape)
            t = batches.random(hp.batch_size)
            dropped = batches.random(hp.batch_size) < hp.cond_dropout
            emb = np.where(dropped[:, None], 0.0, emb)
            x_t, target = interpolate(x0, x1, t)

            loss, grads = _sharded_loss_and_grad(model, x_t, t, emb, target, hp.shards, pool)
            if not np.isfinite(loss):
                raise TrainingFailure(f"non-finite loss at step {step}")
            optimizer.step(model.params, grads)
            batch_losses.append(loss)

            if (step + 1) % hp.batches_per_epoch == 0:
                epoch_loss = float(np.mean(batch_losses[-hp.batches_per_epoch:]))
                epoch_losses.append(epoch_loss)
                logger.info("epoch %d loss %.5f", len(epoch_losses), epoch_loss)
                steps.set_postfix(loss=f"{epoch_loss:.4f}")
    finally:
        if pool is not None:
            pool.shutdown()

    if not model.is_finite():
        raise TrainingFailure("training produced non-finite weights")
    model.final_loss = epoch_losses[-1]
    return TrainedFlow(model=model, batch_losses=batch_losses, epoch_losses=epoch_losses)


def train_flow(
    spec: SceneSpec,
    hp: Optional[FlowHyperParams] = None,
    seed: int = 0,
    progress: bool = False,
) -> TrainedFlow:
    """Train the conditional velocity network on oracle scenes (10% condition dropout)."""
    return train_velocity(SceneTask(spec), hp or FlowHyperParams(), seed, spec=spec, progress=progress)


# =============================================================================
# SAMPLING
# =============================================================================


def euler_integrate(model: FlowModel, x0: np.ndarray, emb: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dx/dt = v(x, t, c) from t = 0 to 1 with `steps` Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * model.velocity(x, k * dt, emb)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"sampler state became non-finite at step {k}")
    return x


def sample_normalized(model: FlowModel, z: LatentCode, c: Condition, steps: int = 50) -> np.ndarray:
    if z.vector.shape != (model.dim,):
        raise DimensionMismatchError(
            f"latent of length {z.vector.size} does not match model dimension {model.dim}"
        )
    return euler_integrate(model, z.vector, model.embed(c), steps)


def sample(model: FlowModel, z: LatentCode, c: Condition, steps: int = 50) -> RgbImage:
    """Generate an image from the anchor z under condition c."""
    if model.spec is None:
        raise ValueError("model has no SceneSpec; cannot shape its output as an image")
    return denormalize(sample_normalized(model, z, c, steps), model.spec.image_size)


# =============================================================================
# CHECKPOINTS
# =============================================================================


def save_model(model: FlowModel, path: Union[str, Path]) -> Path:
    """Write weights plus embedded JSON metadata to an .npz archive."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "dim": model.dim,
        "embed_dim": model.embed_dim,
        "hidden": model.hidden,
        "hyperparams": asdict(model.hyperparams),
        "spec": model.spec.to_dict() if model.spec else None,
        "spec_hash": model.spec.spec_hash() if model.spec else None,
        "final_loss": model.final_loss,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **model.params)
    return path


def load_model(path: Union[str, Path], expect_spec: Optional[SceneSpec] = None) -> FlowModel:
    """Load a checkpoint written by `save_model`, verifying format and spec hash."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        params = {k: archive[k].astype(np.float64) for k in archive.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an edge-deid flow checkpoint")
    spec = None
    if meta.get("spec") is not None:
        raw = meta["spec"]
        spec = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    if expect_spec is not None and (spec is None or spec.spec_hash() != expect_spec.spec_hash()):
        raise ValueError(f"checkpoint {path} was trained for a different scene spec")
    return FlowModel(
        params=params,
        dim=meta["dim"],
        embed_dim=meta["embed_dim"],
        hidden=meta["hidden"],
        hyperparams=FlowHyperParams(**meta["hyperparams"]),
        spec=spec,
        final_loss=meta.get("final_loss"),
    )


def model_digest(model: FlowModel) -> str:
    """Content hash of the weights, for manifests."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(model.params[name]).tobytes())
    return digest.hexdigest()[:16]
