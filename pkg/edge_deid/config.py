"""
Configuration for edge-deid.

Every setting has a built-in default that can be overridden, from lowest to
highest priority, by:
1. Environment variables (EDGE_DEID_*), after `.env` is loaded
2. A config file passed with --config (JSON object or `key = value` lines)
3. CLI flags

  # Using environment variables
  export EDGE_DEID_SEED=7
  export EDGE_DEID_OUTPUT_DIR=./runs
  edge-deid pipeline

  # Using a config file
  echo "gamma_src = 1.0" > run.cfg
  edge-deid pipeline --config run.cfg --seed 3

The effective RunConfig is written into every manifest.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from .errors import UsageError


def get_config(key: str, default=None, type_cast=None):
    """
    Get configuration value with priority:
    1. Environment variable EDGE_DEID_{KEY}
    2. Default value

    Args:
        key: Configuration key (will be uppercased for env var)
        default: Default value if env var not set
        type_cast: Optional function to cast env var value

    Returns:
        Configuration value
    """
    env_value = os.getenv(f"EDGE_DEID_{key.upper()}")
    if env_value is not None:
        return type_cast(env_value) if type_cast else env_value
    return default


def _as_bool(value) -> bool:
    return str(value).lower() in ("true", "1", "yes")


def parse_int_list(value) -> Tuple[int, ...]:
    """"1,2,3" (or a list) to a tuple of ints."""
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).replace(" ", "").split(",") if v)


def parse_theta_grid(value) -> Optional[Tuple[float, ...]]:
    """θ grid from "default", "start:stop:step" (inclusive stop) or "a,b,c".

    Raises UsageError for a grid that would be empty or holds a negative θ.
    """
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        grid = tuple(float(v) for v in value)
    else:
        text = str(value).strip()
        if text in ("", "default"):
            return None
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise UsageError(f"theta grid {text!r}: step must be > 0")
            if stop < start:
                raise UsageError(f"theta grid {text!r}: stop must be >= start")
            count = int(round((stop - start) / step)) + 1
            grid = tuple(start + i * step for i in range(count))
        else:
            grid = tuple(float(v) for v in text.split(","))
    if not grid:
        raise UsageError("theta grid is empty")
    if min(grid) < 0:
        raise UsageError(f"theta grid values must be >= 0, got {min(grid)}")
    return grid


_REGISTRY: Dict[str, Tuple[Any, Optional[Callable]]] = {}


def setting(key: str, default, type_cast=None):
    """Register a setting and resolve it from the environment.

    A malformed environment value falls back to the default here; ``resolve``
    reports it as a usage error.
    """
    _REGISTRY[key] = (default, type_cast)
    try:
        return get_config(key, default=default, type_cast=type_cast)
    except (TypeError, ValueError, UsageError):
        return default


# Master seed for every random stream
# Environment variable: EDGE_DEID_SEED
# CLI argument: --seed
SEED = setting("seed", 0, int)

# Directory that receives manifests, images and tables
# Environment variable: EDGE_DEID_OUTPUT_DIR
# CLI argument: --output / -o
OUTPUT_DIR = setting("output_dir", "./edge-deid-out")

# Generator backend: "oracle" (procedural scenes) or "trained" (toy flow checkpoint)
# Environment variable: EDGE_DEID_BACKEND
# CLI argument: --backend
BACKEND = setting("backend", "oracle")

# Flow checkpoint used by the trained backend (written by `train-flow`)
# Environment variable: EDGE_DEID_MODEL
# CLI argument: --model
MODEL = setting("model", None)

# Guidance scales of the source and target branches
# Environment variables: EDGE_DEID_GAMMA_SRC, EDGE_DEID_GAMMA_TGT
# CLI arguments: --gamma-src, --gamma-tgt
GAMMA_SRC = setting("gamma_src", 1.5, float)
GAMMA_TGT = setting("gamma_tgt", 2.0, float)

# Displacement-ODE steps and starting noise level
# Environment variables: EDGE_DEID_EDIT_STEPS, EDGE_DEID_S_MAX
# CLI arguments: --steps, --s-max
EDIT_STEPS = setting("edit_steps", 50, int)
S_MAX = setting("s_max", 0.9, float)

# Euler steps for sampling twins from the trained model
# Environment variable: EDGE_DEID_SAMPLE_STEPS
# CLI argument: --sample-steps
SAMPLE_STEPS = setting("sample_steps", 50, int)

# Twin synthesis mode: "seed_resample" or "edit_heal"
# Environment variable: EDGE_DEID_TWIN_MODE
# CLI argument: --twin-mode
TWIN_MODE = setting("twin_mode", "seed_resample")

# Scene geometry
# Environment variables: EDGE_DEID_IMAGE_SIZE, EDGE_DEID_IDENTITY_COUNT
# CLI arguments: --image-size, --identity-count
IMAGE_SIZE = setting("image_size", 32, int)
IDENTITY_COUNT = setting("identity_count", 4, int)

# Patient identity and the surrogate that replaces it
# Environment variables: EDGE_DEID_SOURCE_IDENTITY, EDGE_DEID_SURROGATE_IDENTITY
# CLI arguments: --src-identity, --tgt-identity
SOURCE_IDENTITY = setting("source_identity", 0, int)
SURROGATE_IDENTITY = setting("surrogate_identity", 1, int)

# Surrogate identities visited by `sweep`
# Environment variable: EDGE_DEID_SURROGATES (comma separated)
# CLI argument: --surrogates
SURROGATES = setting("surrogates", (1, 2, 3), parse_int_list)

# θ* per image ("per_image") or shared across a sweep ("cohort")
# Environment variable: EDGE_DEID_CALIBRATION
# CLI argument: --calibration
CALIBRATION = setting("calibration", "per_image")

# θ grid: "default" (0.5 .. 254.5), "start:stop:step" or "a,b,c"
# Environment variable: EDGE_DEID_THETA_GRID
# CLI argument: --theta-grid
THETA_GRID = setting("theta_grid", None, parse_theta_grid)

# Histogram region: "full" frame or "pathology" (reference mask only)
# Environment variable: EDGE_DEID_HISTOGRAM_REGION
# CLI argument: --histogram-region
HISTOGRAM_REGION = setting("histogram_region", "full")

# Difference metric: "a_star" or "delta_e"
# Environment variable: EDGE_DEID_DIFF_METRIC
# CLI argument: --diff-metric
DIFF_METRIC = setting("diff_metric", "a_star")

# Optional morphological opening radius applied to masks (0 = off)
# Environment variable: EDGE_DEID_CLEANUP_RADIUS
# CLI argument: --cleanup-radius
CLEANUP_RADIUS = setting("cleanup_radius", 0, int)

# Federation sizes
# Environment variables: EDGE_DEID_CLIENTS, EDGE_DEID_ROUNDS, EDGE_DEID_LOCAL_EPOCHS,
#   EDGE_DEID_FED_LR, EDGE_DEID_CASES_PER_CLIENT
# CLI arguments (fedsim): --clients, --rounds, --epochs, --lr, --cases-per-client
CLIENTS = setting("clients", 4, int)
ROUNDS = setting("rounds", 5, int)
LOCAL_EPOCHS = setting("local_epochs", 50, int)
# Unset: each client uses its own stable step size
FED_LR = setting("fed_lr", None, float)
CASES_PER_CLIENT = setting("cases_per_client", 2, int)

# Thread pool size for sweeps and federation clients
# Environment variable: EDGE_DEID_WORKERS
# CLI argument: --workers
WORKERS = setting("workers", 1, int)

# Toy flow training
# Environment variables: EDGE_DEID_TRAIN_EPOCHS, EDGE_DEID_TRAIN_BATCHES, EDGE_DEID_BATCH_SIZE,
#   EDGE_DEID_HIDDEN, EDGE_DEID_TRAIN_LR, EDGE_DEID_SHARDS
# CLI arguments (train-flow): --epochs, --batches, --batch-size, --hidden, --lr, --shards
TRAIN_EPOCHS = setting("train_epochs", 20, int)
TRAIN_BATCHES = setting("train_batches", 100, int)
BATCH_SIZE = setting("batch_size", 64, int)
HIDDEN = setting("hidden", 256, int)
TRAIN_LR = setting("train_lr", 1e-3, float)
SHARDS = setting("shards", 1, int)

# Debug logging and progress bars
# Environment variable: EDGE_DEID_VERBOSE (accepts: true/1/yes)
# CLI argument: --verbose / -v
VERBOSE = setting("verbose", False, _as_bool)


def builtin_defaults() -> Dict[str, Any]:
    return {key: default for key, (default, _) in _REGISTRY.items()}


def env_defaults() -> Dict[str, Any]:
    """Built-in defaults overridden by the environment as it is now."""
    values = {}
    for key, (default, cast) in _REGISTRY.items():
        try:
            values[key] = get_config(key, default, cast)
        except (TypeError, ValueError, UsageError) as exc:
            raise UsageError(f"EDGE_DEID_{key.upper()}: {exc}") from exc
    return values


def _cast(key: str, value):
    default, cast = _REGISTRY[key]
    if value is None:
        return None
    if cast is not None:
        return cast(value)
    return value if isinstance(value, str) else str(value)


# Config-file spellings that differ from the setting names
KEY_ALIASES = {
    "src_identity": "source_identity",
    "tgt_identity": "surrogate_identity",
    "steps": "edit_steps",
    "output": "output_dir",
}


def load_config_file(path) -> Dict[str, Any]:
    """Read a JSON object or `key = value` file into typed settings.

    Keys may use dashes or underscores. Unknown keys raise UsageError.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")

    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: invalid JSON ({exc})") from exc
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config file {path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip().strip('"').strip("'")

    values = {}
    for key, value in raw.items():
        name = key.replace("-", "_")
        name = KEY_ALIASES.get(name, name)
        if name not in _REGISTRY:
            raise UsageError(f"config file {path}: unknown key '{key}'")
        try:
            values[name] = _cast(name, value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config file {path}: bad value for '{key}': {value!r}") from exc
    return values


@dataclass
class RunConfig:
    """Effective settings of one CLI invocation."""

    command: str
    seed: int = 0
    output_dir: str = "./edge-deid-out"
    backend: str = "oracle"
    model: Optional[str] = None
    gamma_src: float = 1.5
    gamma_tgt: float = 2.0
    edit_steps: int = 50
    s_max: float = 0.9
    sample_steps: int = 50
    twin_mode: str = "seed_resample"
    image_size: int = 32
    identity_count: int = 4
    source_identity: int = 0
    surrogate_identity: int = 1
    surrogates: Tuple[int, ...] = (1, 2, 3)
    calibration: str = "per_image"
    theta_grid: Optional[Tuple[float, ...]] = None
    histogram_region: str = "full"
    diff_metric: str = "a_star"
    cleanup_radius: int = 0
    clients: int = 4
    rounds: int = 5
    local_epochs: int = 50
    fed_lr: Optional[float] = None
    cases_per_client: int = 2
    workers: int = 1
    train_epochs: int = 20
    train_batches: int = 100
    batch_size: int = 64
    hidden: int = 256
    train_lr: float = 1e-3
    shards: int = 1
    verbose: bool = False
    config_file: Optional[str] = None
    inputs: List[str] = field(default_factory=list)
    original: Optional[str] = None
    reference: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["surrogates"] = list(self.surrogates)
        data["theta_grid"] = list(self.theta_grid) if self.theta_grid is not None else "default"
        return data

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


# (setting, flag, check, requirement) bounds checked after merging all sources
_BOUNDS = (
    ("gamma_src", "--gamma-src", lambda v: v >= 0, ">= 0"),
    ("gamma_tgt", "--gamma-tgt", lambda v: v >= 0, ">= 0"),
    ("edit_steps", "--steps", lambda v: v >= 1, ">= 1"),
    ("s_max", "--s-max", lambda v: 0 < v <= 1, "in (0, 1]"),
    ("sample_steps", "--sample-steps", lambda v: v >= 1, ">= 1"),
    ("image_size", "--image-size", lambda v: v >= 4, ">= 4"),
    ("identity_count", "--identity-count", lambda v: v >= 1, ">= 1"),
    ("source_identity", "--src-identity", lambda v: v >= 0, ">= 0"),
    ("surrogate_identity", "--tgt-identity", lambda v: v >= 0, ">= 0"),
    ("cleanup_radius", "--cleanup-radius", lambda v: v >= 0, ">= 0"),
    ("clients", "--clients", lambda v: v >= 1, ">= 1"),
    ("rounds", "--rounds", lambda v: v >= 1, ">= 1"),
    ("local_epochs", "--epochs", lambda v: v >= 0, ">= 0"),
    ("fed_lr", "--lr", lambda v: v is None or v > 0, "> 0"),
    ("cases_per_client", "--cases-per-client", lambda v: v >= 1, ">= 1"),
    ("workers", "--workers", lambda v: v >= 1, ">= 1"),
    ("train_epochs", "--epochs", lambda v: v >= 1, ">= 1"),
    ("train_batches", "--batches", lambda v: v >= 1, ">= 1"),
    ("batch_size", "--batch-size", lambda v: v >= 1, ">= 1"),
    ("hidden", "--hidden", lambda v: v >= 1, ">= 1"),
    ("train_lr", "--lr", lambda v: v > 0, "> 0"),
    ("shards", "--shards", lambda v: v >= 1, ">= 1"),
)

_CHOICES = {
    "backend": ("--backend", ("oracle", "trained")),
    "twin_mode": ("--twin-mode", ("seed_resample", "edit_heal")),
    "calibration": ("--calibration", ("per_image", "cohort")),
    "histogram_region": ("--histogram-region", ("full", "pathology")),
    "diff_metric": ("--diff-metric", ("a_star", "delta_e")),
}


def validate(config: RunConfig) -> RunConfig:
    """Raise UsageError naming the offending flag for any out-of-range setting."""
    for name, flag, check, requirement in _BOUNDS:
        if not check(getattr(config, name)):
            raise UsageError(f"{flag} must be {requirement}, got {getattr(config, name)}")
    for name, (flag, allowed) in _CHOICES.items():
        if getattr(config, name) not in allowed:
            raise UsageError(f"{flag} must be one of {', '.join(allowed)}")
    for flag, identity in (
        ("--src-identity", config.source_identity),
        ("--tgt-identity", config.surrogate_identity),
    ):
        if identity >= config.identity_count:
            raise UsageError(f"{flag} must be < --identity-count ({config.identity_count})")
    if config.backend == "trained" and config.command != "train-flow" and not config.model:
        raise UsageError("--backend trained requires --model PATH")
    return config


def resolve(command: str, flags: Dict[str, Any], config_file: Optional[str] = None) -> RunConfig:
    """Merge environment, config file and explicit flags into a validated RunConfig."""
    values = env_defaults()
    if config_file:
        values.update(load_config_file(config_file))
    values.update({k: v for k, v in flags.items() if v is not None})
    known = set(RunConfig.field_names())
    config = RunConfig(
        command=command,
        config_file=config_file,
        **{k: v for k, v in values.items() if k in known and k not in ("command", "config_file")},
    )
    return validate(config)
