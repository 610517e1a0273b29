"""
edge-deid - Edge-side de-identification with counterfactual twin masks

Identity-replacing edits of clinical photographs that keep the pathology,
plus pathology masks read off the colour difference between a pathological
and a healthy rendering of the same synthetic patient.

Features:
- Flow-model edit that swaps the patient identity for a surrogate
- Counterfactual twins and a*-channel difference maps
- Threshold calibration against a reference mask, mask stability sweeps
- a* histogram comparison (Bhattacharyya, KS)
- Federated training simulation with an audited wire format

Usage:
    # Command-line
    $ edge-deid pipeline --backend oracle --seed 3

    # Python API
    from edge_deid import OracleBackend, PipelineConfig, run_pipeline

    result = run_pipeline(PipelineConfig(), OracleBackend(), case_seed=3)
    print(result.calibration.theta_star)
"""

__version__ = "0.2.0"
__license__ = "MIT"

# Export main API
from .backends import FlowBackend, OracleBackend
from .errors import EdgeDeidError, StageError
from .fedsim import run_federation
from .flowedit import GuidanceParams, de_identify, flow_edit
from .toyflow import Condition, Health, LatentCode, SceneSpec, load_model, save_model, train_flow
from .twinsynth import PipelineConfig, identity_sweep, run_pipeline

__all__ = [
    "Condition",
    "EdgeDeidError",
    "FlowBackend",
    "GuidanceParams",
    "Health",
    "LatentCode",
    "OracleBackend",
    "PipelineConfig",
    "SceneSpec",
    "StageError",
    "de_identify",
    "flow_edit",
    "identity_sweep",
    "load_model",
    "run_federation",
    "run_pipeline",
    "save_model",
    "train_flow",
    "__version__",
]
