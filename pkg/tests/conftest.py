"""Pytest configuration and fixtures."""

import os

import pytest

from edge_deid.backends import OracleBackend
from edge_deid.toyflow import FlowHyperParams, SceneSpec, train_flow
from edge_deid.twinsynth import PipelineConfig

# Trained-model fixture: small enough for CPU test runs
TRAINED_SPEC = SceneSpec(image_size=16)
TRAINED_HP = FlowHyperParams(hidden=128, epochs=20, batches_per_epoch=100, batch_size=64)


@pytest.fixture
def clean_env():
    """Clean EDGE_DEID_* environment variables before test."""
    original_env = os.environ.copy()
    for key in list(os.environ.keys()):
        if key.startswith("EDGE_DEID_"):
            del os.environ[key]

    yield

    os.environ.clear()
    os.environ.update(original_env)


# =============================================================================
# SCENE FIXTURES
# =============================================================================


@pytest.fixture
def spec():
    """Default 32x32 scene with four identities."""
    return SceneSpec()


@pytest.fixture
def small_spec():
    """8x8 scene for fast numeric tests."""
    return SceneSpec(image_size=8)


@pytest.fixture
def oracle(spec):
    """Oracle generator backend for the default scene."""
    return OracleBackend(spec)


@pytest.fixture
def pipeline_config(spec):
    """Pipeline settings with every default."""
    return PipelineConfig(spec=spec)


# =============================================================================
# TRAINED MODEL FIXTURES
# =============================================================================


@pytest.fixture(scope="session")
def trained_flow():
    """Flow model trained once per session on 16x16 oracle scenes."""
    return train_flow(TRAINED_SPEC, TRAINED_HP, seed=0)


@pytest.fixture(scope="session")
def trained_model(trained_flow):
    return trained_flow.model
