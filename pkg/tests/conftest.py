"""
Shared fixtures for the test suite.
"""

from __future__ import annotations

import numpy as np
import pytest

from vclab.autodiff import precision
from vclab.features import synth_toy_corpus
from vclab.objectives import Formulation
from vclab.trainer import TrainConfig, default_config


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------

@pytest.fixture(autouse=True)
def f64():
    """Every test runs at 64-bit unless it switches precision itself."""
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

@pytest.fixture
def toy_corpus():
    """K=3, Q=8, six training and two parallel test utterances per domain, 40 frames each."""
    return synth_toy_corpus(n_domains=3, n_dims=8, utts_per_domain=6, n_frames=40, seed=0, test_utts=2)


@pytest.fixture
def small_corpus():
    """K=2, Q=4 corpus for fast network round trips."""
    return synth_toy_corpus(n_domains=2, n_dims=4, utts_per_domain=3, n_frames=24, seed=1, test_utts=1)


# ---------------------------------------------------------------------------
# Training configs
# ---------------------------------------------------------------------------

def tiny_config(formulation: Formulation | str, **overrides) -> TrainConfig:
    """Tiny nets, short crops, no dropout, quiet logging."""
    base = dict(
        iterations=2,
        batch_size=4,
        segment_frames=16,
        dropout=0.0,
        log_interval=0,
        checkpoint_interval=0,
    )
    if Formulation(formulation) is Formulation.CYCLEGAN:
        base.update(source_domain=0, target_domain=1)
    base.update(overrides)
    return default_config(formulation, "tiny", **base)


@pytest.fixture
def make_config():
    return tiny_config
