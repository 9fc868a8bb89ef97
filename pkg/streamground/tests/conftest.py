"""Shared fixtures: tiny configurations and corpora that keep the suite fast."""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from streamground.config import RunConfig


def tiny_config(*overrides: str) -> RunConfig:
    """A configuration small enough to train and stream in well under a second."""
    base = RunConfig().with_overrides(
        [
            "data.train_streams=3",
            "data.test_streams=2",
            "data.stream_length=64",
            "data.feature_dim=8",
            "data.event_types=2",
            "data.duration_min=2",
            "data.duration_max=8",
            "data.gap_min=2",
            "data.gap_max=6",
            "data.ordinal_gap_min=4",
            "data.ordinal_fraction=0.3",
            "model.dim=8",
            "model.hidden=16",
            "model.window=8",
            "model.scales=4",
            "model.memory_size=8",
            "train.epochs=1",
            "train.checkpoint_every=0",
            "engine.top_n=3",
            "eval.sweep_epochs=1",
        ]
    )
    if overrides:
        base = base.with_overrides(overrides)
    return base


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def workdir():
    path = Path(tempfile.mkdtemp())
    yield path
    shutil.rmtree(path, ignore_errors=True)
