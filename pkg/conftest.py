"""Shared fixtures for the test suite."""

import numpy as np
import pytest
import torch

from src.config import Settings
from src.data import moving_square_sequence


@pytest.fixture(autouse=True)
def isolated_output(tmp_path, monkeypatch):
    """Point OUTPUT_DIR at a per-test directory."""
    monkeypatch.setenv('OUTPUT_DIR', str(tmp_path / 'output'))
    monkeypatch.delenv('LOG_LEVEL', raising=False)
    return tmp_path / 'output'


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_settings():
    """Toy preset shrunk further so full forward passes run in milliseconds."""
    return Settings({
        'preset': 'toy',
        'model.frame_blocks': 1,
        'model.event_blocks': 1,
        'livt.mlp_hidden': [16, 16],
    })


@pytest.fixture
def square_frames():
    """Nine 32x32 frames of a translating square."""
    return moving_square_sequence(num_frames=9, height=32, width=32, square=8, step=2)


@pytest.fixture(autouse=True)
def seeded_torch():
    torch.manual_seed(0)
