"""Shared fixtures for the test suite; helpers live in support.py."""

from __future__ import annotations

import numpy as np
import pytest

from epiwarp.dwi import generate_phantom, random_phantom_spec
from epiwarp.forward import EpiParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def epi_default():
    # n_pe * pf / r = 48 > 1, esp 0.5 ms
    return EpiParams(s_pe=1, n_pe=128, pf=0.75, r_accel=2.0, esp_s=5e-4)


@pytest.fixture(scope="session")
def phantom_64():
    """A small deterministic phantom slice, shared read-only."""
    spec = random_phantom_spec(seed=7, size=64, noise_sigma=0.02)
    return generate_phantom(spec)
