"""Shared fixtures: the bundled two-stage plant and clean excitation data."""

import numpy as np
import pytest

from forwardctl.sysdata import cascade_batches, fixture_cascade, simulate_cascade


@pytest.fixture(scope="session")
def casc2():
    return fixture_cascade(2)


@pytest.fixture(scope="session")
def clean_batches(casc2):
    """Noise-free length-8 batches for the two-stage fixture, seed 2."""
    rng = np.random.default_rng(2)
    u1 = rng.standard_normal((casc2.control_dim, 8))
    x0s = [rng.standard_normal(n) for n in casc2.dims]
    xs, _, _ = simulate_cascade(casc2, x0s, u1)
    return cascade_batches(xs, u1, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
