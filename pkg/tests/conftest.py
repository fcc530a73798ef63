"""Shared fixtures: the synthetic North-Sea-like storm-peak environment.

Storm-peak hs follows a bounded-tail (scaled Beta) law with a 100-year level
near 13 m; ln tp given hs is normal with a power-law median and a variance
shrinking with hs, giving the strong hs-tp tail dependence typical of
northern North Sea storm peaks.  Storm sizes are 1 + Poisson(8) sea states.
"""

import numpy as np
import pytest

import envcontours as ec

STORM_RATE = 25.0  # storms per year


def make_peaks(seed: int, n: int = 2400):
    """Synthetic storm-peak sample (hs, tp, sizes) for case-study tests."""
    rng = np.random.default_rng(seed)
    hs = 0.5 + 14.0 * rng.beta(1.15, 3.2, n)
    mu_ln = np.log(4.5 * np.maximum(hs, 0.1) ** 0.5)
    sd = np.sqrt(0.003 + 0.05 * np.exp(-0.35 * hs))
    tp = np.exp(mu_ln + sd * rng.standard_normal(n))
    sizes = 1 + rng.poisson(8.0, n)
    return hs, tp, sizes


@pytest.fixture(scope="session")
def north_sea_model():
    """Fitted joint environment model on the canonical synthetic sample."""
    hs, tp, sizes = make_peaks(21)
    return ec.JointEnvModel.fit(
        hs, tp, rate=STORM_RATE, storm_sizes=sizes, seed=0
    )


@pytest.fixture(scope="session")
def north_sea_sample(north_sea_model):
    """Large simulated event sample under the fitted model."""
    rng = np.random.default_rng(121)
    h, t, _ = north_sea_model.sample_events(400_000, rng)
    return np.column_stack([h, t])


@pytest.fixture(scope="session")
def gaussian_sample():
    rng = np.random.default_rng(42)
    return rng.standard_normal((200_000, 2))
