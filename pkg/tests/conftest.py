import numpy as np
import pytest

from svmix.core import MarketState, MaturityGrid, Model, ModelParams, PiecewiseCurve


def random_grid(rng, max_intervals=5, lo=0.05, hi=0.5) -> MaturityGrid:
    n = int(rng.integers(1, max_intervals + 1))
    return MaturityGrid(tuple(np.concatenate([[0.0], np.cumsum(rng.uniform(lo, hi, n))])))


def random_curve(rng, grid, lo, hi, name=None) -> PiecewiseCurve:
    return PiecewiseCurve(grid, rng.uniform(lo, hi, grid.n_intervals), name)


def random_params(rng, model=Model.HESTON, max_intervals=4, rho=True) -> ModelParams:
    g = random_grid(rng, max_intervals, 0.05, 0.3)
    n = g.n_intervals
    r = rng.uniform(-0.8, 0.3, n) if (rho and model is Model.HESTON) else np.zeros(n)
    return ModelParams.from_values(model, g, rng.uniform(1.0, 8.0, n), rng.uniform(0.005, 0.03, n),
                                   rng.uniform(0.1, 0.8, n), r, float(rng.uniform(0.002, 0.02)))


def flat_market(grid, spot=100.0, rd=0.02, rf=0.0) -> MarketState:
    return MarketState(spot, PiecewiseCurve.constant(grid, rd), PiecewiseCurve.constant(grid, rf))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
