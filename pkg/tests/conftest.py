import numpy as np
import pytest

from rsmerton.core_model import MarketSpec, RegimeGenerator

BENCH_GENERATOR = [[-6.04, 6.04], [10.9, -10.9]]


def make_spec(
    gamma=-1.0,
    rho=(0.9, 0.3),
    r=0.05,
    mu=0.15,
    sigma=0.25,
    horizon=1.0,
    generator=None,
    states=2,
):
    """Two-regime (or wider) spec with scalar-broadcast coefficients."""
    gen = RegimeGenerator(BENCH_GENERATOR if generator is None else generator)
    states = gen.n_states
    as_vec = lambda v: list(np.broadcast_to(np.asarray(v, dtype=float), (states,)))
    return MarketSpec(
        states=states,
        r=as_vec(r),
        alpha=as_vec(np.asarray(mu) + np.asarray(r)),
        sigma=as_vec(sigma),
        generator=gen,
        rho=as_vec(rho),
        gamma=gamma,
        horizon=horizon,
    )


@pytest.fixture
def bench_spec():
    """The bundled two-regime benchmark at gamma = -1."""
    return make_spec()


@pytest.fixture
def const_rho_spec():
    """Same market with a common discount rate (subgame and optimal coincide)."""
    return make_spec(rho=(0.9, 0.9))
