import numpy as np
import pytest

from lightsae import numcore as nc


def gradcheck(build_loss, params, h=1e-5):
    """Largest relative error between tape gradients and central differences.

    ``build_loss`` returns a 1x1 Matrix from the current parameter values.
    """
    for p in params:
        p.zero_grad()
    with nc.Tape() as tape:
        loss = build_loss()
    nc.backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        with nc.no_record():
            numeric = nc.finite_difference(lambda: build_loss().item(), p, h)
        worst = max(worst, nc.rel_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
