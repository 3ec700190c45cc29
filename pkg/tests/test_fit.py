"""
Test fit(), the entry point that runs a chain and its diagnostics.
"""

import math

import numpy as np
from pytest import raises

from fmsv import ModelDims, PriorSettings, SamplerConfig, fit, simulate
from fmsv._samplers import parameter_names, theta_vector

from common import make_theta, run_tests


def test_fit():
    B = np.array([[-1.0, 0], [0.5, 1.0], [0.2, -0.8], [0, 1]])
    theta = make_theta(p=4, k=2, B=B)
    y, _ = simulate(ModelDims(4, 2, 40), theta, 3)
    truth = dict(zip(parameter_names(4, 2), theta_vector(theta)))
    config = SamplerConfig(N=12, iters=15, burnin=3, thin=4, log_every=5, seed=1)
    out = fit(y, config, k=2, truth=truth)

    draws = out.draws
    assert draws.size == 12
    for i in range(draws.size):
        B = draws.loadings(i)
        assert B[0, 0] >= 0 and B[1, 1] >= 0
    assert len(out.summary) == len(draws.names)
    assert out.summary[0].truth == truth["mu_1"]
    assert math.isfinite(out.dic)
    assert out.stats.runtime_seconds == out.runtime / config.iters
    assert set(out.stats.acceptance) >= {"mu", "phi", "rho", "tau2", "interweave"}
    assert out.latent_mean["f"].shape == (2, 40)
    assert out.state.sweep == 15


def test_fit_normal_gamma():
    y, _ = simulate(ModelDims(3, 1, 30), make_theta(), 4)
    config = SamplerConfig(
        scheme="pg", N=8, iters=6, burnin=1, log_every=0, prior=PriorSettings(kind="ng")
    )
    out = fit(y, config)
    assert out.draws.names == parameter_names(3, 1, "ng")
    assert np.all(out.draws.column("lambda2_1") > 0)


def test_fit_fails():
    y = np.zeros((3, 20))
    with raises(TypeError):
        fit(y, {"N": 10})
    with raises(ValueError):
        fit(np.zeros(20), SamplerConfig(N=4, iters=2, burnin=0))
    with raises(ValueError):
        fit(y, SamplerConfig(N=4, iters=2, burnin=0), k=4)


if __name__ == "__main__":
    run_tests(globals())
