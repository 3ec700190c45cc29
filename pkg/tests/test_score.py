"""
Test the score estimate and the Langevin proposal for tau2.
"""

import math

import numpy as np
from pytest import approx, raises

from fmsv import (
    ScoreAccumulator,
    StepSizeAdapter,
    SvParams,
    SvSeriesModel,
    ancestral_trace,
    bootstrap_pf,
    estimate_score,
    langevin_proposal_tau2,
    score_from_system,
)
from fmsv._model import tau2_logprior
from fmsv._score import tau2_logprior_grad
from fmsv.testutils import (
    LinearGaussianModel,
    kalman_score,
    simulate_linear_gaussian,
)

from common import run_tests


def sv_data(prm, T, seed):
    rng = np.random.default_rng(seed)
    h = np.empty(T)
    h[0] = prm.mu + math.sqrt(prm.tau2 / (1 - prm.phi**2)) * rng.standard_normal()
    for t in range(1, T):
        h[t] = prm.mu + prm.phi * (h[t - 1] - prm.mu) + prm.tau * rng.standard_normal()
    return np.exp(0.5 * h) * rng.standard_normal(T)


def lineage_score(model, obs, sys):
    """The no-shrinkage score, summing gradients along each lineage."""
    total = 0.0
    for j in range(sys.N):
        path = ancestral_trace(sys, j)
        g = model.grad_measurement(0, obs[0], path[:1], None)[0]
        g += model.grad_initial(path[:1])[0]
        for t in range(1, sys.T):
            h, h_prev = path[t : t + 1], path[t - 1 : t]
            g += model.grad_measurement(t, obs[t], h, h_prev)[0]
            g += model.grad_transition(h, h_prev, t)[0]
        total += sys.normweights[j, -1] * g
    return total


def test_score_accumulator():
    acc = ScoreAccumulator(0.5)
    assert acc.S == 0.0
    assert acc.update([1.0, 3.0], np.array([0.5, 0.5])) == 2.0
    # m = 0.5 * m[a] + 0.5 * S + grad
    S = acc.update([0.0, 0.0], np.array([0.25, 0.75]), np.array([1, 0]))
    assert acc.m.tolist() == [2.5, 1.5]
    assert S == approx(0.25 * 2.5 + 0.75 * 1.5)

    with raises(ValueError):
        ScoreAccumulator(0.0)
    with raises(ValueError):
        ScoreAccumulator(1.5)
    acc = ScoreAccumulator(1.0)
    with raises(FloatingPointError):
        acc.update([np.inf, 0.0], np.array([0.5, 0.5]))


def test_score_single_period():
    prm = SvParams(-0.5, 0.9, 0.1, -0.3)
    model = SvSeriesModel(prm)
    score, logZ = estimate_score(model, [0.4], 100, 0.95, np.random.default_rng(1))
    sys = bootstrap_pf(model, [0.4], 100, np.random.default_rng(1))
    h = sys.particles[:, 0]
    grad = -0.5 + (1 - prm.phi**2) * (h - prm.mu) ** 2 / (2 * prm.tau2)
    assert score == approx(sys.normweights[:, 0] @ grad)
    assert logZ == sys.logZ


def test_score_no_shrinkage_is_lineage_sum():
    for model in (
        LinearGaussianModel(a=0.7, q=0.4),
        SvSeriesModel(SvParams(0.0, 0.95, 0.05, -0.5), mean=np.zeros(25)),
    ):
        rng = np.random.default_rng(2)
        obs = rng.standard_normal(25)
        sys = bootstrap_pf(model, obs, 30, rng)
        assert score_from_system(model, obs, sys, 1.0) == approx(
            lineage_score(model, obs, sys), rel=1e-10
        )


def test_score_matches_kalman():
    truth = LinearGaussianModel(a=0.5, q=1.0, r=0.5)
    _, obs = simulate_linear_gaussian(truth, 100, np.random.default_rng(3))
    model = truth.with_q(0.3)
    exact = kalman_score(model, obs)
    assert exact > 5

    rng = np.random.default_rng(4)
    for lam in (0.95, 1.0):
        est = [estimate_score(model, obs, 5000, lam, rng)[0] for _ in range(10)]
        assert np.mean(est) == approx(exact, rel=0.05)


def test_score_shrinkage_reduces_variance():
    prm = SvParams(0.0, 0.95, 0.05)
    model = SvSeriesModel(prm)
    obs = sv_data(prm, 300, 5)
    rng = np.random.default_rng(6)
    systems = [bootstrap_pf(model, obs, 200, rng) for _ in range(50)]
    shrunk = [score_from_system(model, obs, sys, 0.95) for sys in systems]
    plain = [score_from_system(model, obs, sys, 1.0) for sys in systems]
    assert np.var(shrunk) < np.var(plain)


def test_estimate_score_fails():
    model = LinearGaussianModel()
    rng = np.random.default_rng(0)
    with raises(ValueError):
        estimate_score(model, [0.1, 0.2], 10, 0.0, rng)
    with raises(ValueError):
        estimate_score(model, [0.1, 0.2], 10, 1.01, rng)


# %% Langevin


def test_tau2_logprior_grad():
    for tau2 in (0.01, 0.05, 1.0, 7.0):
        theta, d = math.log(tau2), 1e-6
        up = tau2_logprior(math.exp(theta + d)) + theta + d
        down = tau2_logprior(math.exp(theta - d)) + theta - d
        assert tau2_logprior_grad(tau2) == approx((up - down) / (2 * d), abs=1e-7)


def test_langevin_hand_step():
    rng = np.random.default_rng(0)
    prop = langevin_proposal_tau2(math.exp(-3.0), 2.0, 0.1, rng, momentum=0.5)
    assert prop.log_tau2 == approx(-3.0)
    assert prop.log_tau2_new == approx(-2.94)
    assert prop.tau2 == approx(math.exp(-2.94))


def test_langevin_zero_drift_and_momentum():
    rng = np.random.default_rng(0)
    prop = langevin_proposal_tau2(0.05, 0.0, 0.3, rng, momentum=0.0)
    assert prop.tau2 == approx(0.05)
    assert prop.log_forward == approx(prop.log_reverse(0.0))


def test_langevin_proposal_densities():
    rng = np.random.default_rng(7)
    prop = langevin_proposal_tau2(0.05, 1.5, 0.2, rng)
    r = (prop.log_tau2_new - prop.log_tau2 - 0.5 * 0.04 * 1.5) / 0.2
    expected = -0.5 * math.log(2 * math.pi) - math.log(0.2) - 0.5 * r**2
    assert prop.log_forward == approx(expected)
    back = (prop.log_tau2 - prop.log_tau2_new - 0.5 * 0.04 * -1.0) / 0.2
    expected = -0.5 * math.log(2 * math.pi) - math.log(0.2) - 0.5 * back**2
    assert prop.log_reverse(-1.0) == approx(expected)


def test_langevin_small_step():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        prop = langevin_proposal_tau2(0.05, 3.0, 1e-8, rng)
        assert abs(prop.tau2 - 0.05) < 1e-6


def test_langevin_fails():
    rng = np.random.default_rng(0)
    with raises(ValueError):
        langevin_proposal_tau2(0.0, 1.0, 0.1, rng)
    with raises(ValueError):
        langevin_proposal_tau2(-1.0, 1.0, 0.1, rng)
    with raises(ValueError):
        langevin_proposal_tau2(0.05, 1.0, 0.0, rng)
    with raises(ValueError):
        langevin_proposal_tau2(0.05, np.nan, 0.1, rng)


def test_step_size_adapter():
    adapter = StepSizeAdapter(0.1, 0.5)
    assert adapter.eps == approx(0.1)
    adapter.update(1.0)
    assert adapter.eps > 0.1
    eps = adapter.eps
    adapter.update(0.0)
    assert adapter.eps < eps

    # Always rejecting drives the step down, but not below the floor
    for _ in range(10_000):
        adapter.update(0.0)
    assert adapter.eps >= math.exp(-12.0)

    adapter.freeze()
    eps = adapter.eps
    adapter.update(1.0)
    assert adapter.eps == eps


def test_step_size_adapter_converges():
    # Acceptance falls off with the step size; the adapter finds the target
    adapter = StepSizeAdapter(1.0, 0.5)
    rng = np.random.default_rng(9)
    for _ in range(20_000):
        accept = math.exp(-adapter.eps) > rng.random()
        adapter.update(float(accept))
    assert adapter.eps == approx(math.log(2), rel=0.15)


if __name__ == "__main__":
    run_tests(globals())
