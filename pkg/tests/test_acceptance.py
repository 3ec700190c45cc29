"""
Acceptance runs: estimator oracles at large sample sizes, parameter
recovery, sampler efficiency and factor-count selection on simulated
data. Everything but the likelihood oracle needs FMSV_LONG_TESTS=1.
"""

import math

import numpy as np
from scipy import integrate
from pytest import approx

from fmsv import (
    ModelDims,
    SamplerConfig,
    SvParams,
    SvSeriesModel,
    bootstrap_pf,
    estimate_score,
    fit,
    simulate,
    update_factors_gibbs,
    update_loadings_gibbs,
)
from fmsv._model import volatility_innovations
from fmsv._samplers import gig_rvs, loading_posterior, parameter_names, theta_vector
from fmsv.testutils import LinearGaussianModel, kalman_loglik, simulate_linear_gaussian

from common import SIM_LOADINGS, make_theta, run_tests, skip_unless_long


def test_likelihood_oracle():
    model = LinearGaussianModel(a=0.9, q=0.5, r=1.0)
    _, obs = simulate_linear_gaussian(model, 100, np.random.default_rng(0))
    exact = kalman_loglik(model, obs)
    logz = [
        bootstrap_pf(model, obs, 1000, np.random.default_rng(seed)).logZ
        for seed in range(100)
    ]
    ratios = np.exp(np.array(logz) - exact)
    se = ratios.std(ddof=1) / math.sqrt(len(ratios))
    assert abs(ratios.mean() - 1) < 3 * se


def sv_returns(prm, T, seed):
    rng = np.random.default_rng(seed)
    h = np.empty(T)
    h[0] = prm.mu + math.sqrt(prm.tau2 / (1 - prm.phi**2)) * rng.standard_normal()
    for t in range(1, T):
        h[t] = prm.mu + prm.phi * (h[t - 1] - prm.mu) + prm.tau * rng.standard_normal()
    return np.exp(0.5 * h) * rng.standard_normal(T)


def test_score_oracle():
    skip_unless_long()
    # Data from a larger tau2 than the evaluation point, so the score is
    # well away from zero
    prm = SvParams(0.0, 0.95, 0.05)
    obs = sv_returns(prm.replace(tau2=0.2), 200, 1)
    mean = np.zeros(len(obs))

    # Central differences of log Z in log(tau2), with common random numbers
    delta, fd = 1e-4, []
    for seed in range(200):
        logz = []
        for sign in (1, -1):
            tau2 = prm.tau2 * math.exp(sign * delta)
            model = SvSeriesModel(prm.replace(tau2=tau2), mean)
            sys = bootstrap_pf(model, obs, 5000, np.random.default_rng(seed))
            logz.append(sys.logZ)
        fd.append((logz[0] - logz[1]) / (2 * delta))

    model = SvSeriesModel(prm, mean)
    rng = np.random.default_rng(1000)
    scores = [estimate_score(model, obs, 5000, 0.95, rng)[0] for _ in range(50)]
    assert np.mean(fd) > 10
    assert np.mean(scores) == approx(np.mean(fd), rel=0.05)


def gig_moment(p, a, b, r):
    def density(x, power):
        return x ** (p - 1 + power) * math.exp(-(a * x + b / x) / 2)

    z = integrate.quad(density, 0, np.inf, args=(0,))[0]
    return integrate.quad(density, 0, np.inf, args=(r,))[0] / z


def test_conditional_update_oracles():
    skip_unless_long()
    rng = np.random.default_rng(2)
    n = 100_000

    # Loadings of a series with leverage
    T = 40
    prm = SvParams(-0.2, 0.9, 0.1, -0.5)
    f = rng.standard_normal((2, T))
    h = -0.2 + 0.3 * rng.standard_normal(T)
    eta = volatility_innovations(h, prm)
    y = 0.8 * f[0] - 0.4 * f[1] + np.exp(0.5 * h) * rng.standard_normal(T)
    prec, rhs = loading_posterior(f, y, h, eta, prm, [1.0, 1.0])
    cov = np.linalg.inv(prec)
    draws = np.array(
        [update_loadings_gibbs(f, y, h, eta, prm, [1.0, 1.0], rng) for _ in range(n)]
    )
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(axis=0) - cov @ rhs) < 3 * se)
    assert np.cov(draws.T) == approx(cov, rel=0.03, abs=3 * np.sqrt(2 / n) * cov.max())

    # Factors at one period, with the leverage terms of all series
    theta = make_theta(p=4, k=2, rho=-0.4)
    B = theta.B
    h1 = np.array([-0.3, 0.1, 0.0, -0.5])
    h2 = np.array([0.2, -0.1])
    eta1 = np.array([0.1, -0.2, 0.05, 0.0])
    y_t = np.array([0.5, -0.2, 1.0, 0.3])
    tau = math.sqrt(0.05)
    lev = -0.4 / tau * np.exp(0.5 * h1) * eta1
    v = np.exp(h1) * (1 - 0.16)
    prec = B.T @ np.diag(1 / v) @ B + np.diag(np.exp(-h2))
    cov = np.linalg.inv(prec)
    mean = cov @ (B.T @ ((y_t - lev) / v))
    draws = np.array(
        [update_factors_gibbs(y_t, B, h1, h2, eta1, theta, rng) for _ in range(n)]
    )
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se)

    # GIG mean and variance against quadrature, at random parameters
    for _ in range(20):
        p = rng.uniform(-1.0, 1.5)
        a, b = np.exp(rng.uniform(math.log(0.5), math.log(4.0), 2))
        m1, m2 = (gig_moment(p, a, b, r) for r in (1, 2))
        x = gig_rvs(p, a, b, rng, size=2_000_000)
        assert x.mean() == approx(m1, rel=0.02)
        assert x.var() == approx(m2 - m1**2, rel=0.02)


def sim_design(p=5, k=1, T=500, seed=3):
    theta = make_theta(p, k, B=SIM_LOADINGS[:p, :k])
    y, _ = simulate(ModelDims(p, k, T), theta, seed)
    truth = dict(zip(parameter_names(p, k), theta_vector(theta)))
    return y, truth


def test_parameter_recovery():
    skip_unless_long()
    y, truth = sim_design()
    config = SamplerConfig(scheme="mixed", N=200, iters=6000, burnin=2000, seed=4)
    out = fit(y, config, k=1, truth=truth)
    inside = [row.in99 for row in out.summary]
    assert np.mean(inside) >= 0.9


def test_efficiency_ordering():
    skip_unless_long()
    y, _ = sim_design()
    iact = {}
    for scheme in ("pg", "pgas", "mixed"):
        values = []
        for seed in range(3):
            config = SamplerConfig(
                scheme=scheme, N=200, iters=6000, burnin=2000, seed=seed
            )
            values.append(fit(y, config, k=1).stats.iact_mean)
        iact[scheme] = np.mean(values)
    assert iact["mixed"] < iact["pgas"] < iact["pg"]


def test_dic_prefers_true_factor_count():
    skip_unless_long()
    y, _ = sim_design(p=6, k=2, T=400, seed=5)
    dic = {}
    for k in (1, 2):
        config = SamplerConfig(scheme="pgas", N=100, iters=3000, burnin=1000, seed=6)
        dic[k] = fit(y, config, k=k).dic
    assert dic[2] < dic[1]


if __name__ == "__main__":
    run_tests(globals())
