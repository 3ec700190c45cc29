"""
fmsv test utilities: state-space models with exactly computable answers,
for checking the particle filters and samplers against.
"""

import math
import itertools

import numpy as np
from scipy.special import logsumexp

from ._model import gauss_logpdf
from ._smc import SeriesModel, bootstrap_pf, draw_reference


__all__ = [
    "LinearGaussianModel",
    "kalman_loglik",
    "kalman_score",
    "simulate_linear_gaussian",
    "GridModel",
    "enumerate_smoothing",
    "run_csmc_chain",
]


class LinearGaussianModel(SeriesModel):
    """The model ``x_t = a x_{t-1} + N(0, q)``, ``y_t = x_t + N(0, r)``
    with ``x_0 ~ N(m0, p0)``. Gradients are with respect to log(q), with
    the initial law held fixed.
    """

    def __init__(self, a=0.9, q=0.5, r=1.0, m0=0.0, p0=1.0):
        if not (q > 0 and r > 0 and p0 > 0):
            raise ValueError("Variances q, r and p0 must be positive.")
        self.a, self.q, self.r, self.m0, self.p0 = a, q, r, m0, p0

    def with_q(self, q):
        return LinearGaussianModel(self.a, q, self.r, self.m0, self.p0)

    def sample_initial(self, rng, n):
        return self.m0 + math.sqrt(self.p0) * rng.standard_normal(n)

    def initial_logdensity(self, h):
        return gauss_logpdf(h, self.m0, self.p0)

    def sample_transition(self, rng, h_prev, t):
        return self.a * h_prev + math.sqrt(self.q) * rng.standard_normal(len(h_prev))

    def transition_logdensity(self, h, h_prev, t):
        return gauss_logpdf(h, self.a * h_prev, self.q)

    def measurement_logdensity(self, t, y_t, h, h_prev):
        return gauss_logpdf(y_t, h, self.r)

    def grad_initial(self, h):
        return np.zeros_like(h)

    def grad_transition(self, h, h_prev, t):
        e = h - self.a * h_prev
        return -0.5 + e**2 / (2.0 * self.q)

    def grad_measurement(self, t, y_t, h, h_prev):
        return np.zeros_like(h)


def simulate_linear_gaussian(model, T, rng):
    """Simulate ``(x, y)`` of length T."""
    x = np.empty(T)
    x[0] = model.m0 + math.sqrt(model.p0) * rng.standard_normal()
    for t in range(1, T):
        x[t] = model.a * x[t - 1] + math.sqrt(model.q) * rng.standard_normal()
    y = x + math.sqrt(model.r) * rng.standard_normal(T)
    return x, y


def kalman_loglik(model, obs):
    """The exact log-likelihood of ``obs`` from the Kalman filter."""
    obs = np.asarray(obs, dtype=float)
    m, P = model.m0, model.p0
    total = 0.0
    for t, y in enumerate(obs):
        if t > 0:
            m, P = model.a * m, model.a**2 * P + model.q
        S = P + model.r
        total += float(gauss_logpdf(y, m, S))
        K = P / S
        m, P = m + K * (y - m), (1.0 - K) * P
    return total


def kalman_score(model, obs, delta=1e-5):
    """The derivative of the exact log-likelihood with respect to log(q),
    by central finite differences.
    """
    lq = math.log(model.q)
    up = kalman_loglik(model.with_q(math.exp(lq + delta)), obs)
    down = kalman_loglik(model.with_q(math.exp(lq - delta)), obs)
    return (up - down) / (2.0 * delta)


class GridModel(SeriesModel):
    """A hidden Markov model on the states 0..K-1 (stored as floats).
    Observations are ``N(values[x_t] + beta * values[x_{t-1}], r)``, so a
    nonzero ``beta`` makes the measurement depend on the previous state.
    """

    def __init__(self, values, init, trans, r=1.0, beta=0.0):
        self.values = np.asarray(values, dtype=float)
        self.init = np.asarray(init, dtype=float)
        self.trans = np.asarray(trans, dtype=float)
        K = len(self.values)
        if self.init.shape != (K,) or self.trans.shape != (K, K):
            raise ValueError(f"GridModel needs init ({K},) and trans ({K}, {K})")
        rows_ok = np.allclose(self.trans.sum(axis=1), 1)
        if not rows_ok or abs(self.init.sum() - 1) > 1e-9:
            raise ValueError("GridModel probabilities must sum to one.")
        self.r = r
        self.beta = beta
        self.depends_on_previous = beta != 0

    @property
    def K(self):
        return len(self.values)

    def sample_initial(self, rng, n):
        return rng.choice(self.K, size=n, p=self.init).astype(float)

    def initial_logdensity(self, h):
        with np.errstate(divide="ignore"):
            return np.log(self.init[h.astype(int)])

    def sample_transition(self, rng, h_prev, t):
        cdf = np.cumsum(self.trans[h_prev.astype(int)], axis=1)
        u = rng.random((len(h_prev), 1))
        idx = (u > cdf).sum(axis=1)
        return np.minimum(idx, self.K - 1).astype(float)

    def transition_logdensity(self, h, h_prev, t):
        with np.errstate(divide="ignore"):
            return np.log(self.trans[h_prev.astype(int), h.astype(int)])

    def measurement_logdensity(self, t, y_t, h, h_prev):
        mean = self.values[h.astype(int)]
        if h_prev is not None and self.beta:
            mean = mean + self.beta * self.values[np.asarray(h_prev).astype(int)]
        return gauss_logpdf(y_t, mean, self.r)


def enumerate_smoothing(model, obs):
    """The exact joint smoothing distribution of a GridModel, by
    enumerating all K**T paths. Returns ``(paths, probs)``.
    """
    obs = np.asarray(obs, dtype=float)
    T = len(obs)
    paths = np.array(list(itertools.product(range(model.K), repeat=T)), dtype=float)
    logp = np.zeros(len(paths))
    with np.errstate(divide="ignore"):
        logp += np.log(model.init[paths[:, 0].astype(int)])
        logp += model.measurement_logdensity(0, obs[0], paths[:, 0], None)
        for t in range(1, T):
            logp += model.transition_logdensity(paths[:, t], paths[:, t - 1], t)
            prev = paths[:, t - 1]
            logp += model.measurement_logdensity(t, obs[t], paths[:, t], prev)
    return paths, np.exp(logp - logsumexp(logp))


def run_csmc_chain(model, obs, N, n_sweeps, rng, kernel):
    """Iterate a conditional SMC kernel (``conditional_smc`` or
    ``csmc_ancestor_sampling``) followed by drawing a new reference, and
    return the visited reference paths as an (n_sweeps, T) array.
    """
    ref = draw_reference(bootstrap_pf(model, obs, N, rng), rng)
    out = np.empty((n_sweeps, len(obs)))
    for i in range(n_sweeps):
        ref = draw_reference(kernel(model, obs, N, ref, rng), rng)
        out[i] = ref.path
    return out
