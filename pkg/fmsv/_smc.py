"""
This module implements sequential Monte Carlo for one univariate series:
the bootstrap particle filter, conditional SMC (with and without ancestor
sampling), the resampling schemes they use, and ancestral tracing.

Particles, slots and periods are counted from zero. A reference trajectory
is pinned at slot ``N - 1`` unless specified otherwise.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._model import (
    gauss_logpdf,
    leverage_moments,
    stationary_variance,
)


WEIGHT_TOL = 1e-9


class ParticleCollapseError(RuntimeError):
    """Error raised when all particle weights at a period are zero. The
    ``t`` attribute holds the period; ``series`` and ``sweep`` are set
    when the error passes through a sampler.
    """

    def __init__(self, t, series=None, sweep=None):
        self.t = t
        self.series = series
        self.sweep = sweep
        super().__init__(self._message())

    def _message(self):
        msg = f"particle collapse at t={self.t}"
        if self.series is not None:
            msg += f" in series {self.series}"
        if self.sweep is not None:
            msg += f" during sweep {self.sweep}"
        return msg

    def at(self, series=None, sweep=None):
        """Return a copy annotated with the series and sweep."""
        series = self.series if series is None else series
        sweep = self.sweep if sweep is None else sweep
        return ParticleCollapseError(self.t, series, sweep)


# %% State-space models


class SeriesModel:
    """Base class for a univariate state-space model as seen by the
    particle filters. Subclasses implement the samplers and evaluators
    below; all of them work on arrays of particles.

    The measurement density receives the particle values at ``t`` and
    their ancestors at ``t - 1`` (``None`` at the first period). Set
    ``depends_on_previous`` when it actually uses them.

    The ``grad_*`` methods return the gradient of each log-density with
    respect to the target parameters, as arrays of shape (n,) or (n, d).
    They are only needed for score estimation.
    """

    depends_on_previous = False

    def sample_initial(self, rng, n):
        raise NotImplementedError()

    def initial_logdensity(self, h):
        raise NotImplementedError()

    def sample_transition(self, rng, h_prev, t):
        raise NotImplementedError()

    def transition_logdensity(self, h, h_prev, t):
        raise NotImplementedError()

    def measurement_logdensity(self, t, y_t, h, h_prev):
        raise NotImplementedError()

    def grad_initial(self, h):
        raise NotImplementedError()

    def grad_transition(self, h, h_prev, t):
        raise NotImplementedError()

    def grad_measurement(self, t, y_t, h, h_prev):
        raise NotImplementedError()


class SvSeriesModel(SeriesModel):
    """The state-space form of one stochastic volatility series. With a
    nonzero ``rho`` the measurement density carries the leverage term.
    ``mean`` holds the per-period mean of the observations (B_s f_t for
    an idiosyncratic series, zeros for a factor series).

    Gradients are with respect to log(tau2).
    """

    def __init__(self, prm, mean=None):
        self.prm = prm.check()
        self.mean = None if mean is None else np.asarray(mean, dtype=float)
        self.depends_on_previous = prm.rho != 0
        self._sd0 = math.sqrt(stationary_variance(prm))

    def _mean(self, t):
        return 0.0 if self.mean is None else self.mean[t]

    def sample_initial(self, rng, n):
        return self.prm.mu + self._sd0 * rng.standard_normal(n)

    def initial_logdensity(self, h):
        return gauss_logpdf(h, self.prm.mu, self._sd0**2)

    def sample_transition(self, rng, h_prev, t):
        prm = self.prm
        return prm.mu + prm.phi * (h_prev - prm.mu) + prm.tau * rng.standard_normal(
            len(h_prev)
        )

    def transition_logdensity(self, h, h_prev, t):
        prm = self.prm
        return gauss_logpdf(h, prm.mu + prm.phi * (h_prev - prm.mu), prm.tau2)

    def measurement_logdensity(self, t, y_t, h, h_prev):
        if not self.depends_on_previous:
            h_prev = None
        mean, var = leverage_moments(self._mean(t), h, h_prev, self.prm)
        return gauss_logpdf(y_t, mean, var)

    def grad_initial(self, h):
        prm = self.prm
        return -0.5 + (1.0 - prm.phi**2) * (h - prm.mu) ** 2 / (2.0 * prm.tau2)

    def grad_transition(self, h, h_prev, t):
        prm = self.prm
        e = h - prm.mu - prm.phi * (h_prev - prm.mu)
        return -0.5 + e**2 / (2.0 * prm.tau2)

    def grad_measurement(self, t, y_t, h, h_prev):
        prm = self.prm
        if h_prev is None or prm.rho == 0:
            return np.zeros_like(h)
        mean, var = leverage_moments(self._mean(t), h, h_prev, prm)
        e = h - prm.mu - prm.phi * (h_prev - prm.mu)
        dmean = -0.5 * (prm.rho / prm.tau) * np.exp(0.5 * h) * e
        return (y_t - mean) / var * dmean


# %% Particle systems


def _readonly(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ParticleSystem:
    """The output of a particle filter run: ``particles`` (N x T),
    ``ancestors`` (N x T-1, where ``ancestors[i, t-1]`` is the parent of
    particle i at t), ``logweights`` and ``normweights`` (N x T), and the
    log-likelihood estimate ``logZ``. Arrays are read-only.
    """

    particles: np.ndarray
    ancestors: np.ndarray
    logweights: np.ndarray
    normweights: np.ndarray
    logZ: float

    def __post_init__(self):
        for name in ("particles", "ancestors", "logweights", "normweights"):
            _readonly(getattr(self, name))

    @property
    def N(self):
        return self.particles.shape[0]

    @property
    def T(self):
        return self.particles.shape[1]


@dataclass(frozen=True)
class ReferenceTrajectory:
    """A trajectory to pin in conditional SMC. ``slots[t]`` is the
    particle slot that holds ``path[t]``.
    """

    path: np.ndarray
    slots: np.ndarray

    @classmethod
    def pinned(cls, path, N):
        """Pin the path at slot ``N - 1`` in every period."""
        path = np.array(path, dtype=float)
        return cls(_readonly(path), _readonly(np.full(len(path), N - 1, dtype=int)))

    def check(self, T, N):
        if len(self.path) != T or len(self.slots) != T:
            raise ValueError(f"Reference trajectory must have length {T}")
        if np.any(self.slots < 0) or np.any(self.slots >= N):
            raise ValueError(f"Reference slots must be in 0..{N - 1}")


class _WeightStore:
    """Collect per-period weights into a particle system."""

    def __init__(self, N, T):
        self.particles = np.empty((N, T))
        self.ancestors = np.zeros((N, max(T - 1, 0)), dtype=int)
        self.logweights = np.empty((N, T))
        self.normweights = np.empty((N, T))
        self.logZ = 0.0

    def add(self, t, h, logw, ancestors=None):
        logw = np.where(np.isnan(logw), -np.inf, logw)
        top = logw.max()
        if top == -np.inf:
            raise ParticleCollapseError(t)
        w = np.exp(logw - top)
        self.particles[:, t] = h
        self.logweights[:, t] = logw
        self.normweights[:, t] = w / w.sum()
        self.logZ += logsumexp(logw) - math.log(len(h))
        if ancestors is not None:
            self.ancestors[:, t - 1] = ancestors

    def finish(self):
        return ParticleSystem(
            self.particles,
            self.ancestors,
            self.logweights,
            self.normweights,
            float(self.logZ),
        )


def _check_run_args(obs, N):
    if not isinstance(N, (int, np.integer)) or N < 2:
        raise ValueError(f"The number of particles must be an int >= 2, not {N!r}")
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1 or len(obs) < 1:
        raise ValueError("Observations must be a non-empty 1D array.")
    return obs


def bootstrap_pf(model, obs, N, rng):
    """Run a bootstrap particle filter, resampling (systematic) at every
    period before propagation. Returns a ParticleSystem.
    """
    obs = _check_run_args(obs, N)
    store = _WeightStore(N, len(obs))
    h = model.sample_initial(rng, N)
    store.add(0, h, model.measurement_logdensity(0, obs[0], h, None))
    for t in range(1, len(obs)):
        a = systematic_resample(store.normweights[:, t - 1], rng.random())
        h_prev = store.particles[a, t - 1]
        h = model.sample_transition(rng, h_prev, t)
        store.add(t, h, model.measurement_logdensity(t, obs[t], h, h_prev), a)
    return store.finish()


def conditional_smc(model, obs, N, ref, rng):
    """Run conditional SMC with the reference trajectory pinned, using
    conditional systematic resampling. The reference values are copied
    into the system unchanged.
    """
    return _run_csmc(model, obs, N, ref, rng, False)


def csmc_ancestor_sampling(model, obs, N, ref, rng):
    """Run conditional SMC with ancestor sampling: at each period the
    ancestor of the reference particle is redrawn among all particles.
    The other ancestors are drawn by multinomial resampling.
    """
    return _run_csmc(model, obs, N, ref, rng, True)


def _run_csmc(model, obs, N, ref, rng, ancestor_sampling):
    obs = _check_run_args(obs, N)
    T = len(obs)
    ref.check(T, N)
    store = _WeightStore(N, T)

    slot = ref.slots[0]
    h = model.sample_initial(rng, N)
    h[slot] = ref.path[0]
    store.add(0, h, model.measurement_logdensity(0, obs[0], h, None))

    for t in range(1, T):
        prev_slot, slot = ref.slots[t - 1], ref.slots[t]
        W = store.normweights[:, t - 1]
        x_prev = store.particles[:, t - 1]
        if ancestor_sampling:
            a = multinomial_resample(W, N, rng)
            logw = ancestor_sampling_weights(
                model, t, obs[t], ref.path[t], x_prev, store.logweights[:, t - 1]
            )
            a[slot] = _draw_categorical(logw, rng, t)
        else:
            a = conditional_systematic_resample(W, prev_slot, slot, rng)
        h_prev = x_prev[a]
        h = model.sample_transition(rng, h_prev, t)
        h[slot] = ref.path[t]
        store.add(t, h, model.measurement_logdensity(t, obs[t], h, h_prev), a)
    return store.finish()


def ancestor_sampling_weights(model, t, y_t, h_ref, x_prev, logw_prev):
    """Log-weights for redrawing the ancestor of the reference particle
    at period ``t``. When the measurement density depends on the previous
    state, its value at the reference is included.
    """
    href = np.full(len(x_prev), h_ref)
    logw = logw_prev + model.transition_logdensity(href, x_prev, t)
    if model.depends_on_previous:
        logw = logw + model.measurement_logdensity(t, y_t, href, x_prev)
    return logw


def _draw_categorical(logw, rng, t):
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = logw.max()
    if top == -np.inf:
        raise ParticleCollapseError(t)
    w = np.exp(logw - top)
    return sample_trajectory_index(w / w.sum(), rng)


# %% Resampling


def _check_weights(weights):
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or len(weights) == 0:
        raise ValueError("Weights must be a non-empty 1D array.")
    total = weights.sum()
    if not abs(total - 1.0) <= WEIGHT_TOL or np.any(weights < 0):
        raise ValueError(f"Weights must be normalized, they sum to {total!r}")
    return weights


def _cdf(weights):
    c = np.cumsum(weights)
    c[-1] = 1.0
    return c


def systematic_resample(normweights, u, n=None):
    """Systematic resampling: draw ``n`` (default N) ancestor indices
    using the grid (i + u) / n.
    """
    weights = _check_weights(normweights)
    if not 0 <= u < 1:
        raise ValueError(f"Systematic resampling needs u in [0, 1), got {u!r}")
    n = len(weights) if n is None else n
    positions = (np.arange(n) + u) / n
    idx = np.searchsorted(_cdf(weights), positions, side="right")
    return np.minimum(idx, len(weights) - 1)


def multinomial_resample(normweights, n, rng):
    """Draw ``n`` ancestor indices independently."""
    weights = _check_weights(normweights)
    idx = np.searchsorted(_cdf(weights), rng.random(n), side="right")
    return np.minimum(idx, len(weights) - 1)


def conditional_systematic_resample(normweights, pinned, slot, rng):
    """Systematic resampling conditioned on particle ``pinned`` being the
    ancestor at ``slot``. The grid position that lands on the pinned
    particle is drawn uniformly within its share of the unit interval;
    the other positions are assigned to the other slots in random order.
    """
    weights = _check_weights(normweights)
    N = len(weights)
    if not (0 <= pinned < N and 0 <= slot < N):
        raise ValueError(f"pinned and slot must be in 0..{N - 1}")
    cdf = _cdf(weights)
    hi = cdf[pinned]
    lo = hi - weights[pinned]
    if weights[pinned] > 0:
        x = rng.uniform(lo, hi)
        n = min(int(N * x), N - 1)
        u = min(max(N * x - n, 0.0), np.nextafter(1.0, 0.0))
        idx = systematic_resample(weights, u)
    else:
        n = N - 1
        idx = systematic_resample(weights, rng.random())
    idx[n] = pinned
    others = rng.permutation(np.delete(idx, n))
    out = np.empty(N, dtype=int)
    out[slot] = pinned
    out[np.arange(N) != slot] = others
    return out


def sample_trajectory_index(normweights, rng):
    """Draw one index with the given probabilities."""
    weights = _check_weights(normweights)
    idx = int(np.searchsorted(_cdf(weights), rng.random(), side="right"))
    return min(idx, len(weights) - 1)


def ancestral_trace(sys, j):
    """Follow the ancestors of terminal particle ``j`` back to the first
    period and return the path.
    """
    if not 0 <= j < sys.N:
        raise ValueError(f"Particle index must be in 0..{sys.N - 1}, got {j}")
    T = sys.T
    path = np.empty(T)
    idx = j
    for t in range(T - 1, -1, -1):
        path[t] = sys.particles[idx, t]
        if t > 0:
            idx = sys.ancestors[idx, t - 1]
    return path


def draw_reference(sys, rng):
    """Draw a terminal index from the final weights and trace its path;
    the result is pinned at the last slot.
    """
    j = sample_trajectory_index(sys.normweights[:, -1], rng)
    return ReferenceTrajectory.pinned(ancestral_trace(sys, j), sys.N)
