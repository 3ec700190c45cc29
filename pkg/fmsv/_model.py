"""
This module implements the factor stochastic volatility model with
leverage: its parameter containers, log-densities, priors and simulator.
All functions are pure; randomness is passed in explicitly.
"""

import sys
import math
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats


LOG_ZERO = -np.inf
VAR_FLOOR = 1e-300
_LOG_2PI = math.log(2 * math.pi)


# Initialize the logger
logger = logging.getLogger("fmsv")
logger.propagate = False
logger.setLevel(logging.INFO)
_handler = logging.StreamHandler(sys.stderr)
_handler.setFormatter(
    logging.Formatter(
        fmt="[%(levelname)s %(asctime)s] %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
    )
)
logger.addHandler(_handler)


class DataError(ValueError):
    """Error raised when an observation panel or latent state is malformed."""


# %% Containers


@dataclass(frozen=True)
class ModelDims:
    """The dimensions of a factor model: ``p`` series, ``k`` factors and
    ``T`` periods.
    """

    p: int
    k: int
    T: int

    def __post_init__(self):
        for name in ("p", "k", "T"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or isinstance(val, bool):
                raise TypeError(f"ModelDims.{name} must be an int, not {val!r}")
        if self.p < 1:
            raise ValueError(f"ModelDims needs p >= 1, got {self.p}")
        if not 1 <= self.k <= self.p:
            raise ValueError(f"ModelDims needs 1 <= k <= p, got k={self.k}")
        if self.T < 2:
            raise ValueError(f"ModelDims needs T >= 2, got {self.T}")


@dataclass(frozen=True)
class SvParams:
    """Parameters of one univariate stochastic volatility process.

    * ``mu``: the level of the log-variance.
    * ``phi``: the persistence, in (-1, 1).
    * ``tau2``: the variance of the volatility innovations.
    * ``rho``: correlation between return and volatility innovations.
      Zero for factor series.

    Instances are not validated on construction, so that out-of-support
    values can be handed to ``prior_logdensity()``. Use ``check()``.
    """

    mu: float
    phi: float
    tau2: float
    rho: float = 0.0

    @property
    def tau(self):
        return math.sqrt(self.tau2)

    @property
    def is_valid(self):
        return (
            all(math.isfinite(x) for x in (self.mu, self.phi, self.tau2, self.rho))
            and abs(self.phi) < 1
            and self.tau2 > 0
            and abs(self.rho) < 1
        )

    def check(self):
        if not self.is_valid:
            raise ValueError(f"Invalid SV parameters: {self!r}")
        return self

    def replace(self, **kwargs):
        return replace(self, **kwargs)


def loading_mask(p, k):
    """Get a p x k boolean array that is True for the free loadings
    (on and below the diagonal).
    """
    return np.tri(p, k, dtype=bool)


class FactorLoadings:
    """A p x k loadings matrix whose cells strictly above the diagonal are
    zero. The diagonal is unrestricted.
    """

    __slots__ = ("_B",)

    def __init__(self, B):
        B = np.array(B, dtype=float)
        if B.ndim != 2:
            raise ValueError(f"Loadings must be a 2D array, got shape {B.shape}")
        p, k = B.shape
        if k > p:
            raise ValueError(f"Loadings need k <= p, got shape {B.shape}")
        if not np.all(np.isfinite(B)):
            raise ValueError("Loadings must be finite.")
        if np.any(B[~loading_mask(p, k)] != 0):
            raise ValueError("Loadings must be zero above the diagonal.")
        B.flags.writeable = False
        self._B = B

    def __repr__(self):
        return f"<FactorLoadings {self._B.shape[0]}x{self._B.shape[1]}>"

    @property
    def B(self):
        """The loadings as a read-only array."""
        return self._B

    @property
    def shape(self):
        return self._B.shape

    @property
    def mask(self):
        return loading_mask(*self._B.shape)

    def free_count(self, s):
        """The number of free loadings in row ``s`` (zero-based)."""
        return min(s + 1, self._B.shape[1])

    def with_row(self, s, row):
        B = self._B.copy()
        ks = self.free_count(s)
        B[s, :ks] = row[:ks]
        return FactorLoadings(B)

    def with_matrix(self, B):
        return FactorLoadings(B)


@dataclass
class LatentState:
    """The latent paths: idiosyncratic log-variances ``h1`` (p x T),
    factor log-variances ``h2`` (k x T) and factors ``f`` (k x T).
    """

    h1: np.ndarray
    h2: np.ndarray
    f: np.ndarray

    def check(self, p, k, T):
        for name, rows in (("h1", p), ("h2", k), ("f", k)):
            arr = getattr(self, name)
            if arr.shape != (rows, T):
                raise DataError(
                    f"LatentState.{name} has shape {arr.shape}, expected {(rows, T)}"
                )
            if not np.all(np.isfinite(arr)):
                raise DataError(f"LatentState.{name} contains non-finite values.")
        return self

    def copy(self):
        return LatentState(self.h1.copy(), self.h2.copy(), self.f.copy())


@dataclass(frozen=True)
class PriorSettings:
    """Prior hyperparameters. ``kind`` is "normal" for independent
    N(0, b0) loadings or "ng" for the normal-gamma shrinkage prior with
    per-series ``a``, ``c`` and ``d``.
    """

    kind: str = "normal"
    b0: float = 1.0
    a: float = 0.5
    c: float = 2.0
    d: float = 2.0

    def __post_init__(self):
        if self.kind not in ("normal", "ng"):
            raise ValueError(f"Prior kind must be 'normal' or 'ng', not {self.kind!r}")
        for name in ("b0", "a", "c", "d"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise ValueError(f"Prior setting {name} must be positive.")

    def per_series(self, name, p):
        return np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (p,))


@dataclass
class Theta:
    """The full parameter state: per-series SV parameters, loadings, and
    optionally the shrinkage state of the normal-gamma prior.
    """

    idio: list
    fac: list
    loadings: FactorLoadings
    shrink: object = field(default=None)

    @property
    def B(self):
        return self.loadings.B

    @property
    def dims_pk(self):
        return len(self.idio), len(self.fac)

    def check(self):
        p, k = self.dims_pk
        if self.loadings.shape != (p, k):
            raise ValueError(
                f"Loadings shape {self.loadings.shape} does not match p={p}, k={k}"
            )
        for prm in self.idio:
            prm.check()
        for prm in self.fac:
            prm.check()
            if prm.rho != 0:
                raise ValueError("Factor series cannot have leverage.")
        return self

    def copy(self):
        return Theta(list(self.idio), list(self.fac), self.loadings, self.shrink)


# %% Densities


def _check_finite(funcname, *values):
    for val in values:
        if not np.all(np.isfinite(val)):
            raise ValueError(f"{funcname}() got non-finite input {val!r}")


def _as_result(x):
    return float(x) if np.ndim(x) == 0 else x


def gauss_logpdf(x, mean, var):
    """Log of the normal density, with the variance clamped at VAR_FLOOR."""
    var = np.maximum(var, VAR_FLOOR)
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def leverage_moments(bf, h, h_prev, prm):
    """Get the conditional mean and variance of an idiosyncratic observation
    given the log-variance at t and t-1. Pass ``h_prev=None`` for the first
    period, which has no leverage term.
    """
    with np.errstate(over="ignore"):
        ev = np.exp(h)
        if h_prev is None:
            return bf + 0.0 * h, np.maximum(ev, VAR_FLOOR)
        eta = h - prm.mu - prm.phi * (h_prev - prm.mu)
        mean = bf + (prm.rho / prm.tau) * np.exp(0.5 * h) * eta
        var = (1.0 - prm.rho**2) * ev
    return mean, np.maximum(var, VAR_FLOOR)


def idio_measurement_logdensity(y_st, bf, h_t, h_prev, prm):
    """Log-density of an idiosyncratic observation ``y_st`` given the mean
    contribution ``bf`` of the factors, and the log-variances ``h_t`` and
    ``h_prev``. Inputs can be arrays of broadcastable shape.
    """
    _check_finite("idio_measurement_logdensity", y_st, bf, h_t)
    if h_prev is not None:
        _check_finite("idio_measurement_logdensity", h_prev)
    if not abs(prm.rho) < 1:
        raise ValueError(f"Leverage must be in (-1, 1), got {prm.rho}")
    mean, var = leverage_moments(bf, h_t, h_prev, prm)
    return _as_result(gauss_logpdf(y_st, mean, var))


def factor_measurement_logdensity(f_jt, h_jt):
    """Log-density of a factor value given its log-variance."""
    _check_finite("factor_measurement_logdensity", f_jt, h_jt)
    with np.errstate(over="ignore"):
        var = np.exp(h_jt)
    return _as_result(gauss_logpdf(f_jt, 0.0, var))


def transition_logdensity(h_t, h_prev, prm):
    """Log-density of the AR(1) transition of the log-variance."""
    _check_finite("transition_logdensity", h_t, h_prev)
    mean = prm.mu + prm.phi * (h_prev - prm.mu)
    return _as_result(gauss_logpdf(h_t, mean, prm.tau2))


def stationary_variance(prm):
    if not abs(prm.phi) < 1:
        raise ValueError(f"Persistence must be in (-1, 1), got {prm.phi}")
    return prm.tau2 / (1.0 - prm.phi**2)


def initial_logdensity(h_1, prm):
    """Log-density of the first log-variance under the stationary law."""
    var = stationary_variance(prm)
    _check_finite("initial_logdensity", h_1)
    return _as_result(gauss_logpdf(h_1, prm.mu, var))


def volatility_innovations(h, prm):
    """The innovations h_t - mu - phi (h_{t-1} - mu) for a path, with a zero
    in the first period.
    """
    eta = np.zeros_like(h, dtype=float)
    eta[1:] = h[1:] - prm.mu - prm.phi * (h[:-1] - prm.mu)
    return eta


def idio_measurement_terms(y_s, bf_s, h_s, prm):
    """Per-period measurement log-densities of one idiosyncratic series."""
    out = np.empty(len(y_s))
    out[0] = gauss_logpdf(y_s[0], *leverage_moments(bf_s[0], h_s[0], None, prm))
    mean, var = leverage_moments(bf_s[1:], h_s[1:], h_s[:-1], prm)
    out[1:] = gauss_logpdf(y_s[1:], mean, var)
    return out


# %% Priors


def tau2_logprior(tau2):
    """Half-Cauchy prior on tau, expressed as a density over tau2."""
    if not (math.isfinite(tau2) and tau2 > 0):
        return LOG_ZERO
    return -math.log(math.pi) - math.log1p(tau2) - 0.5 * math.log(tau2)


def unit_interval_logprior(x):
    """Uniform prior on (-1, 1)."""
    return -math.log(2.0) if abs(x) < 1 else LOG_ZERO


def sv_logprior(prm, with_rho=True):
    lp = tau2_logprior(prm.tau2) + unit_interval_logprior(prm.phi)
    if with_rho:
        lp += unit_interval_logprior(prm.rho)
    if not math.isfinite(prm.mu):
        return LOG_ZERO
    return lp


def loadings_logprior(B, prior, shrink=None):
    """Log prior of the free loadings, either independent N(0, b0) or,
    with a shrinkage state, the normal-gamma hierarchy.
    """
    mask = loading_mask(*B.shape)
    if shrink is None:
        return float(stats.norm.logpdf(B[mask], scale=math.sqrt(prior.b0)).sum())
    p = B.shape[0]
    sigma2 = shrink.sigma2[mask]
    if np.any(~(sigma2 > 0)) or np.any(~(shrink.lambda2 > 0)):
        return LOG_ZERO
    lp = stats.norm.logpdf(B[mask], scale=np.sqrt(sigma2)).sum()
    rows = np.nonzero(mask)[0]
    a = shrink.a[rows]
    lp += stats.gamma.logpdf(sigma2, a, scale=2.0 / shrink.lambda2[rows]).sum()
    c = prior.per_series("c", p)
    d = prior.per_series("d", p)
    lp += stats.gamma.logpdf(shrink.lambda2, c, scale=1.0 / d).sum()
    return float(lp)


def prior_logdensity(theta, prior=None):
    """Sum of the log prior terms of all parameters. The flat prior on the
    levels contributes nothing. Values outside the support give LOG_ZERO.
    """
    prior = prior or PriorSettings()
    lp = 0.0
    for prm in theta.idio:
        lp += sv_logprior(prm, True)
    for prm in theta.fac:
        lp += sv_logprior(prm, False)
    if lp == LOG_ZERO:
        return LOG_ZERO
    shrink = theta.shrink if prior.kind == "ng" else None
    return lp + loadings_logprior(theta.B, prior, shrink)


# %% Simulation and likelihood


def simulate(dims, theta, seed):
    """Simulate a panel from the model. Returns ``(y, latents)`` with ``y``
    a p x T array. The return innovation u_st is correlated with the
    volatility innovation that produced h_st from h_st-1; the first period
    has no leverage.
    """
    theta.check()
    if theta.dims_pk != (dims.p, dims.k):
        raise ValueError(f"Theta has (p, k)={theta.dims_pk}, dims say {dims}")
    rng = np.random.default_rng(seed)
    p, k, T = dims.p, dims.k, dims.T

    z_h2 = rng.standard_normal((k, T))
    z_f = rng.standard_normal((k, T))
    z_h1 = rng.standard_normal((p, T))
    z_u = rng.standard_normal((p, T))

    h2 = _simulate_ar(theta.fac, z_h2)
    h1 = _simulate_ar(theta.idio, z_h1)
    f = np.exp(0.5 * h2) * z_f

    rho = np.array([prm.rho for prm in theta.idio])[:, None]
    u = np.empty((p, T))
    u[:, 0] = np.exp(0.5 * h1[:, 0]) * z_u[:, 0]
    u[:, 1:] = np.exp(0.5 * h1[:, 1:]) * (
        rho * z_h1[:, 1:] + np.sqrt(1.0 - rho**2) * z_u[:, 1:]
    )
    y = theta.B @ f + u
    return y, LatentState(h1, h2, f)


def _simulate_ar(params, z):
    n, T = z.shape
    mu = np.array([prm.mu for prm in params])
    phi = np.array([prm.phi for prm in params])
    tau = np.sqrt([prm.tau2 for prm in params])
    h = np.empty((n, T))
    h[:, 0] = mu + tau / np.sqrt(1.0 - phi**2) * z[:, 0]
    for t in range(1, T):
        h[:, t] = mu + phi * (h[:, t - 1] - mu) + tau * z[:, t]
    return h


def conditional_loglik(y, state, theta):
    """The log-likelihood of the panel given the latents,
    summed over all cells.
    """
    y = np.asarray(y, dtype=float)
    p, k = theta.dims_pk
    if y.ndim != 2 or y.shape[0] != p:
        raise DataError(f"Panel has shape {y.shape}, expected ({p}, T)")
    state.check(p, k, y.shape[1])
    bf = theta.B @ state.f
    total = 0.0
    for s, prm in enumerate(theta.idio):
        total += idio_measurement_terms(y[s], bf[s], state.h1[s], prm).sum()
    return float(total)
