"""
This module implements the posterior samplers for the factor SV model:
particle Gibbs (PG), particle Gibbs with ancestor sampling (PGAS), and the
mixed sampler that moves tau2 with pseudo-marginal Langevin steps. The
sweeps are composed from conditional updates, each of which is a plain
function that can be tested on its own.
"""

import math
import time
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from ._model import (
    LOG_ZERO,
    FactorLoadings,
    LatentState,
    PriorSettings,
    SvParams,
    Theta,
    conditional_loglik,
    gauss_logpdf,
    idio_measurement_terms,
    loading_mask,
    logger,
    prior_logdensity,
    stationary_variance,
    tau2_logprior,
    volatility_innovations,
)
from ._smc import (
    ParticleCollapseError,
    ReferenceTrajectory,
    SvSeriesModel,
    bootstrap_pf,
    conditional_smc,
    csmc_ancestor_sampling,
    draw_reference,
)
from ._score import (
    StepSizeAdapter,
    langevin_proposal_tau2,
    score_from_system,
    tau2_logprior_grad,
)
from ._hmc import NutsKernel, hmc_step
from ._pool import map_series


SCHEMES = ("pg", "pgas", "mixed")

ObsContext = namedtuple("ObsContext", ["y", "mean"])
ObsContext.__doc__ = """The observations of an idiosyncratic series and the
mean contributed by the factors (B_s f_t). Factor series have no context."""


# %% Configuration and state


@dataclass(frozen=True)
class HmcSettings:
    """Settings for the leverage updates. ``kernel`` is "nuts" (with dual
    averaging towards ``target_accept``) or "hmc" (fixed ``n_leapfrog``
    steps of size ``step_size``).
    """

    kernel: str = "nuts"
    target_accept: float = 0.8
    max_depth: int = 10
    step_size: float = 0.1
    n_leapfrog: int = 10

    def __post_init__(self):
        if self.kernel not in ("nuts", "hmc"):
            raise ValueError(f"HMC kernel must be 'nuts' or 'hmc', not {self.kernel!r}")
        if not 0 < self.target_accept < 1:
            raise ValueError(
                f"target_accept must be in (0, 1), got {self.target_accept}"
            )
        if self.max_depth < 1 or self.n_leapfrog < 0 or not self.step_size > 0:
            raise ValueError("Invalid HMC settings.")


@dataclass(frozen=True)
class SamplerConfig:
    """Configuration of a sampler run.

    * ``scheme``: "pg", "pgas" or "mixed".
    * ``N``: the number of particles.
    * ``iters``, ``burnin``: total and discarded sweeps.
    * ``seed``: the seed from which all randomness flows.
    * ``hmc``: an ``HmcSettings``.
    * ``prior``: a ``PriorSettings`` (standard normal or normal-gamma loadings).
    * ``lam``: shrinkage of the score recursion.
    * ``langevin_eps``: the initial Langevin step size for tau2.
    * ``phi_correction``: the factor in the acceptance ratio of the
      persistence update, "plus" for sqrt(1 + phi**2) or "stationary"
      for sqrt(1 - phi**2).
    * ``interweave``: whether to do the deep interweaving move.
    * ``aux_variance``: the scale of the auxiliary prior in that move.
    * ``thin``: store full latent paths every this many retained sweeps.
    * ``log_every``: log progress every this many sweeps (0 disables).
    * ``threads``: worker threads for per-series steps (None: environment).
    * ``fixed_parameters``: only refresh the latent volatility paths.
    """

    scheme: str = "pgas"
    N: int = 500
    iters: int = 15000
    burnin: int = 5000
    seed: int = 0
    hmc: HmcSettings = field(default_factory=HmcSettings)
    prior: PriorSettings = field(default_factory=PriorSettings)
    lam: float = 0.95
    langevin_eps: float = 0.1
    langevin_target: float = 0.5
    phi_correction: str = "plus"
    interweave: bool = True
    aux_variance: float = 1e8
    thin: int = 10
    log_every: int = 500
    threads: int = None
    fixed_parameters: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"Scheme must be one of {SCHEMES}, not {self.scheme!r}")
        if self.N < 2:
            raise ValueError(f"Need at least 2 particles, got N={self.N}")
        if not 0 <= self.burnin < self.iters:
            msg = f"Need 0 <= burnin < iters, got burnin={self.burnin}"
            raise ValueError(f"{msg}, iters={self.iters}")
        if self.phi_correction not in ("plus", "stationary"):
            raise ValueError(f"Invalid phi_correction {self.phi_correction!r}")
        if not 0 < self.lam <= 1:
            raise ValueError(f"lam must be in (0, 1], got {self.lam}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if not (self.langevin_eps > 0 and self.aux_variance > 0):
            raise ValueError("langevin_eps and aux_variance must be positive.")


@dataclass
class ShrinkState:
    """State of the normal-gamma prior: the loading variances ``sigma2``
    (p x k, NaN at the zero-constrained cells), the per-series rates
    ``lambda2``, and hyperparameters ``a``, ``c``, ``d`` per series.
    """

    sigma2: np.ndarray
    lambda2: np.ndarray
    a: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @classmethod
    def initial(cls, p, k, prior):
        sigma2 = np.where(loading_mask(p, k), 1.0, np.nan)
        return cls(
            sigma2,
            np.ones(p),
            prior.per_series("a", p).copy(),
            prior.per_series("c", p).copy(),
            prior.per_series("d", p).copy(),
        )

    def check(self):
        mask = ~np.isnan(self.sigma2)
        if not (np.all(self.sigma2[mask] > 0) and np.all(self.lambda2 > 0)):
            raise ValueError("Shrinkage state must be positive.")
        return self


@dataclass
class ChainState:
    """The state of one chain, owned by the sweep functions. Besides the
    parameters and latents it carries the particle systems of the last
    filter runs and the adaptive kernels.
    """

    y: np.ndarray
    theta: Theta
    latents: LatentState
    systems1: list
    systems2: list
    rho_kernels: list
    langevin1: list
    langevin2: list
    sweep: int = 0
    accepts: dict = field(default_factory=dict)
    ref_change: np.ndarray = None

    @property
    def p(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.latents.f.shape[0]

    @property
    def T(self):
        return self.y.shape[1]

    def factor_means(self):
        return self.theta.B @ self.latents.f


# %% Helpers


def _mh_accept(log_ratio, rng):
    if math.isnan(log_ratio):
        return False
    return log_ratio >= 0 or rng.random() < math.exp(log_ratio)


def _measurement_sum(ctx, h, prm):
    if ctx is None:
        return 0.0
    return float(idio_measurement_terms(ctx.y, ctx.mean, h, prm).sum())


def _measurement_log_ratio(ctx, h, prm, prm_new):
    if ctx is None:
        return 0.0
    return _measurement_sum(ctx, h, prm_new) - _measurement_sum(ctx, h, prm)


def gig_rvs(p, a, b, rng, size=None, max_retries=1000):
    """Draw from GIG(p, a, b), with density proportional to
    ``x**(p-1) * exp(-(a*x + b/x)/2)``, via scipy's ratio-of-uniforms
    sampler and the scaling ``x = sqrt(b/a) * z``, ``z ~ GIG(p, w, w)``
    with ``w = sqrt(a*b)``. Non-finite draws are retried. Returns a float,
    or an array when ``size`` is given.
    """
    if not (a > 0 and b > 0):
        raise ValueError(f"gig_rvs() needs a > 0 and b > 0, got a={a}, b={b}")
    omega = math.sqrt(a * b)
    scale = math.sqrt(b / a)
    if size is None:
        for _ in range(max_retries):
            x = float(stats.geninvgauss.rvs(p, omega, random_state=rng)) * scale
            if math.isfinite(x) and x > 0:
                return x
    else:
        out = np.empty(size)
        todo = np.arange(size)
        for _ in range(max_retries):
            if len(todo) == 0:
                return out
            x = stats.geninvgauss.rvs(p, omega, size=len(todo), random_state=rng)
            x = np.asarray(x, dtype=float) * scale
            ok = np.isfinite(x) & (x > 0)
            out[todo[ok]] = x[ok]
            todo = todo[~ok]
        if len(todo) == 0:
            return out
    raise FloatingPointError(f"GIG sampler failed for p={p}, a={a}, b={b}")


# %% SV parameter updates


def tau2_proposal_params(h, prm):
    """The inverse gamma proposal for tau2: returns ``(shape, scale)``."""
    e = volatility_innovations(h, prm)
    M = (1.0 - prm.phi**2) * (h[0] - prm.mu) ** 2 + float(np.sum(e[1:] ** 2))
    return 0.5 * (len(h) - 1), 0.5 * M


def tau2_log_ratio(h, prm, tau2_new, ctx):
    prm_new = prm.replace(tau2=tau2_new)
    return (
        _measurement_log_ratio(ctx, h, prm, prm_new)
        + math.log1p(prm.tau2)
        - math.log1p(tau2_new)
    )


def update_tau2_pg(h, prm, ctx, rng):
    """Metropolis-Hastings update of tau2 with an inverse gamma proposal.
    Returns ``(prm, accepted)``.
    """
    shape, scale = tau2_proposal_params(h, prm)
    if not (shape > 0 and scale > 0):
        return prm, False
    tau2_new = float(stats.invgamma.rvs(shape, scale=scale, random_state=rng))
    if not (math.isfinite(tau2_new) and tau2_new > 0):
        return prm, False
    if _mh_accept(tau2_log_ratio(h, prm, tau2_new, ctx), rng):
        return prm.replace(tau2=tau2_new), True
    return prm, False


def phi_proposal_params(h, prm):
    """The Gaussian proposal for phi: returns ``(mean, variance)``, or
    None when the variance would not be positive.
    """
    x = h - prm.mu
    denom = float(np.sum(x[:-1] ** 2) - x[0] ** 2)
    if not denom > 0:
        return None
    d = prm.tau2 / denom
    c = d * float(np.sum(x[1:] * x[:-1])) / prm.tau2
    return c, d


def phi_log_ratio(h, prm, phi_new, ctx, correction="plus"):
    if not abs(phi_new) < 1:
        return LOG_ZERO
    prm_new = prm.replace(phi=phi_new)
    if correction == "plus":
        corr = 0.5 * (math.log1p(phi_new**2) - math.log1p(prm.phi**2))
    else:
        corr = 0.5 * (math.log1p(-(phi_new**2)) - math.log1p(-(prm.phi**2)))
    return _measurement_log_ratio(ctx, h, prm, prm_new) + corr


def update_phi_pg(h, prm, ctx, rng, correction="plus"):
    """Metropolis-Hastings update of phi with a Gaussian proposal built from
    the AR(1) likelihood of the path. Proposals outside (-1, 1) are
    rejected. Returns ``(prm, accepted)``.
    """
    params = phi_proposal_params(h, prm)
    if params is None:
        return prm, False
    c, d = params
    phi_new = c + math.sqrt(d) * rng.standard_normal()
    if not abs(phi_new) < 1:
        return prm, False
    if _mh_accept(phi_log_ratio(h, prm, phi_new, ctx, correction), rng):
        return prm.replace(phi=phi_new), True
    return prm, False


def mu_proposal_params(h, prm):
    """The Gaussian proposal for mu: returns ``(mean, variance)``."""
    phi, T = prm.phi, len(h)
    d = prm.tau2 / (1.0 - phi**2 + (T - 1) * (1.0 - phi) ** 2)
    total = h[0] * (1.0 - phi**2) + (1.0 - phi) * float(np.sum(h[1:] - phi * h[:-1]))
    return d * total / prm.tau2, d


def update_mu_pg(h, prm, ctx, rng):
    """Metropolis-Hastings update of mu. The proposal is the exact
    conditional given the path, so only the measurement densities enter
    the ratio. Returns ``(prm, accepted)``.
    """
    c, d = mu_proposal_params(h, prm)
    mu_new = c + math.sqrt(d) * rng.standard_normal()
    log_ratio = _measurement_log_ratio(ctx, h, prm, prm.replace(mu=mu_new))
    if _mh_accept(log_ratio, rng):
        return prm.replace(mu=mu_new), True
    return prm, False


def rho_target(h, prm, ctx):
    """Get the log conditional posterior of the leverage on the Fisher-z
    scale, as a function ``z -> (logp, grad)``.
    """
    h1 = h[1:]
    r = ctx.y[1:] - ctx.mean[1:]
    c = np.exp(0.5 * h1) * volatility_innovations(h, prm)[1:] / prm.tau
    eh = np.exp(h1)
    n = len(h1)

    def logp_grad(z):
        rho = math.tanh(z)
        one = 1.0 - rho**2
        if not one > 0:
            return -np.inf, np.nan
        resid = r - rho * c
        ll = -0.5 * n * math.log(one) - 0.5 * float(np.sum(resid**2 / eh)) / one
        dll = n * rho / one + float(
            np.sum(c * resid / eh) / one - rho * np.sum(resid**2 / eh) / one**2
        )
        return ll + math.log(one), one * dll - 2.0 * rho

    return logp_grad


def update_rho_hmc(h, prm, ctx, kernel, rng, adapt=False):
    """Update the leverage with HMC on z = atanh(rho). ``kernel`` is a
    ``NutsKernel`` or an ``HmcSettings`` for fixed-length HMC. Returns
    ``(prm, accepted, info)``; a non-finite gradient rejects the move and
    sets ``info["divergent"]``.
    """
    if not abs(prm.rho) < 1:
        raise ValueError(f"update_rho_hmc() needs |rho| < 1, got {prm.rho}")
    logp_grad = rho_target(h, prm, ctx)
    z = math.atanh(prm.rho)
    if isinstance(kernel, NutsKernel):
        z_new, accepted, info = kernel.step(z, logp_grad, rng, adapt=adapt)
    else:
        z_new, accepted, info = hmc_step(
            z, logp_grad, kernel.step_size, kernel.n_leapfrog, rng
        )
    rho_new = math.tanh(z_new)
    if not (math.isfinite(rho_new) and abs(rho_new) < 1):
        return prm, False, dict(info, divergent=True)
    return prm.replace(rho=rho_new), accepted, info


# %% Loadings and factors


def _chol_draw(prec, rhs, rng):
    """Draw from N(prec^-1 rhs, prec^-1)."""
    try:
        cf = linalg.cho_factor(prec, lower=True)
    except linalg.LinAlgError:
        raise np.linalg.LinAlgError("Posterior precision is not positive definite.")
    mean = linalg.cho_solve(cf, rhs)
    z = rng.standard_normal(len(rhs))
    return mean + linalg.solve_triangular(cf[0], z, lower=True, trans="T")


def loading_posterior(f, y_s, h_s, eta_s, prm, prior_var):
    """The Gaussian conditional of a row of free loadings: returns the
    precision matrix and the right-hand side (precision times mean).
    """
    prior_var = np.atleast_1d(np.asarray(prior_var, dtype=float))
    ks = len(prior_var)
    F = np.asarray(f, dtype=float)[:ks].T
    h_s = np.asarray(h_s, dtype=float)
    V = np.exp(h_s)
    V[1:] *= 1.0 - prm.rho**2
    target = np.asarray(y_s, dtype=float).copy()
    if len(target) > 1 and prm.rho != 0:
        target[1:] -= (prm.rho / prm.tau) * np.exp(0.5 * h_s[1:]) * eta_s[1:]
    FV = F.T / V
    prec = FV @ F + np.diag(1.0 / prior_var)
    return prec, FV @ target


def update_loadings_gibbs(f, y_s, h_s, eta_s, prm, prior_var, rng):
    """Gibbs draw of the free loadings of one series. ``prior_var`` holds
    the prior variance of each free loading, so its length sets how many
    loadings are free. The first period has no leverage term.
    """
    prec, rhs = loading_posterior(f, y_s, h_s, eta_s, prm, prior_var)
    return _chol_draw(prec, rhs, rng)


def factor_posterior(y, B, h1, h2, lev, v1):
    """Batched Gaussian conditionals of the factors. ``y``, ``h1``, ``lev``
    and ``v1`` are (T, p); ``h2`` is (T, k). Returns precisions (T, k, k)
    and right-hand sides (T, k).
    """
    W = B[None, :, :] / v1[:, :, None]
    prec = np.einsum("tpi,pj->tij", W, B)
    idx = np.arange(B.shape[1])
    prec[:, idx, idx] += np.exp(-h2)
    rhs = np.einsum("tpi,tp->ti", W, y - lev)
    return prec, rhs


def _factor_inputs(y, h1, theta):
    """Leverage means and variances for the factor conditionals, (p, T)."""
    lev = np.zeros_like(y)
    v1 = np.exp(h1)
    for s, prm in enumerate(theta.idio):
        if prm.rho != 0:
            eta = volatility_innovations(h1[s], prm)
            lev[s, 1:] = (prm.rho / prm.tau) * np.exp(0.5 * h1[s, 1:]) * eta[1:]
        v1[s, 1:] *= 1.0 - prm.rho**2
    return lev, v1


def draw_factors(y, B, h1, h2, theta, rng):
    """Gibbs draw of all factors, which are independent over time given
    the rest. Returns a k x T array.
    """
    lev, v1 = _factor_inputs(y, h1, theta)
    prec, rhs = factor_posterior(y.T, B, h1.T, h2.T, lev.T, v1.T)
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[:, :, None])[:, :, 0]
    z = rng.standard_normal(rhs.shape)
    noise = np.linalg.solve(np.swapaxes(L, 1, 2), z[:, :, None])[:, :, 0]
    return (mean + noise).T


def update_factors_gibbs(y_t, B, h1_t, h2_t, eta1_t, theta, rng):
    """Gibbs draw of the factors at one period. Pass ``eta1_t=None`` for
    the first period, which has no leverage term.
    """
    y_t = np.asarray(y_t, dtype=float)
    v1 = np.exp(np.asarray(h1_t, dtype=float))
    lev = np.zeros_like(y_t)
    if eta1_t is not None:
        rho = np.array([prm.rho for prm in theta.idio])
        tau = np.array([prm.tau for prm in theta.idio])
        lev = rho / tau * np.exp(0.5 * np.asarray(h1_t)) * np.asarray(eta1_t)
        v1 = v1 * (1.0 - rho**2)
    prec, rhs = factor_posterior(
        y_t[None], np.asarray(B), np.asarray(h1_t)[None],
        np.asarray(h2_t, dtype=float)[None], lev[None], v1[None],
    )  # fmt: skip
    return _chol_draw(prec[0], rhs[0], rng)


# %% Interweaving and shrinkage


def rescale_factor(B, f, h2, j, c):
    """Scale column ``j`` of the loadings by ``c`` and compensate in the
    factor and its log-variance, leaving B f unchanged. Returns new arrays.
    """
    B, f, h2 = np.array(B, dtype=float), np.array(f, dtype=float), np.array(h2)
    B[:, j] *= c
    f[j] /= c
    h2[j] -= 2.0 * math.log(abs(c))
    return B, f, h2


def interweave_log_target(mu, h_star, prm, bstar, var_diag, var_below):
    """The part of the log target of the factor level ``mu`` that the
    proposal does not account for: implied prior of mu, the initial
    log-variance, and the scaled loadings below the diagonal.
    """
    lp = 0.5 * mu - math.exp(mu) / (2.0 * var_diag)
    lp += float(gauss_logpdf(h_star[0], mu, stationary_variance(prm)))
    if len(bstar):
        lp += float(np.sum(gauss_logpdf(bstar, 0.0, var_below * math.exp(-mu))))
    return lp


def deep_interweave(B, f, h2, fac, prior, rng, aux_variance=1e8, shrink=None):
    """Deep interweaving: for each factor, move to the parameterisation
    where the loading diagonal is one and the factor volatility has level
    mu = log(B_jj**2), update mu by Metropolis-Hastings, and transform
    back. Returns ``(B, f, h2, accepted)`` with a boolean per factor.
    Factors with a vanishing diagonal loading are skipped. A rejected
    move returns the input arrays themselves.
    """
    B, f, h2 = np.asarray(B), np.asarray(f), np.asarray(h2)
    k = B.shape[1]
    accepted = np.zeros(k, dtype=bool)
    for j in range(k):
        b_jj = B[j, j]
        if not abs(b_jj) >= 1e-12:
            logger.warning(f"Skipping interweaving for factor {j + 1}: B_jj ~ 0")
            continue
        prm = fac[j]
        mu_old = math.log(b_jj**2)
        h_star = h2[j] + mu_old
        bstar = B[j + 1 :, j] / b_jj
        if shrink is not None and prior.kind == "ng":
            var = shrink.sigma2[j:, j]
        else:
            var = np.full(B.shape[0] - j, prior.b0)

        T = h_star.shape[0]
        one_phi = 1.0 - prm.phi
        denom = (T - 1) + 1.0 / aux_variance
        ends = (h_star[-1] - prm.phi * h_star[0]) / one_phi
        A = (np.sum(h_star[1:-1]) + ends) / denom
        var_prop = prm.tau2 / one_phi**2 / denom
        mu_new = A + math.sqrt(var_prop) * rng.standard_normal()

        aux_sd2 = aux_variance * prm.tau2 / one_phi**2
        log_ratio = (
            interweave_log_target(mu_new, h_star, prm, bstar, var[0], var[1:])
            - interweave_log_target(mu_old, h_star, prm, bstar, var[0], var[1:])
            + float(gauss_logpdf(mu_old, 0.0, aux_sd2))
            - float(gauss_logpdf(mu_new, 0.0, aux_sd2))
        )
        if _mh_accept(log_ratio, rng):
            c = math.copysign(math.exp(0.5 * mu_new), b_jj) / b_jj
            B, f, h2 = rescale_factor(B, f, h2, j, c)
            accepted[j] = True
    return B, f, h2, accepted


def update_shrinkage(B, shrink, rng):
    """Gibbs draws of the normal-gamma hyperparameters: first lambda2 for
    each series, then the loading variances sigma2 (from a GIG law, with
    the squared loading clamped at 1e-10).
    """
    B = np.asarray(B)
    p, k = B.shape
    sigma2 = shrink.sigma2.copy()
    lambda2 = shrink.lambda2.copy()
    for s in range(p):
        ks = min(s + 1, k)
        shape = shrink.c[s] + shrink.a[s] * ks
        rate = shrink.d[s] + 0.5 * float(np.sum(sigma2[s, :ks]))
        lambda2[s] = rng.gamma(shape, 1.0 / rate)
        for j in range(ks):
            b2 = max(B[s, j] ** 2, 1e-10)
            sigma2[s, j] = gig_rvs(shrink.a[s] - 0.5, lambda2[s], b2, rng)
    return ShrinkState(sigma2, lambda2, shrink.a, shrink.c, shrink.d)


# %% Sweeps


def _series_models(state):
    bf = state.factor_means()
    models1 = [SvSeriesModel(prm, bf[s]) for s, prm in enumerate(state.theta.idio)]
    models2 = [SvSeriesModel(prm) for prm in state.theta.fac]
    return models1, models2


def _annotate(func, series, sweep):
    def wrapped(*args):
        try:
            return func(*args)
        except ParticleCollapseError as err:
            raise err.at(series=series, sweep=sweep) from None

    return wrapped


def _refresh_series(state, config, rng, models, obs, paths, names):
    """Run conditional SMC for each series and draw new reference paths."""
    kernel = csmc_ancestor_sampling if config.scheme == "pgas" else conditional_smc
    N = config.N

    def run(model, y, path, stream):
        ref = ReferenceTrajectory.pinned(path, N)
        sys = kernel(model, y, N, ref, stream)
        new = draw_reference(sys, stream).path
        return sys, new

    streams = rng.spawn(len(models))
    jobs = [
        (_annotate(run, name, state.sweep), (m, y, path, st))
        for m, y, path, st, name in zip(models, obs, paths, streams, names)
    ]
    return map_series(lambda fn, args: fn(*args), jobs, config.threads)


def _series_names(state):
    names1 = [f"y{s + 1}" for s in range(state.p)]
    names2 = [f"f{j + 1}" for j in range(state.k)]
    return names1, names2


def _update_params(state, config, rng, with_tau2):
    """Steps for the SV parameters of all series, then loadings, shrinkage,
    interweaving and factors.
    """
    theta, lat, y = state.theta, state.latents, state.y
    adapt = state.sweep < config.burnin
    bf = state.factor_means()

    def idio_step(s, stream):
        prm, h = theta.idio[s], lat.h1[s]
        ctx = ObsContext(y[s], bf[s])
        prm, a_mu = update_mu_pg(h, prm, ctx, stream)
        prm, a_phi = update_phi_pg(h, prm, ctx, stream, config.phi_correction)
        kernel = state.rho_kernels[s]
        prm, a_rho, info = update_rho_hmc(h, prm, ctx, kernel, stream, adapt)
        if info.get("divergent"):
            logger.warning(f"Divergent rho move for y{s + 1} in sweep {state.sweep}")
        a_tau = False
        if with_tau2:
            prm, a_tau = update_tau2_pg(h, prm, ctx, stream)
        return prm, (a_mu, a_phi, a_rho, a_tau)

    def fac_step(j, stream):
        prm, h = theta.fac[j], lat.h2[j]
        prm, a_phi = update_phi_pg(h, prm, None, stream, config.phi_correction)
        a_tau = False
        if with_tau2:
            prm, a_tau = update_tau2_pg(h, prm, None, stream)
        return prm, (a_phi, a_tau)

    p, k = state.p, state.k
    streams = rng.spawn(p + k)
    res1 = map_series(idio_step, [(s, streams[s]) for s in range(p)], config.threads)
    res2 = map_series(fac_step, [(j, streams[p + j]) for j in range(k)], config.threads)
    theta.idio = [r[0] for r in res1]
    theta.fac = [r[0] for r in res2]
    flags1 = np.array([r[1] for r in res1], dtype=bool).reshape(p, 4)
    flags2 = np.array([r[1] for r in res2], dtype=bool).reshape(k, 2)
    state.accepts["mu"] = flags1[:, 0]
    state.accepts["phi"] = flags1[:, 1]
    state.accepts["rho"] = flags1[:, 2]
    state.accepts["phi_f"] = flags2[:, 0]
    if with_tau2:
        state.accepts["tau2"] = flags1[:, 3]
        state.accepts["tau2_f"] = flags2[:, 1]

    # Loadings, with the shrinkage hyperparameters refreshed first
    prior = config.prior
    if prior.kind == "ng":
        theta.shrink = update_shrinkage(theta.B, theta.shrink, rng)
    B = np.array(theta.B)
    for s in range(p):
        ks = theta.loadings.free_count(s)
        if prior.kind == "ng":
            prior_var = theta.shrink.sigma2[s, :ks]
        else:
            prior_var = np.full(ks, prior.b0)
        eta = volatility_innovations(lat.h1[s], theta.idio[s])
        B[s, :ks] = update_loadings_gibbs(
            lat.f, y[s], lat.h1[s], eta, theta.idio[s], prior_var, rng
        )

    f, h2 = lat.f, lat.h2
    if config.interweave:
        B, f, h2, acc = deep_interweave(
            B, f, h2, theta.fac, prior, rng, config.aux_variance, theta.shrink
        )
        state.accepts["interweave"] = acc
    theta.loadings = FactorLoadings(B)
    lat.h2 = h2
    lat.f = draw_factors(y, theta.B, lat.h1, h2, theta, rng)


def _refresh_latents(state, config, rng):
    """Conditional SMC and path draws for all idiosyncratic, then all
    factor series.
    """
    lat = state.latents
    models1, models2 = _series_models(state)
    names1, names2 = _series_names(state)
    old = np.vstack([lat.h1, lat.h2])
    res1 = _refresh_series(state, config, rng, models1, state.y, lat.h1, names1)
    state.systems1 = [r[0] for r in res1]
    lat.h1 = np.array([r[1] for r in res1])
    res2 = _refresh_series(state, config, rng, models2, lat.f, lat.h2, names2)
    state.systems2 = [r[0] for r in res2]
    lat.h2 = np.array([r[1] for r in res2])
    state.ref_change = np.mean(np.vstack([lat.h1, lat.h2]) != old, axis=1)


def pg_sweep(state, config, rng):
    """One sweep of particle Gibbs. With ``config.scheme == "pgas"`` the
    latent paths are refreshed with ancestor sampling. The state is
    updated in place and returned.
    """
    state.accepts = {}
    if not config.fixed_parameters:
        _update_params(state, config, rng, with_tau2=True)
    _refresh_latents(state, config, rng)
    state.sweep += 1
    return state


def pm_log_ratio(logZ_new, logZ_old, proposal, score_new, tau2_old):
    """Log acceptance ratio of a pseudo-marginal Langevin move of tau2, on
    the log scale (so the prior includes the Jacobian).
    """
    tau2_new = proposal.tau2
    return (
        logZ_new
        - logZ_old
        + proposal.log_reverse(score_new)
        - proposal.log_forward
        + tau2_logprior(tau2_new)
        + proposal.log_tau2_new
        - tau2_logprior(tau2_old)
        - proposal.log_tau2
    )


def _pm_tau2_step(model, obs, sys_old, adapter, config, rng, adapt):
    """Pseudo-marginal update of tau2 for one series. Returns
    ``(prm, sys, path, accepted)``; ``path`` is None when rejected.
    """
    prm = model.prm
    score = score_from_system(model, obs, sys_old, config.lam)
    score += tau2_logprior_grad(prm.tau2)
    proposal = langevin_proposal_tau2(prm.tau2, score, adapter.eps, rng)
    prm_new = prm.replace(tau2=proposal.tau2)
    if not prm_new.is_valid:
        return prm, sys_old, None, False
    model_new = SvSeriesModel(prm_new, model.mean)
    sys_new = bootstrap_pf(model_new, obs, config.N, rng)
    score_new = score_from_system(model_new, obs, sys_new, config.lam)
    score_new += tau2_logprior_grad(prm_new.tau2)
    log_ratio = pm_log_ratio(sys_new.logZ, sys_old.logZ, proposal, score_new, prm.tau2)
    if adapt:
        adapter.update(0.0 if math.isnan(log_ratio) else math.exp(min(0.0, log_ratio)))
    if _mh_accept(log_ratio, rng):
        return prm_new, sys_new, draw_reference(sys_new, rng).path, True
    return prm, sys_old, None, False


def _pm_step(state, config, rng, which):
    adapt = state.sweep < config.burnin
    models1, models2 = _series_models(state)
    names1, names2 = _series_names(state)
    lat = state.latents
    if which == "idio":
        models, obs, systems = models1, state.y, state.systems1
        adapters, paths, names = state.langevin1, lat.h1, names1
    else:
        models, obs, systems = models2, lat.f, state.systems2
        adapters, paths, names = state.langevin2, lat.h2, names2

    streams = rng.spawn(len(models))
    jobs = [
        (
            _annotate(_pm_tau2_step, names[i], state.sweep),
            (models[i], obs[i], systems[i], adapters[i], config, streams[i], adapt),
        )
        for i in range(len(models))
    ]
    results = map_series(lambda fn, args: fn(*args), jobs, config.threads)
    params = [r[0] for r in results]
    for i, (_, sys, path, _) in enumerate(results):
        systems[i] = sys
        if path is not None:
            paths[i] = path
    return params, np.array([r[3] for r in results], dtype=bool)


def mixed_sweep(state, config, rng):
    """One sweep of the mixed sampler: pseudo-marginal Langevin moves of
    tau2 for every idiosyncratic and then every factor series, followed by
    the particle Gibbs steps for everything else. The paths drawn in an
    accepted pseudo-marginal move are the references of the following
    conditional SMC.
    """
    state.accepts = {}
    if not config.fixed_parameters:
        params, acc = _pm_step(state, config, rng, "idio")
        state.theta.idio = params
        state.accepts["tau2"] = acc
        params, acc = _pm_step(state, config, rng, "fac")
        state.theta.fac = params
        state.accepts["tau2_f"] = acc
        _update_params(state, config, rng, with_tau2=False)
    _refresh_latents(state, config, rng)
    state.sweep += 1
    return state


SWEEPS = {"pg": pg_sweep, "pgas": pg_sweep, "mixed": mixed_sweep}


# %% Sign identification


def flip_signs(B, f=None):
    """Flip each factor whose diagonal loading is negative. Returns
    ``(B, f, flipped, zero)`` with boolean arrays per factor.
    """
    B = np.array(B, dtype=float)
    k = B.shape[1]
    diag = B[np.arange(k), np.arange(k)]
    flipped = diag < 0
    zero = diag == 0
    B[:, flipped] *= -1
    if f is not None:
        f = np.array(f, dtype=float)
        f[flipped] *= -1
    return B, f, flipped, zero


def identify_signs(draws):
    """Resolve the sign of each factor per draw so that the diagonal
    loadings are positive. Loading columns and stored factor paths are
    flipped together, which leaves B f unchanged. Draws with a zero pivot
    are left as they are.
    """
    out = draws.copy()
    k = out.k
    zeros = 0
    for i in range(out.size):
        B, _, flipped, zero = flip_signs(out.loadings(i))
        zeros += int(zero.sum())
        out.set_loadings(i, B)
        rows = out.path_rows(i)
        if rows is not None and "f" in out.paths:
            out.paths["f"][rows, flipped[:k]] *= -1
    if zeros:
        logger.warning(f"{zeros} draws have a zero sign pivot; left unflipped.")
    return out


# %% Draws and parameter inventory


def parameter_names(p, k, prior_kind="normal"):
    """The names of the scalar parameters, in storage order. Loadings are
    listed column by column, without the zero-constrained cells.
    """
    names = []
    for key in ("mu", "phi", "tau2", "rho"):
        names += [f"{key}_{s + 1}" for s in range(p)]
    for key in ("phi", "tau2"):
        names += [f"{key}_f{j + 1}" for j in range(k)]
    for j in range(k):
        names += [f"B_{s + 1}_{j + 1}" for s in range(j, p)]
    if prior_kind == "ng":
        for j in range(k):
            names += [f"sigma2_{s + 1}_{j + 1}" for s in range(j, p)]
        names += [f"lambda2_{s + 1}" for s in range(p)]
    return names


def theta_vector(theta, prior_kind="normal"):
    """Flatten the parameters in the order of ``parameter_names()``."""
    vec = []
    for key in ("mu", "phi", "tau2", "rho"):
        vec += [getattr(prm, key) for prm in theta.idio]
    for key in ("phi", "tau2"):
        vec += [getattr(prm, key) for prm in theta.fac]
    mask = loading_mask(*theta.B.shape)
    vec += list(theta.B.T[mask.T])
    if prior_kind == "ng":
        vec += list(theta.shrink.sigma2.T[mask.T])
        vec += list(theta.shrink.lambda2)
    return np.array(vec, dtype=float)


def theta_from_vector(vec, p, k, prior=None):
    """Rebuild a Theta from a flat vector."""
    prior = prior or PriorSettings()
    vec = np.asarray(vec, dtype=float)
    mu, phi, tau2, rho = vec[: 4 * p].reshape(4, p)
    phi_f, tau2_f = vec[4 * p : 4 * p + 2 * k].reshape(2, k)
    i = 4 * p + 2 * k
    mask = loading_mask(p, k)
    n = int(mask.sum())
    Bt = np.zeros((k, p))
    Bt[mask.T] = vec[i : i + n]
    shrink = None
    if prior.kind == "ng":
        s2t = np.full((k, p), np.nan)
        s2t[mask.T] = vec[i + n : i + 2 * n]
        lambda2 = vec[i + 2 * n : i + 2 * n + p]
        shrink = ShrinkState(
            s2t.T,
            lambda2,
            prior.per_series("a", p).copy(),
            prior.per_series("c", p).copy(),
            prior.per_series("d", p).copy(),
        )
    idio = [SvParams(*vals) for vals in zip(mu, phi, tau2, rho)]
    fac = [SvParams(0.0, a, b) for a, b in zip(phi_f, tau2_f)]
    return Theta(idio, fac, FactorLoadings(Bt.T), shrink)


@dataclass
class ChainDraws:
    """The retained draws of a chain.

    * ``names``: parameter names; ``values`` is (M, n_params).
    * ``loglik``, ``logprior``: per-draw conditional log-likelihood and
      log prior.
    * ``accepts``: per update, an (M, n) boolean array of acceptances.
    * ``paths``: thinned latent paths "h1", "h2" and "f", each of shape
      (M_thin, rows, T), stored for the draws in ``path_index``.
    """

    p: int
    k: int
    prior_kind: str
    names: list
    values: np.ndarray
    loglik: np.ndarray
    logprior: np.ndarray
    accepts: dict
    paths: dict
    path_index: np.ndarray

    @property
    def size(self):
        return self.values.shape[0]

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def _loading_columns(self):
        return [i for i, n in enumerate(self.names) if n.startswith("B_")]

    def loadings(self, i):
        B = np.zeros((self.p, self.k))
        mask = loading_mask(self.p, self.k)
        B.T[mask.T] = self.values[i, self._loading_columns()]
        return B

    def set_loadings(self, i, B):
        mask = loading_mask(self.p, self.k)
        self.values[i, self._loading_columns()] = B.T[mask.T]

    def theta(self, i, prior=None):
        prior = prior or PriorSettings(kind=self.prior_kind)
        return theta_from_vector(self.values[i], self.p, self.k, prior)

    def path_rows(self, i):
        hits = np.nonzero(self.path_index == i)[0]
        return int(hits[0]) if len(hits) else None

    def copy(self):
        return ChainDraws(
            self.p,
            self.k,
            self.prior_kind,
            list(self.names),
            self.values.copy(),
            self.loglik.copy(),
            self.logprior.copy(),
            {key: val.copy() for key, val in self.accepts.items()},
            {key: val.copy() for key, val in self.paths.items()},
            self.path_index.copy(),
        )


class RunningMoments:
    """Streaming mean and standard deviation (Welford)."""

    __slots__ = ("n", "mean", "_m2")

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self._m2 = np.zeros(shape)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (x - self.mean)

    @property
    def sd(self):
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self._m2 / (self.n - 1))


# %% Running a chain


def initial_state(y, k, config, rng):
    """Build a starting state: principal-component loadings rotated to
    lower-triangular form, least-squares factors, and latent paths drawn
    from bootstrap particle filters.
    """
    y = np.asarray(y, dtype=float)
    p, T = y.shape
    if not 1 <= k <= p:
        raise ValueError(f"Need 1 <= k <= p, got k={k}, p={p}")
    cov = y @ y.T / T
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    L = evecs[:, order] * np.sqrt(np.maximum(evals[order], 1e-8))
    _, R = np.linalg.qr(L.T)
    B = np.tril(R.T)
    diag = np.diag(B).copy()
    sign = np.where(diag < 0, -1.0, 1.0)
    B = B * sign
    for j in range(k):
        if abs(B[j, j]) < 0.1:
            B[j, j] = 0.1
    f = np.linalg.lstsq(B, y, rcond=None)[0]
    resid = y - B @ f

    idio = [
        SvParams(math.log(max(float(np.var(resid[s])), 1e-6)), 0.95, 0.05, 0.0)
        for s in range(p)
    ]
    fac = [SvParams(0.0, 0.95, 0.05) for _ in range(k)]
    shrink = None
    if config.prior.kind == "ng":
        shrink = ShrinkState.initial(p, k, config.prior)
    theta = Theta(idio, fac, FactorLoadings(B), shrink)

    bf = B @ f
    systems1, systems2, h1, h2 = [], [], [], []
    for s in range(p):
        sys = bootstrap_pf(SvSeriesModel(idio[s], bf[s]), y[s], config.N, rng)
        systems1.append(sys)
        h1.append(draw_reference(sys, rng).path)
    for j in range(k):
        sys = bootstrap_pf(SvSeriesModel(fac[j]), f[j], config.N, rng)
        systems2.append(sys)
        h2.append(draw_reference(sys, rng).path)

    if config.hmc.kernel == "nuts":
        kernels = [
            NutsKernel(config.hmc.target_accept, config.hmc.max_depth) for _ in range(p)
        ]
    else:
        kernels = [config.hmc] * p
    adapters1 = [
        StepSizeAdapter(config.langevin_eps, config.langevin_target) for _ in range(p)
    ]
    adapters2 = [
        StepSizeAdapter(config.langevin_eps, config.langevin_target) for _ in range(k)
    ]
    latents = LatentState(np.array(h1), np.array(h2), f)
    return ChainState(
        y, theta, latents, systems1, systems2, kernels, adapters1, adapters2
    )


RunResult = namedtuple(
    "RunResult", ["draws", "latent_mean", "latent_sd", "runtime", "state"]
)
RunResult.__doc__ = """The result of ``run_chain()``: the ChainDraws, dicts
with the posterior mean and sd of the latent paths "h1", "h2" and "f",
the runtime in seconds, and the final ChainState."""


def run_chain(y, k, config, state=None):
    """Run a chain for ``config.iters`` sweeps and return a RunResult.
    All randomness flows from ``config.seed``.
    """
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    if state is None:
        state = initial_state(y, k, config, rng)
    p, T = y.shape
    sweep_fn = SWEEPS[config.scheme]
    prior = config.prior
    names = parameter_names(p, k, prior.kind)

    M = config.iters - config.burnin
    values = np.empty((M, len(names)))
    loglik = np.empty(M)
    logprior = np.empty(M)
    accepts = {}
    n_paths = (M + config.thin - 1) // config.thin
    paths = {
        "h1": np.empty((n_paths, p, T)),
        "h2": np.empty((n_paths, k, T)),
        "f": np.empty((n_paths, k, T)),
    }
    path_index = np.arange(0, M, config.thin)
    moments = {
        "h1": RunningMoments((p, T)),
        "h2": RunningMoments((k, T)),
        "f": RunningMoments((k, T)),
    }
    counts = {}

    logger.info(
        f"Running {config.scheme} sampler: p={p}, k={k}, T={T}, N={config.N}, "
        f"{config.iters} sweeps ({config.burnin} burn-in)"
    )
    for it in range(config.iters):
        if it == config.burnin:
            _freeze_adaptation(state)
        sweep_fn(state, config, rng)
        for key, acc in state.accepts.items():
            total = counts.setdefault(key, np.zeros(len(acc)))
            total += acc
        if config.log_every and (it + 1) % config.log_every == 0:
            rates = ", ".join(
                f"{key}={np.mean(val) / (it + 1):.2f}" for key, val in counts.items()
            )
            logger.info(f"Sweep {it + 1}/{config.iters}: acceptance {rates}")
        if it < config.burnin:
            continue

        i = it - config.burnin
        theta, lat = state.theta, state.latents
        values[i] = theta_vector(theta, prior.kind)
        loglik[i] = conditional_loglik(y, lat, theta)
        logprior[i] = prior_logdensity(theta, prior)
        for key, acc in state.accepts.items():
            if key not in accepts:
                accepts[key] = np.zeros((M, len(acc)), dtype=bool)
            accepts[key][i] = acc
        _, f_signed, _, _ = flip_signs(theta.B, lat.f)
        moments["h1"].add(lat.h1)
        moments["h2"].add(lat.h2)
        moments["f"].add(f_signed)
        if i % config.thin == 0:
            row = i // config.thin
            paths["h1"][row] = lat.h1
            paths["h2"][row] = lat.h2
            paths["f"][row] = lat.f

    runtime = time.perf_counter() - t0
    draws = ChainDraws(
        p, k, prior.kind, names, values, loglik, logprior, accepts, paths, path_index
    )
    logger.info(f"Finished {config.iters} sweeps in {runtime:.1f} s")
    return RunResult(
        draws,
        {key: m.mean for key, m in moments.items()},
        {key: m.sd for key, m in moments.items()},
        runtime,
        state,
    )


def _freeze_adaptation(state):
    for kernel in state.rho_kernels:
        if isinstance(kernel, NutsKernel):
            kernel.finish_adaptation()
    for adapter in state.langevin1 + state.langevin2:
        adapter.freeze()
