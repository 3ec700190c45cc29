"""
This module implements particle estimates of the score (the gradient of
the log-likelihood) and the one-step Langevin proposal for tau2 that the
mixed sampler uses.
"""

import math

import numpy as np

from ._smc import bootstrap_pf


DEFAULT_LAMBDA = 0.95


class ScoreAccumulator:
    """Running state of the shrinkage score recursion.

    Each particle carries a statistic ``m``. At every period it is
    rebuilt from its ancestor's statistic, shrunk towards the previous
    score estimate ``S`` by ``1 - lam``, plus the gradients of the
    measurement and transition log-densities. ``S`` is the weighted mean
    of ``m``. With ``lam=1`` there is no shrinkage.
    """

    __slots__ = ("m", "S", "lam")

    def __init__(self, lam=DEFAULT_LAMBDA):
        if not 0 < lam <= 1:
            raise ValueError(f"ScoreAccumulator needs lam in (0, 1], got {lam!r}")
        self.lam = float(lam)
        self.m = None
        self.S = 0.0

    def update(self, grad, weights, ancestors=None):
        """Advance one period. ``ancestors`` is None at the first period."""
        grad = np.asarray(grad, dtype=float)
        if ancestors is None:
            m = grad
        else:
            m = self.lam * self.m[ancestors] + (1.0 - self.lam) * self.S + grad
        if not np.all(np.isfinite(m)):
            raise FloatingPointError("Non-finite score statistic.")
        self.m = m
        self.S = weights @ m
        return self.S


def score_from_system(model, obs, sys, lam=DEFAULT_LAMBDA):
    """Apply the score recursion to a stored particle system (from any of
    the filters) and return the score estimate.
    """
    obs = np.asarray(obs, dtype=float)
    acc = ScoreAccumulator(lam)
    h = sys.particles[:, 0]
    grad = model.grad_measurement(0, obs[0], h, None) + model.grad_initial(h)
    acc.update(grad, sys.normweights[:, 0])
    for t in range(1, sys.T):
        a = sys.ancestors[:, t - 1]
        h_prev = sys.particles[a, t - 1]
        h = sys.particles[:, t]
        grad = model.grad_measurement(t, obs[t], h, h_prev) + model.grad_transition(
            h, h_prev, t
        )
        acc.update(grad, sys.normweights[:, t], a)
    return acc.S


def estimate_score(model, obs, N, lam, rng):
    """Run a bootstrap filter and estimate the score alongside it.
    Returns ``(score, logZ)``.
    """
    if not 0 < lam <= 1:
        raise ValueError(f"estimate_score() needs lam in (0, 1], got {lam!r}")
    sys = bootstrap_pf(model, obs, N, rng)
    return score_from_system(model, obs, sys, lam), sys.logZ


# %% Langevin proposal


def tau2_logprior_grad(tau2):
    """Gradient of log p(tau2) + log(tau2) with respect to log(tau2), for
    the half-Cauchy prior on tau.
    """
    return 0.5 - tau2 / (1.0 + tau2)


def _normal_logpdf(x, mean, sd):
    return -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * ((x - mean) / sd) ** 2


class LangevinProposal:
    """A proposed move of log(tau2) by one Langevin step. ``log_forward``
    is the log-density of the forward move. The reverse density depends on
    the gradient at the proposal, so it is a method.
    """

    __slots__ = ("log_tau2", "log_tau2_new", "eps", "log_forward")

    def __init__(self, log_tau2, log_tau2_new, eps, log_forward):
        self.log_tau2 = log_tau2
        self.log_tau2_new = log_tau2_new
        self.eps = eps
        self.log_forward = log_forward

    @property
    def tau2(self):
        return math.exp(self.log_tau2_new)

    def log_reverse(self, score_new):
        mean = self.log_tau2_new + 0.5 * self.eps**2 * score_new
        return _normal_logpdf(self.log_tau2, mean, self.eps)


def langevin_proposal_tau2(tau2, score, eps, rng, momentum=None):
    """Propose a new tau2 with one Langevin step on log(tau2):
    ``theta' = theta + eps**2 / 2 * score + eps * r`` with ``r ~ N(0, 1)``.

    * ``score``: gradient of the log target with respect to log(tau2),
      i.e. the likelihood score plus ``tau2_logprior_grad(tau2)``.
    * ``momentum``: fixes ``r`` instead of drawing it.
    """
    if not (tau2 > 0 and math.isfinite(tau2)):
        raise ValueError(f"langevin_proposal_tau2() needs tau2 > 0, got {tau2!r}")
    if not eps > 0:
        raise ValueError(f"langevin_proposal_tau2() needs eps > 0, got {eps!r}")
    if not math.isfinite(score):
        msg = f"langevin_proposal_tau2() needs a finite score, got {score!r}"
        raise ValueError(msg)
    r = rng.standard_normal() if momentum is None else float(momentum)
    theta = math.log(tau2)
    mean = theta + 0.5 * eps**2 * score
    theta_new = mean + eps * r
    return LangevinProposal(theta, theta_new, eps, _normal_logpdf(theta_new, mean, eps))


class StepSizeAdapter:
    """Robbins-Monro adaptation of the log step size towards a target
    acceptance rate. Adaptation stops with ``freeze()``.
    """

    __slots__ = ("log_eps", "target", "count", "frozen")

    def __init__(self, eps=0.1, target=0.5):
        self.log_eps = math.log(eps)
        self.target = target
        self.count = 0
        self.frozen = False

    @property
    def eps(self):
        return math.exp(self.log_eps)

    def update(self, accept_prob):
        if self.frozen:
            return
        self.count += 1
        gain = self.count**-0.6
        self.log_eps += gain * (accept_prob - self.target)
        self.log_eps = min(max(self.log_eps, -12.0), 2.0)

    def freeze(self):
        self.frozen = True
