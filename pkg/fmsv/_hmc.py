"""
This module implements Hamiltonian Monte Carlo: the leapfrog integrator,
a fixed-length HMC step, and the No-U-Turn sampler with dual averaging
of the step size.

Targets are given as a function ``logp_grad(x)`` returning the log
density and its gradient. ``x`` can be a float or a 1D array.
"""

import math

import numpy as np


def _kinetic(r):
    return 0.5 * float(np.dot(r, r))


def leapfrog(x, r, grad, eps, logp_grad):
    """One leapfrog step. Returns ``(x, r, logp, grad)`` at the new point."""
    r_half = r + 0.5 * eps * grad
    x_new = x + eps * r_half
    logp_new, grad_new = logp_grad(x_new)
    r_new = r_half + 0.5 * eps * grad_new
    return x_new, r_new, logp_new, grad_new


def _momentum(rng, x):
    return rng.standard_normal() if np.ndim(x) == 0 else rng.standard_normal(len(x))


def _finite(*values):
    return all(np.all(np.isfinite(v)) for v in values)


def hmc_step(x, logp_grad, eps, n_steps, rng):
    """One HMC update with ``n_steps`` leapfrog steps of size ``eps``.
    Returns ``(x, accepted, info)``. A non-finite trajectory is rejected
    and flagged in ``info["divergent"]``.
    """
    logp, grad = logp_grad(x)
    r = _momentum(rng, x)
    h0 = logp - _kinetic(r)
    x_new, r_new, logp_new, grad_new = x, r, logp, grad
    for _ in range(n_steps):
        x_new, r_new, logp_new, grad_new = leapfrog(
            x_new, r_new, grad_new, eps, logp_grad
        )
        if not _finite(logp_new, grad_new):
            return x, False, {"divergent": True, "accept_prob": 0.0}
    log_ratio = logp_new - _kinetic(r_new) - h0
    accept_prob = math.exp(min(0.0, log_ratio))
    if n_steps == 0 or rng.random() < accept_prob:
        return x_new, True, {"divergent": False, "accept_prob": accept_prob}
    return x, False, {"divergent": False, "accept_prob": accept_prob}


class _Tree:
    __slots__ = (
        "x_minus",
        "r_minus",
        "g_minus",
        "x_plus",
        "r_plus",
        "g_plus",
        "x_prop",
        "logp_prop",
        "g_prop",
        "n",
        "ok",
        "alpha",
        "n_alpha",
        "divergent",
    )


class NutsKernel:
    """The No-U-Turn sampler with dual averaging of the step size.

    * ``target_accept``: the acceptance statistic dual averaging aims for.
    * ``max_depth``: the maximum tree depth.
    * ``eps``: the initial step size. If None, a reasonable value is
      searched on the first step.

    The step size adapts on every ``step(..., adapt=True)``. Calling
    ``finish_adaptation()`` fixes it at the averaged value.
    """

    max_delta_h = 1000.0

    def __init__(self, target_accept=0.8, max_depth=10, eps=None):
        if not 0 < target_accept < 1:
            msg = f"NUTS target_accept must be in (0, 1), got {target_accept}"
            raise ValueError(msg)
        if max_depth < 1:
            raise ValueError(f"NUTS max_depth must be >= 1, got {max_depth}")
        self.target_accept = target_accept
        self.max_depth = int(max_depth)
        self.eps = eps
        # Dual averaging state
        self.gamma = 0.05
        self.t0 = 10.0
        self.kappa = 0.75
        self._m = 0
        self._hbar = 0.0
        self._log_eps_bar = 0.0
        self._mu = None

    def find_reasonable_eps(self, x, logp_grad, rng):
        """Double or halve the step size until the acceptance probability
        of one leapfrog step crosses 0.5.
        """
        logp, grad = logp_grad(x)
        eps = 1.0
        r = _momentum(rng, x)

        def log_ratio(eps):
            _, r1, logp1, grad1 = leapfrog(x, r, grad, eps, logp_grad)
            if not _finite(logp1, grad1):
                return -np.inf
            return logp1 - _kinetic(r1) - logp + _kinetic(r)

        lr = log_ratio(eps)
        direction = 1 if lr > math.log(0.5) else -1
        for _ in range(100):
            if direction * lr <= -direction * math.log(2.0):
                break
            eps *= 2.0**direction
            lr = log_ratio(eps)
        return eps

    def finish_adaptation(self):
        if self._m > 0:
            self.eps = math.exp(self._log_eps_bar)

    def step(self, x, logp_grad, rng, adapt=False):
        """One NUTS transition. Returns ``(x, accepted, info)``, where
        ``accepted`` tells whether the state moved.
        """
        if self.eps is None:
            self.eps = self.find_reasonable_eps(x, logp_grad, rng)
        if self._mu is None:
            self._mu = math.log(10 * self.eps)

        logp, grad = logp_grad(x)
        r0 = _momentum(rng, x)
        joint0 = logp - _kinetic(r0)
        log_u = joint0 - rng.exponential()

        x_minus = x_plus = x_new = x
        r_minus = r_plus = r0
        g_minus = g_plus = grad
        n, ok, depth = 1, True, 0
        alpha, n_alpha, divergent = 0.0, 1, False
        moved = False

        while ok and depth < self.max_depth:
            direction = 1 if rng.random() < 0.5 else -1
            if direction == -1:
                tree = self._build(
                    x_minus, r_minus, g_minus, log_u, -1, depth, joint0, logp_grad, rng
                )
                x_minus, r_minus, g_minus = tree.x_minus, tree.r_minus, tree.g_minus
            else:
                tree = self._build(
                    x_plus, r_plus, g_plus, log_u, 1, depth, joint0, logp_grad, rng
                )
                x_plus, r_plus, g_plus = tree.x_plus, tree.r_plus, tree.g_plus
            if tree.ok and rng.random() < min(1.0, tree.n / n):
                x_new = tree.x_prop
                moved = True
            n += tree.n
            ok = tree.ok and self._no_uturn(x_minus, x_plus, r_minus, r_plus)
            alpha, n_alpha = tree.alpha, tree.n_alpha
            divergent = divergent or tree.divergent
            depth += 1

        accept_stat = alpha / max(n_alpha, 1)
        if adapt:
            self._adapt(accept_stat)
        info = {"accept_prob": accept_stat, "depth": depth, "divergent": divergent}
        return x_new, moved, info

    def _adapt(self, accept_stat):
        self._m += 1
        m = self._m
        w = 1.0 / (m + self.t0)
        self._hbar = (1 - w) * self._hbar + w * (self.target_accept - accept_stat)
        log_eps = self._mu - math.sqrt(m) / self.gamma * self._hbar
        eta = m**-self.kappa
        self._log_eps_bar = eta * log_eps + (1 - eta) * self._log_eps_bar
        self.eps = math.exp(log_eps)

    @staticmethod
    def _no_uturn(x_minus, x_plus, r_minus, r_plus):
        dx = x_plus - x_minus
        return np.dot(dx, r_minus) >= 0 and np.dot(dx, r_plus) >= 0

    def _build(self, x, r, grad, log_u, direction, depth, joint0, logp_grad, rng):
        if depth == 0:
            x1, r1, logp1, g1 = leapfrog(x, r, grad, direction * self.eps, logp_grad)
            tree = _Tree()
            tree.x_minus = tree.x_plus = tree.x_prop = x1
            tree.r_minus = tree.r_plus = r1
            tree.g_minus = tree.g_plus = tree.g_prop = g1
            tree.logp_prop = logp1
            tree.n_alpha = 1
            if not _finite(logp1, g1):
                tree.n, tree.ok, tree.alpha, tree.divergent = 0, False, 0.0, True
                return tree
            joint = logp1 - _kinetic(r1)
            tree.n = int(log_u <= joint)
            tree.ok = joint > log_u - self.max_delta_h
            tree.divergent = not tree.ok
            tree.alpha = math.exp(min(0.0, joint - joint0))
            return tree

        tree = self._build(
            x, r, grad, log_u, direction, depth - 1, joint0, logp_grad, rng
        )
        if not tree.ok:
            return tree
        if direction == -1:
            other = self._build(
                tree.x_minus, tree.r_minus, tree.g_minus, log_u, -1, depth - 1,
                joint0, logp_grad, rng,
            )  # fmt: skip
            tree.x_minus, tree.r_minus, tree.g_minus = (
                other.x_minus,
                other.r_minus,
                other.g_minus,
            )
        else:
            other = self._build(
                tree.x_plus, tree.r_plus, tree.g_plus, log_u, 1, depth - 1,
                joint0, logp_grad, rng,
            )  # fmt: skip
            tree.x_plus, tree.r_plus, tree.g_plus = (
                other.x_plus,
                other.r_plus,
                other.g_plus,
            )
        total = tree.n + other.n
        if total > 0 and rng.random() < other.n / total:
            tree.x_prop, tree.logp_prop, tree.g_prop = (
                other.x_prop,
                other.logp_prop,
                other.g_prop,
            )
        tree.n = total
        tree.alpha += other.alpha
        tree.n_alpha += other.n_alpha
        tree.divergent = tree.divergent or other.divergent
        tree.ok = other.ok and self._no_uturn(
            tree.x_minus, tree.x_plus, tree.r_minus, tree.r_plus
        )
        return tree
