"""
This module implements chain diagnostics and model comparison: the
integrated autocorrelation time, time-normalised variance, the DIC based
on the conditional likelihood, and posterior summaries.
"""

import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from ._model import logger


def autocorrelation(chain):
    """Empirical autocorrelations of a chain at lags 0..M-1, using the
    biased (1/M) covariance estimate.
    """
    x = np.asarray(chain, dtype=float)
    x = x - x.mean()
    M = len(x)
    n = 1 << (2 * M - 1).bit_length()
    spec = np.fft.rfft(x, n)
    acov = np.fft.irfft(spec * np.conj(spec), n)[:M] / M
    if not acov[0] > 0:
        raise ValueError("Cannot compute autocorrelation: zero variance")
    return acov / acov[0]


def iact(chain):
    """Integrated autocorrelation time ``1 + 2 * sum(rho_t)``, summing the
    autocorrelations up to (not including) the first lag where
    ``|rho_t| < 2 / sqrt(M)``.
    """
    x = np.asarray(chain, dtype=float)
    if x.ndim != 1 or len(x) < 10:
        raise ValueError(f"iact() needs a 1D chain of length >= 10, got {x.shape}")
    if np.all(x == x[0]):
        raise ValueError("iact() got a constant chain: zero variance")
    rho = autocorrelation(x)
    below = np.nonzero(np.abs(rho[1:]) < 2.0 / math.sqrt(len(x)))[0]
    cutoff = below[0] + 1 if len(below) else len(x)
    return float(1.0 + 2.0 * np.sum(rho[1:cutoff]))


def tnv(iact_mean, ct_seconds):
    """Time-normalised variance: the mean IACT times the compute time."""
    if not (iact_mean > 0 and ct_seconds > 0):
        raise ValueError(
            f"tnv() needs positive inputs, got {iact_mean!r} and {ct_seconds!r}"
        )
    return iact_mean * ct_seconds


def dic7(loglik_draws, loglik_at_map):
    """The DIC from conditional log-likelihoods:
    ``-4 * mean(loglik_draws) + 2 * loglik_at_map``.
    """
    draws = np.asarray(loglik_draws, dtype=float)
    if draws.size < 1:
        raise ValueError("dic7() needs at least one draw")
    return float(-4.0 * draws.mean() + 2.0 * loglik_at_map)


def map_index(draws):
    """Index of the retained draw with the largest log-likelihood plus
    log prior.
    """
    return int(np.argmax(draws.loglik + draws.logprior))


def dic_from_draws(draws):
    return dic7(draws.loglik, draws.loglik[map_index(draws)])


# %% Summaries


SummaryRow = namedtuple(
    "SummaryRow",
    ["name", "mean", "sd", "q05", "q50", "q95", "iact", "truth", "in90", "in99"],
)
SummaryRow.__doc__ = """Posterior summary of one parameter. ``truth``,
``in90`` and ``in99`` are None unless a true value was given; the flags
tell whether it lies in the 90% or 99% central credible interval."""


def _safe_iact(chain, name):
    try:
        return iact(chain)
    except ValueError as err:
        logger.debug(f"No IACT for {name}: {err}")
        return math.nan


def summarize(draws, truth=None):
    """Summarize each parameter of a ChainDraws (anything with ``names``
    and ``values``). ``truth`` optionally maps names to true values.
    Returns a list of SummaryRow.
    """
    values = np.asarray(draws.values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("summarize() needs at least one draw")
    truth = truth or {}
    rows = []
    for i, name in enumerate(draws.names):
        x = values[:, i]
        q = np.percentile(x, [0.5, 5, 50, 95, 99.5])
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        iact_val = _safe_iact(x, name) if len(x) >= 10 else math.nan
        true = truth.get(name)
        in90 = in99 = None
        if true is not None:
            in90 = bool(q[1] <= true <= q[3])
            in99 = bool(q[0] <= true <= q[4])
        rows.append(
            SummaryRow(
                name, float(x.mean()), sd, q[1], q[2], q[3], iact_val, true, in90, in99
            )
        )
    return rows


@dataclass
class ChainStats:
    """Efficiency statistics of a run: per-parameter IACT and their mean,
    acceptance rates per update, the compute time per sweep
    (``runtime_seconds``) and TNV.
    """

    iact: dict
    iact_mean: float
    acceptance: dict = field(default_factory=dict)
    tnv: float = math.nan
    runtime_seconds: float = math.nan

    def to_dict(self):
        return {
            "iact": self.iact,
            "iact_mean": self.iact_mean,
            "acceptance": self.acceptance,
            "tnv": self.tnv,
            "runtime_seconds": self.runtime_seconds,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dict(d["iact"]),
            d["iact_mean"],
            dict(d.get("acceptance", {})),
            d.get("tnv", math.nan),
            d.get("runtime_seconds", math.nan),
        )


def chain_stats(draws, runtime_seconds):
    """Compute ChainStats for a ChainDraws, given the compute time per
    sweep. Parameters whose IACT cannot be computed (e.g. constant chains)
    are left out of the mean.
    """
    iacts = {}
    for i, name in enumerate(draws.names):
        iacts[name] = _safe_iact(draws.values[:, i], name)
    finite = [v for v in iacts.values() if math.isfinite(v)]
    if len(finite) < len(iacts):
        logger.warning(f"IACT unavailable for {len(iacts) - len(finite)} parameters")
    iact_mean = float(np.mean(finite)) if finite else math.nan
    acceptance = {
        key: [float(v) for v in np.mean(val, axis=0)]
        for key, val in draws.accepts.items()
    }
    value = math.nan
    if finite and runtime_seconds > 0:
        value = tnv(iact_mean, runtime_seconds)
    return ChainStats(iacts, iact_mean, acceptance, value, runtime_seconds)


ComparisonRow = namedtuple(
    "ComparisonRow", ["label", "time", "iact_mean", "tnv", "rel_tnv"]
)


def compare_runs(stats):
    """Build the efficiency comparison across runs. ``stats`` maps a label
    to ChainStats. Relative TNV is against the smallest TNV.
    """
    if not stats:
        raise ValueError("compare_runs() needs at least one run")
    best = min(s.tnv for s in stats.values())
    return [
        ComparisonRow(label, s.runtime_seconds, s.iact_mean, s.tnv, s.tnv / best)
        for label, s in stats.items()
    ]
