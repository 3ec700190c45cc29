"""
This module implements ``fit()``, which runs a chain on a data panel and
bundles the draws with their diagnostics.
"""

from collections import namedtuple

import numpy as np

from ._samplers import SamplerConfig, identify_signs, run_chain
from ._diagnostics import chain_stats, dic_from_draws, summarize


RunOutput = namedtuple(
    "RunOutput",
    [
        "draws",
        "stats",
        "summary",
        "dic",
        "latent_mean",
        "latent_sd",
        "runtime",
        "state",
    ],
)
RunOutput.__doc__ = """The result of ``fit()``. The draws have their factor
signs identified; ``stats`` is a ChainStats (compute time per sweep as
CT), ``summary`` a list of SummaryRow, ``dic`` the DIC of the run."""


def fit(y, config=None, k=1, truth=None):
    """Fit a factor SV model with ``k`` factors to the (p, T) panel ``y``.

    Arguments:

    * ``y``: the observations, p series of length T.
    * ``config``: a ``SamplerConfig`` (default settings if None).
    * ``k``: the number of factors.
    * ``truth``: optional dict of true parameter values for the summary.

    Returns a RunOutput.
    """
    config = SamplerConfig() if config is None else config
    if not isinstance(config, SamplerConfig):
        raise TypeError(f"fit() config must be a SamplerConfig, not {type(config)}")
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError(f"fit() needs a (p, T) panel, got shape {y.shape}")

    result = run_chain(y, k, config)
    draws = identify_signs(result.draws)
    stats = chain_stats(draws, result.runtime / config.iters)
    return RunOutput(
        draws,
        stats,
        summarize(draws, truth),
        dic_from_draws(draws),
        result.latent_mean,
        result.latent_sd,
        result.runtime,
        result.state,
    )
