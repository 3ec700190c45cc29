"""
fmsv - Particle MCMC for factor stochastic volatility models with leverage
"""

from ._model import DataError, LOG_ZERO
from ._model import ModelDims, SvParams, FactorLoadings, LatentState, Theta
from ._model import PriorSettings
from ._model import idio_measurement_logdensity, factor_measurement_logdensity
from ._model import transition_logdensity, initial_logdensity
from ._model import prior_logdensity, simulate, conditional_loglik
from ._smc import ParticleCollapseError, SeriesModel, SvSeriesModel
from ._smc import ParticleSystem, ReferenceTrajectory
from ._smc import bootstrap_pf, conditional_smc, csmc_ancestor_sampling
from ._smc import systematic_resample, multinomial_resample
from ._smc import conditional_systematic_resample, sample_trajectory_index
from ._smc import ancestral_trace, draw_reference
from ._score import ScoreAccumulator, StepSizeAdapter
from ._score import estimate_score, score_from_system, langevin_proposal_tau2
from ._hmc import NutsKernel, leapfrog, hmc_step
from ._samplers import SamplerConfig, HmcSettings, ShrinkState, ChainState
from ._samplers import ChainDraws, ObsContext
from ._samplers import update_tau2_pg, update_phi_pg, update_mu_pg, update_rho_hmc
from ._samplers import update_loadings_gibbs, update_factors_gibbs
from ._samplers import deep_interweave, update_shrinkage
from ._samplers import pg_sweep, mixed_sweep, identify_signs
from ._samplers import initial_state, run_chain, parameter_names
from ._diagnostics import ChainStats, iact, tnv, dic7, summarize
from ._diagnostics import chain_stats, compare_runs
from ._config import ConfigError, Design, RunConfig, RunManifest
from ._config import load_config, dump_config, preset
from ._fit import RunOutput, fit
from . import utils


__all__ = [
    "DataError",
    "LOG_ZERO",
    "ModelDims",
    "SvParams",
    "FactorLoadings",
    "LatentState",
    "Theta",
    "PriorSettings",
    "idio_measurement_logdensity",
    "factor_measurement_logdensity",
    "transition_logdensity",
    "initial_logdensity",
    "prior_logdensity",
    "simulate",
    "conditional_loglik",
    "ParticleCollapseError",
    "SeriesModel",
    "SvSeriesModel",
    "ParticleSystem",
    "ReferenceTrajectory",
    "bootstrap_pf",
    "conditional_smc",
    "csmc_ancestor_sampling",
    "systematic_resample",
    "multinomial_resample",
    "conditional_systematic_resample",
    "sample_trajectory_index",
    "ancestral_trace",
    "draw_reference",
    "ScoreAccumulator",
    "StepSizeAdapter",
    "estimate_score",
    "score_from_system",
    "langevin_proposal_tau2",
    "NutsKernel",
    "leapfrog",
    "hmc_step",
    "SamplerConfig",
    "HmcSettings",
    "ShrinkState",
    "ChainState",
    "ChainDraws",
    "ObsContext",
    "update_tau2_pg",
    "update_phi_pg",
    "update_mu_pg",
    "update_rho_hmc",
    "update_loadings_gibbs",
    "update_factors_gibbs",
    "deep_interweave",
    "update_shrinkage",
    "pg_sweep",
    "mixed_sweep",
    "identify_signs",
    "initial_state",
    "run_chain",
    "parameter_names",
    "ChainStats",
    "iact",
    "tnv",
    "dic7",
    "summarize",
    "chain_stats",
    "compare_runs",
    "ConfigError",
    "Design",
    "RunConfig",
    "RunManifest",
    "load_config",
    "dump_config",
    "preset",
    "RunOutput",
    "fit",
    "utils",
]


__version__ = "0.1.0"
