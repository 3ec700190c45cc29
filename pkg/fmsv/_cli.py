"""
This module implements the command line interface, with the commands
``simulate``, ``fit`` and ``diagnose``. Each command writes its files to
an output directory, together with a ``manifest.json``.
"""

import os
import json
import logging
import argparse
from collections import namedtuple

import numpy as np

from ._model import DataError, logger, simulate
from ._smc import ParticleCollapseError
from ._samplers import SCHEMES, ChainDraws
from ._diagnostics import (
    ChainStats,
    chain_stats,
    compare_runs,
    dic_from_draws,
    summarize,
)
from ._config import (
    ConfigError,
    PRESETS,
    RunConfig,
    RunManifest,
    dump_config,
    load_config,
    override,
    preset,
)
from ._fit import fit
from ._plots import plot_traces, plot_volatility
from .utils import format_table, read_panel, read_table, write_panel, write_table
from . import __version__


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    """Error raised for invalid command line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(parser):
    parser.add_argument("--config", help="an INI config file, or a manifest.json")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="a built-in config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", default=".", help="the output directory")
    parser.add_argument("--quiet", action="store_true", help="only log warnings")


def make_parser():
    parser = _Parser(prog="fmsv", description="Particle MCMC for factor SV models.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a panel from a design")
    _add_config_args(p)

    p = sub.add_parser("fit", help="fit a model to a CSV panel")
    p.add_argument("data", help="CSV with T rows and p columns")
    _add_config_args(p)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--particles", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--factors", type=int)
    p.add_argument("--prior", choices=("normal", "ng"))

    p = sub.add_parser("diagnose", help="diagnostics and comparison of fit runs")
    p.add_argument("runs", nargs="+", help="one or more fit output directories")
    p.add_argument("--out", default=".", help="the output directory")
    p.add_argument("--truth", help="a latents CSV to overlay on volatility plots")
    p.add_argument("--quiet", action="store_true", help="only log warnings")
    return parser


def _load_run_config(args):
    if args.config and args.preset:
        raise UsageError("Use either --config or --preset, not both.")
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        if not os.path.isfile(args.config):
            raise ConfigError(f"Config file not found: {args.config}")
        with open(args.config, "rb") as f:
            text = f.read().decode()
        if args.config.endswith(".json"):
            text = RunManifest.from_json(text).config_text
        cfg = load_config(text)
    else:
        cfg = RunConfig()
    return override(
        cfg,
        seed=args.seed,
        scheme=getattr(args, "scheme", None),
        N=getattr(args, "particles", None),
        iters=getattr(args, "iters", None),
        burnin=getattr(args, "burnin", None),
        factors=getattr(args, "factors", None),
        prior=getattr(args, "prior", None),
    )


class _Writer:
    """Writes files into the output directory and keeps the inventory."""

    def __init__(self, out, command, cfg):
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as err:
            raise DataError(f"Cannot create output directory {out}: {err}") from None
        if not os.access(out, os.W_OK):
            raise DataError(f"Output directory is not writable: {out}")
        self.out = out
        text = "" if cfg is None else dump_config(cfg)
        seed = 0 if cfg is None else cfg.sampler.seed
        self.manifest = RunManifest(command, text, seed, __version__)
        self.manifest.started = RunManifest.now()

    def path(self, name):
        self.manifest.files.append(name)
        logger.info(f"Writing {os.path.join(self.out, name)}")
        return os.path.join(self.out, name)

    def text(self, name, text):
        with open(self.path(name), "wb") as f:
            f.write(text.encode())

    def finish(self):
        self.manifest.finished = RunManifest.now()
        self.manifest.files.append("manifest.json")
        with open(os.path.join(self.out, "manifest.json"), "wb") as f:
            f.write(self.manifest.to_json().encode())


def _latent_header(p, k):
    return (
        [f"h1_{s + 1}" for s in range(p)]
        + [f"h2_{j + 1}" for j in range(k)]
        + [f"f_{j + 1}" for j in range(k)]
    )


# %% Commands


def cmd_simulate(args):
    cfg = _load_run_config(args)
    design = cfg.design
    if design is None:
        raise ConfigError("simulate needs a [model] section or a preset")
    y, latents = simulate(design.dims(), design.theta(), cfg.sampler.seed)
    out = _Writer(args.out, "simulate", cfg)
    write_panel(out.path("observations.csv"), y)
    stacked = np.vstack([latents.h1, latents.h2, latents.f])
    write_table(
        out.path("latents.csv"), _latent_header(design.p, design.k), stacked.T.tolist()
    )
    write_table(out.path("truth.csv"), ["name", "value"], design.truth().items())
    out.finish()
    return EXIT_OK


def cmd_fit(args):
    cfg = _load_run_config(args)
    if not os.path.isfile(args.data):
        raise DataError(f"Data file not found: {args.data}")
    y = read_panel(args.data)
    p, T = y.shape
    k = cfg.k
    truth = None
    design = cfg.design
    if design is not None and (design.p, design.k) == (p, k):
        truth = design.truth()
    out = _Writer(args.out, "fit", cfg)
    logger.info(f"Fitting k={k} factors to {p} series of length {T}")

    output = fit(y, cfg.sampler, k, truth)
    draws = output.draws
    write_table(out.path("draws.csv"), draws.names, draws.values.tolist())
    write_table(
        out.path("loglik.csv"),
        ["loglik", "logprior"],
        zip(draws.loglik.tolist(), draws.logprior.tolist()),
    )
    _write_latent_summary(out.path("latent_summary.csv"), output, p, k)
    _write_summary(out, output.summary)
    stats = output.stats.to_dict()
    stats["dic"] = output.dic
    out.text("stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    out.finish()
    return EXIT_OK


def _write_latent_summary(filename, output, p, k):
    header, cols = ["t"], []
    for name in _latent_header(p, k):
        group, _, idx = name.partition("_")
        mean = output.latent_mean[group][int(idx) - 1]
        sd = output.latent_sd[group][int(idx) - 1]
        header += [f"{name}_mean", f"{name}_lo", f"{name}_hi"]
        cols += [mean, mean - 2 * sd, mean + 2 * sd]
    T = len(cols[0])
    rows = np.column_stack([np.arange(1, T + 1)] + cols)
    write_table(filename, header, ([int(r[0])] + list(r[1:]) for r in rows))


def _write_summary(out, summary, label=None):
    name = "summary" if label is None else f"summary_{label}"
    header = list(summary[0]._fields)
    write_table(out.path(f"{name}.csv"), header, summary)
    out.text(f"{name}.txt", format_table(header, summary))


RunRecord = namedtuple("RunRecord", ["label", "draws", "stats", "latents"])


def load_run(dirname):
    """Load the output of a fit run from a directory."""
    label = os.path.basename(os.path.normpath(dirname))
    filename = os.path.join(dirname, "draws.csv")
    if not os.path.isfile(filename):
        raise DataError(f"No draws.csv in {dirname}")
    header, rows = read_table(filename)
    if not rows:
        raise DataError(f"{filename} has no draws")
    try:
        values = np.array(rows, dtype=float)
    except ValueError:
        raise DataError(f"{filename} has non-numeric draws") from None

    loglik = logprior = np.full(len(values), np.nan)
    filename = os.path.join(dirname, "loglik.csv")
    if os.path.isfile(filename):
        _, rows = read_table(filename)
        loglik, logprior = np.array(rows, dtype=float).T

    stats = None
    filename = os.path.join(dirname, "stats.json")
    if os.path.isfile(filename):
        with open(filename, "rb") as f:
            stats = ChainStats.from_dict(json.loads(f.read().decode()))

    latents = None
    filename = os.path.join(dirname, "latent_summary.csv")
    if os.path.isfile(filename):
        lheader, rows = read_table(filename)
        latents = (lheader, np.array(rows, dtype=float))

    p = sum(name.startswith("mu_") for name in header)
    k = sum(name.startswith("phi_f") for name in header)
    kind = "ng" if any(name.startswith("lambda2_") for name in header) else "normal"
    draws = ChainDraws(
        p, k, kind, header, values, loglik, logprior, {}, {}, np.zeros(0, int)
    )
    return RunRecord(label, draws, stats, latents)


def _latent_band(latents, prefix):
    header, table = latents
    names = [h[:-5] for h in header if h.startswith(prefix) and h.endswith("_mean")]
    mean = np.array([table[:, header.index(f"{n}_mean")] for n in names])
    hi = np.array([table[:, header.index(f"{n}_hi")] for n in names])
    return names, mean, (hi - mean) / 2


def cmd_diagnose(args):
    runs = [load_run(dirname) for dirname in args.runs]
    truth_table = None
    if args.truth:
        theader, rows = read_table(args.truth)
        truth_table = (theader, np.array(rows, dtype=float))
    out = _Writer(args.out, "diagnose", None)

    iact_rows, stats, dic_rows = [], {}, []
    for run in runs:
        draws = run.draws
        if draws.size < 10:
            raise DataError(f"Run {run.label} has {draws.size} draws, need >= 10")
        runtime = run.stats.runtime_seconds if run.stats else float("nan")
        st = chain_stats(draws, runtime)
        if run.stats:
            st.acceptance = run.stats.acceptance
        stats[run.label] = st
        iact_rows += [(run.label, name, value) for name, value in st.iact.items()]
        if np.all(np.isfinite(draws.loglik)):
            dic_rows.append((run.label, draws.k, dic_from_draws(draws)))

        plot_traces(out.path(f"traces_{run.label}.svg"), draws)
        if run.latents is not None:
            bands = (("h1_", "volatility", "h"), ("h2_", "factor_volatility", "g"))
            for prefix, stem, label in bands:
                names, mean, sd = _latent_band(run.latents, prefix)
                if not names:
                    continue
                truth = None
                if truth_table is not None:
                    theader, ttable = truth_table
                    truth = np.array([ttable[:, theader.index(n)] for n in names])
                filename = out.path(f"{stem}_{run.label}.svg")
                plot_volatility(filename, mean, sd, truth, label=label)

    write_table(out.path("iact.csv"), ["run", "name", "iact"], iact_rows)
    timed = {label: st for label, st in stats.items() if np.isfinite(st.tnv)}
    if timed:
        rows = compare_runs(timed)
        header = ["run", "time", "iact_mean", "tnv", "rel_tnv"]
        write_table(out.path("comparison.csv"), header, rows)
        out.text("comparison.txt", format_table(header, rows))
    if dic_rows:
        write_table(out.path("dic.csv"), ["run", "k", "dic"], dic_rows)
        out.text("dic.txt", format_table(["run", "k", "dic"], dic_rows))
    for run in runs:
        _write_summary(out, summarize(run.draws), run.label)
    out.finish()
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose}


def main(argv=None):
    """Run the command line interface and return the exit code."""
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("No command given")
    except UsageError as err:
        parser.print_usage()
        logger.error(f"Usage error: {err}")
        return EXIT_USAGE

    level = logger.level
    if args.quiet:
        logger.setLevel(logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        logger.error(f"{err}")
        return EXIT_USAGE
    except (DataError, OSError) as err:
        logger.error(f"{err}")
        return EXIT_DATA
    except (ParticleCollapseError, FloatingPointError, np.linalg.LinAlgError) as err:
        logger.error(f"Numerical failure: {err}", exc_info=err)
        return EXIT_NUMERICAL
    except ValueError as err:
        logger.error(f"{err}")
        return EXIT_USAGE
    finally:
        logger.setLevel(level)
