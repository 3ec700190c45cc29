"""
This module implements the configuration layer: INI files with the
sections ``[model]``, ``[sampler]``, ``[hmc]`` and ``[prior]``, the
built-in presets, and the run manifest written next to every output.
"""

import json
import datetime
import configparser
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ._model import FactorLoadings, ModelDims, PriorSettings, SvParams, Theta
from ._samplers import HmcSettings, SamplerConfig


class ConfigError(ValueError):
    """Error raised for malformed configuration files or values."""


@dataclass(frozen=True)
class Design:
    """A simulation design: dimensions and true parameters. Per-series
    values are tuples of length p (idiosyncratic) or k (factor);
    ``loadings`` holds the k rows of the transposed loading matrix.
    """

    p: int
    k: int
    T: int
    mu: tuple
    phi: tuple
    tau2: tuple
    rho: tuple
    phi_f: tuple
    tau2_f: tuple
    loadings: tuple

    def dims(self):
        return ModelDims(self.p, self.k, self.T)

    def theta(self):
        idio = [SvParams(*v) for v in zip(self.mu, self.phi, self.tau2, self.rho)]
        fac = [SvParams(0.0, a, b) for a, b in zip(self.phi_f, self.tau2_f)]
        B = np.array(self.loadings, dtype=float).T
        return Theta(idio, fac, FactorLoadings(B)).check()

    def truth(self):
        """Map parameter names to true values."""
        from ._samplers import parameter_names, theta_vector

        names = parameter_names(self.p, self.k)
        return dict(zip(names, theta_vector(self.theta())))


@dataclass(frozen=True)
class RunConfig:
    """A full configuration: an optional simulation design, the sampler
    settings, and the number of factors to fit (defaults to the design's).
    """

    design: Design = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    factors: int = None

    @property
    def k(self):
        if self.factors is not None:
            return self.factors
        if self.design is not None:
            return self.design.k
        return 1


# %% Presets


def _simulation_study():
    p, k = 10, 2
    design = Design(
        p=p,
        k=k,
        T=1000,
        mu=(0.01,) * p,
        phi=(0.98,) * p,
        tau2=(0.05,) * p,
        rho=(-0.1,) * p,
        phi_f=(0.98,) * k,
        tau2_f=(0.05,) * k,
        loadings=(
            (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1),
            (0.0, 1.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8),
        ),
    )
    sampler = SamplerConfig(scheme="mixed", N=500, iters=15000, burnin=5000)
    return RunConfig(design, sampler, None)


PRESETS = {"paper-sim": _simulation_study}


def preset(name):
    """Get a built-in configuration by name."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"Unknown preset {name!r}, choose from {list(PRESETS)}")


# %% Parsing


_SAMPLER_KEYS = {
    "scheme": str,
    "particles": int,
    "iters": int,
    "burnin": int,
    "seed": int,
    "factors": int,
    "lam": float,
    "langevin_eps": float,
    "langevin_target": float,
    "phi_correction": str,
    "interweave": bool,
    "aux_variance": float,
    "thin": int,
    "log_every": int,
}
_HMC_KEYS = {
    "kernel": str,
    "target_accept": float,
    "max_depth": int,
    "step_size": float,
    "n_leapfrog": int,
}
_PRIOR_KEYS = {"kind": str, "b0": float, "a": "floats", "c": "floats", "d": "floats"}
_MODEL_KEYS = {
    "p": int,
    "k": int,
    "T": int,
    "mu": "floats",
    "phi": "floats",
    "tau2": "floats",
    "rho": "floats",
    "phi_f": "floats",
    "tau2_f": "floats",
    "loadings": "matrix",
}
_SECTIONS = {
    "model": _MODEL_KEYS,
    "sampler": _SAMPLER_KEYS,
    "hmc": _HMC_KEYS,
    "prior": _PRIOR_KEYS,
}
_TRUE = ("1", "yes", "true", "on")
_FALSE = ("0", "no", "false", "off")


def _parse_value(section, key, kind, text):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        elif kind is int:
            return int(text)
        elif kind is float:
            return float(text)
        elif kind is str:
            return text
        elif kind == "floats":
            vals = tuple(float(x) for x in text.split(","))
            return vals[0] if len(vals) == 1 else vals
        elif kind == "matrix":
            return tuple(
                tuple(float(x) for x in row.split(",")) for row in text.split(";")
            )
    except ValueError:
        pass
    raise ConfigError(f"Invalid value for [{section}] {key}: {text!r}")


def _broadcast(name, value, n):
    vals = value if isinstance(value, tuple) else (value,) * n
    if len(vals) != n:
        raise ConfigError(f"[model] {name} needs 1 or {n} values, got {len(vals)}")
    return tuple(vals)


def load_config(source):
    """Parse a configuration from INI text, or from a file if ``source``
    is a path-like object. Returns a RunConfig.
    """
    if hasattr(source, "__fspath__"):
        with open(source, "rb") as f:
            source = f.read().decode()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(source)
    except configparser.Error as err:
        raise ConfigError(f"Cannot parse config: {err}") from None

    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"Unknown config section [{section}]")
        keys = _SECTIONS[section]
        values[section] = {}
        for key, text in parser.items(section):
            if key not in keys:
                raise ConfigError(f"Unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(section, key, keys[key], text)

    try:
        return _build_config(values)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None


def _build_config(values):
    design = None
    model = values.get("model")
    if model:
        missing = {"p", "k", "T", "loadings"} - set(model)
        if missing:
            raise ConfigError(f"[model] is missing {sorted(missing)}")
        p, k = model["p"], model["k"]
        defaults = {"mu": 0.0, "phi": 0.98, "tau2": 0.05, "rho": 0.0}
        per = {
            key: _broadcast(key, model.get(key, default), p)
            for key, default in defaults.items()
        }
        design = Design(
            p=p,
            k=k,
            T=model["T"],
            phi_f=_broadcast("phi_f", model.get("phi_f", 0.98), k),
            tau2_f=_broadcast("tau2_f", model.get("tau2_f", 0.05), k),
            loadings=model["loadings"],
            **per,
        )
        design.dims()
        if len(design.loadings) != k or any(len(r) != p for r in design.loadings):
            raise ConfigError(f"[model] loadings must be {k} rows of {p} values")
        design.theta()

    hmc = HmcSettings(**values.get("hmc", {}))
    prior = PriorSettings(**values.get("prior", {}))
    kw = dict(values.get("sampler", {}))
    factors = kw.pop("factors", None)
    if "particles" in kw:
        kw["N"] = kw.pop("particles")
    sampler = SamplerConfig(hmc=hmc, prior=prior, **kw)
    return RunConfig(design, sampler, factors)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_format_value(row) for row in value)
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def dump_config(cfg):
    """Write a RunConfig as INI text that ``load_config()`` reads back to
    an equal RunConfig.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if cfg.design is not None:
        parser["model"] = {
            f.name: _format_value(getattr(cfg.design, f.name)) for f in fields(Design)
        }
    s = cfg.sampler
    sampler = {}
    for key in _SAMPLER_KEYS:
        if key == "particles":
            sampler[key] = _format_value(s.N)
        elif key == "factors":
            if cfg.factors is not None:
                sampler[key] = _format_value(cfg.factors)
        else:
            sampler[key] = _format_value(getattr(s, key))
    parser["sampler"] = sampler
    parser["hmc"] = {key: _format_value(getattr(s.hmc, key)) for key in _HMC_KEYS}
    parser["prior"] = {
        key: _format_value(getattr(s.prior, key)) for key in _PRIOR_KEYS
    }
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {val}" for key, val in parser.items(section))
        lines.append("")
    return "\n".join(lines)


def override(cfg, **kwargs):
    """Apply command-line overrides to a RunConfig. Keys with value None
    are ignored; ``factors`` and ``prior`` (a kind) are handled specially.
    """
    kwargs = {key: val for key, val in kwargs.items() if val is not None}
    factors = kwargs.pop("factors", cfg.factors)
    sampler = cfg.sampler
    try:
        if "prior" in kwargs:
            prior = replace(sampler.prior, kind=kwargs.pop("prior"))
            sampler = replace(sampler, prior=prior)
        sampler = replace(sampler, **kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return replace(cfg, sampler=sampler, factors=factors)


# %% Manifest


@dataclass
class RunManifest:
    """Record of a command run: the effective config (as INI text), the
    seed, the package version, timestamps, and the files written.
    """

    command: str
    config_text: str
    seed: int
    version: str
    started: str = ""
    finished: str = ""
    files: list = field(default_factory=list)

    @staticmethod
    def now():
        return datetime.datetime.now(datetime.timezone.utc).isoformat(
            timespec="seconds"
        )

    def config(self):
        return load_config(self.config_text)

    def to_json(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
            return cls(**d)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"Invalid manifest: {err}") from None
