"""
Common utilities used in our test scripts.
"""

import os
import inspect
import logging
import tempfile
from pathlib import Path

import numpy as np
from pytest import skip

from fmsv import FactorLoadings, SvParams, Theta


SIM_LOADINGS = np.array(
    [
        [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1],
        [0.0, 1.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    ]
).T


class LogCapturer(logging.Handler):
    def __init__(self):
        super().__init__()
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())

    def __enter__(self):
        logging.getLogger("fmsv").addHandler(self)
        return self

    def __exit__(self, *args, **kwargs):
        logging.getLogger("fmsv").removeHandler(self)


def long_tests_enabled():
    return os.environ.get("FMSV_LONG_TESTS", "").strip() == "1"


def skip_unless_long():
    if not long_tests_enabled():
        skip("Slow test; set FMSV_LONG_TESTS=1 to run")


def make_theta(p=3, k=1, mu=0.01, phi=0.98, tau2=0.05, rho=-0.1, B=None):
    """A Theta with the same SV parameters for every series. Loadings
    default to the first rows and columns of the simulation design.
    """
    if B is None:
        B = SIM_LOADINGS[:p, :k]
    idio = [SvParams(mu, phi, tau2, rho) for _ in range(p)]
    fac = [SvParams(0.0, phi, tau2) for _ in range(k)]
    return Theta(idio, fac, FactorLoadings(B))


def run_tests(scope):
    for func in list(scope.values()):
        if callable(func) and getattr(func, "__name__", "").startswith("test_"):
            params = inspect.signature(func).parameters
            if set(params) - {"tmp_path"}:
                print(f"Skipping {func.__name__} (needs pytest fixtures)")
                continue
            print(f"Running {func.__name__} ...")
            if params:
                with tempfile.TemporaryDirectory() as dirname:
                    func(Path(dirname))
            else:
                func()
    print("Done")
