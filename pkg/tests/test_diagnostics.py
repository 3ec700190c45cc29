"""
Test IACT, TNV, DIC and the posterior summaries.
"""

import math
from types import SimpleNamespace

import numpy as np
from pytest import approx, raises

from fmsv import ChainStats, chain_stats, compare_runs, dic7, iact, summarize, tnv
from fmsv._diagnostics import autocorrelation, dic_from_draws, map_index

from common import run_tests


def ar1_chain(phi, M, seed):
    rng = np.random.default_rng(seed)
    x = np.empty(M)
    x[0] = rng.standard_normal() / math.sqrt(1 - phi**2)
    for i in range(1, M):
        x[i] = phi * x[i - 1] + rng.standard_normal()
    return x


def fake_draws(values, names, accepts=None, loglik=None, logprior=None):
    values = np.asarray(values, dtype=float)
    M = values.shape[0]
    return SimpleNamespace(
        names=names,
        values=values,
        accepts=accepts or {},
        loglik=np.zeros(M) if loglik is None else np.asarray(loglik, dtype=float),
        logprior=np.zeros(M) if logprior is None else np.asarray(logprior, dtype=float),
    )


def test_autocorrelation():
    rho = autocorrelation([1.0, -1.0, 1.0, -1.0])
    assert rho[0] == approx(1.0)
    assert rho[1] == approx(-0.75)
    assert rho[2] == approx(0.5)
    with raises(ValueError):
        autocorrelation([2.0, 2.0, 2.0])


def test_iact_white_noise():
    x = np.random.default_rng(0).standard_normal(50_000)
    assert iact(x) == approx(1.0, abs=0.05)


def test_iact_ar1():
    for phi in (0.5, 0.9):
        x = ar1_chain(phi, 100_000, 1)
        assert iact(x) == approx((1 + phi) / (1 - phi), rel=0.1)


def test_iact_fails():
    with raises(ValueError):
        iact(np.arange(9.0))
    with raises(ValueError):
        iact(np.full(100, 0.3))
    with raises(ValueError):
        iact(np.zeros((10, 2)))
    assert iact(np.arange(10.0)) > 1


def test_tnv():
    assert tnv(70.45, 1.07) == approx(75.38, abs=0.01)
    assert tnv(10.42, 1.75) == approx(18.23, abs=0.01)
    with raises(ValueError):
        tnv(0.0, 1.0)
    with raises(ValueError):
        tnv(1.0, -1.0)
    with raises(ValueError):
        tnv(math.nan, 1.0)


def test_dic7():
    assert dic7([-10.0, -12.0], -9.0) == 26.0
    assert dic7(np.array([-5.0]), -5.0) == 10.0
    with raises(ValueError):
        dic7([], -1.0)


def test_map_index_and_dic():
    draws = fake_draws(
        np.zeros((3, 1)), ["x"], loglik=[-10.0, -9.0, -12.0], logprior=[0.0, -2.0, 0.0]
    )
    # The MAP draw maximizes likelihood plus prior
    assert map_index(draws) == 0
    assert dic_from_draws(draws) == approx(-4 * (-31 / 3) + 2 * -10.0)


def test_summarize():
    rng = np.random.default_rng(2)
    values = np.column_stack([rng.normal(1.0, 2.0, 5000), np.full(5000, 0.3)])
    rows = summarize(fake_draws(values, ["a", "b"]), truth={"a": 1.0, "b": 5.0})
    a, b = rows
    assert a.name == "a"
    assert a.mean == approx(1.0, abs=0.1)
    assert a.sd == approx(2.0, rel=0.05)
    assert a.q05 < a.q50 < a.q95
    assert a.iact == approx(1.0, abs=0.1)
    assert a.in90 and a.in99
    # A constant chain has no IACT, and the truth is far away
    assert math.isnan(b.iact)
    assert b.in90 is False and b.in99 is False

    rows = summarize(fake_draws(values[:5], ["a", "b"]))
    assert math.isnan(rows[0].iact)
    assert rows[0].truth is None and rows[0].in90 is None

    with raises(ValueError):
        summarize(fake_draws(np.zeros((0, 2)), ["a", "b"]))


def test_chain_stats():
    values = np.column_stack([ar1_chain(0.5, 20_000, 3), np.full(20_000, 1.0)])
    accepts = {"phi": np.array([[True, False], [True, True]])}
    stats = chain_stats(fake_draws(values, ["a", "b"], accepts), 0.5)
    assert math.isnan(stats.iact["b"])
    assert stats.iact_mean == stats.iact["a"]
    assert stats.iact_mean == approx(3.0, rel=0.15)
    assert stats.acceptance == {"phi": [1.0, 0.5]}
    assert stats.tnv == approx(stats.iact_mean * 0.5)
    assert stats.runtime_seconds == 0.5

    back = ChainStats.from_dict(stats.to_dict())
    assert back.iact_mean == stats.iact_mean
    assert back.acceptance == stats.acceptance
    assert back.tnv == stats.tnv

    stats = chain_stats(fake_draws(values, ["a", "b"]), 0.0)
    assert math.isnan(stats.tnv)


def test_compare_runs():
    stats = {
        "pgas": ChainStats({}, 70.45, tnv=75.38, runtime_seconds=1.07),
        "mixed": ChainStats({}, 10.42, tnv=18.23, runtime_seconds=1.75),
    }
    rows = compare_runs(stats)
    assert [r.label for r in rows] == ["pgas", "mixed"]
    assert rows[1].rel_tnv == 1.0
    assert rows[0].rel_tnv == approx(75.38 / 18.23)
    assert rows[0].time == 1.07
    with raises(ValueError):
        compare_runs({})


if __name__ == "__main__":
    run_tests(globals())
