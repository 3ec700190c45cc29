"""
Property-based tests of the resampling schemes and the invariances of the
sampler moves.
"""

import math

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fmsv import (
    ReferenceTrajectory,
    StepSizeAdapter,
    SvParams,
    SvSeriesModel,
    bootstrap_pf,
    conditional_smc,
    conditional_systematic_resample,
    csmc_ancestor_sampling,
    parameter_names,
    systematic_resample,
    update_phi_pg,
    update_tau2_pg,
)
from fmsv._samplers import ObsContext, flip_signs, rescale_factor
from fmsv.utils import format_number

from common import run_tests


positive = st.floats(0.01, 100.0, allow_nan=False, allow_infinity=False)
weights_st = st.lists(positive, min_size=1, max_size=30).map(
    lambda w: np.array(w) / np.sum(w)
)
finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


@st.composite
def lower_triangular(draw, max_p=6):
    p = draw(st.integers(1, max_p))
    k = draw(st.integers(1, p))
    B = draw(arrays(float, (p, k), elements=finite))
    return np.tril(B)


@settings(max_examples=1000, deadline=None)
@given(weights_st, st.floats(0.0, 0.999999))
def test_systematic_counts(weights, u):
    N = len(weights)
    idx = systematic_resample(weights, u)
    assert len(idx) == N
    assert np.all(np.diff(idx) >= 0)
    counts = np.bincount(idx, minlength=N)
    expected = N * weights
    assert np.all(counts >= np.floor(expected - 1e-9))
    assert np.all(counts <= np.ceil(expected + 1e-9))


@settings(max_examples=1000, deadline=None)
@given(weights_st, st.data())
def test_conditional_systematic_pins(weights, data):
    N = len(weights)
    pinned = data.draw(st.integers(0, N - 1))
    slot = data.draw(st.integers(0, N - 1))
    seed = data.draw(st.integers(0, 2**32 - 1))
    idx = conditional_systematic_resample(
        weights, pinned, slot, np.random.default_rng(seed)
    )
    assert len(idx) == N
    assert idx[slot] == pinned
    assert np.all((idx >= 0) & (idx < N))


@settings(max_examples=1000, deadline=None)
@given(lower_triangular(), st.integers(0, 2**32 - 1))
def test_flip_signs(B, seed):
    k = B.shape[1]
    f = np.random.default_rng(seed).standard_normal((k, 5))
    B2, f2, flipped, zero = flip_signs(B, f)
    diag = B2[np.arange(k), np.arange(k)]
    assert np.all(diag >= 0)
    assert np.allclose(B2 @ f2, B @ f)
    assert not np.any(flipped & zero)
    B3, f3, flipped3, _ = flip_signs(B2, f2)
    assert not flipped3.any()
    assert np.array_equal(B3, B2)


@settings(max_examples=1000, deadline=None)
@given(lower_triangular(), st.floats(0.1, 10.0), st.data())
def test_rescale_factor_invariants(B, c, data):
    k = B.shape[1]
    j = data.draw(st.integers(0, k - 1))
    f = np.linspace(-1, 1, 4 * k).reshape(k, 4)
    h2 = np.linspace(-2, 2, 4 * k).reshape(k, 4)
    B2, f2, h22 = rescale_factor(B, f, h2, j, c)
    assert np.allclose(B2 @ f2, B @ f)
    # The standardized factor is invariant
    assert np.allclose(f2 * np.exp(-0.5 * h22), f * np.exp(-0.5 * h2))
    if abs(B[j, j]) > 1e-3:
        assert np.allclose(h22[j] + np.log(B2[j, j] ** 2), h2[j] + np.log(B[j, j] ** 2))


@settings(max_examples=1000, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_format_number_reads_back(x):
    assert float(format_number(x)) == x


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 20), st.data())
def test_parameter_count(p, data):
    k = data.draw(st.integers(1, p))
    free = p * k - k * (k - 1) // 2
    names = parameter_names(p, k)
    assert len(names) == 4 * p + 2 * k + free
    assert len(parameter_names(p, k, "ng")) == len(names) + free + p
    assert len(set(names)) == len(names)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), max_size=200))
def test_step_size_stays_bounded(accept_probs):
    adapter = StepSizeAdapter(0.1, 0.5)
    for a in accept_probs:
        adapter.update(a)
        assert math.exp(-12.0) <= adapter.eps <= math.exp(2.0)


sv_params = st.builds(
    SvParams,
    st.floats(-3.0, 1.0),
    st.floats(-0.99, 0.99),
    st.floats(0.001, 1.0),
    st.floats(-0.95, 0.95),
)
seeds = st.integers(0, 2**32 - 1)


def sv_obs(seed, T=6):
    return np.random.default_rng(seed).standard_normal(T)


@settings(max_examples=1000, deadline=None)
@given(sv_params, seeds)
def test_filter_weights_normalized(prm, seed):
    obs = sv_obs(seed)
    model = SvSeriesModel(prm, np.zeros(len(obs)))
    sys = bootstrap_pf(model, obs, 8, np.random.default_rng(seed))
    assert np.allclose(sys.normweights.sum(axis=0), 1.0)
    assert np.all(sys.normweights >= 0)
    assert math.isfinite(sys.logZ)
    # Same seed, same system
    again = bootstrap_pf(model, obs, 8, np.random.default_rng(seed))
    assert np.array_equal(sys.particles, again.particles)
    assert sys.logZ == again.logZ


@settings(max_examples=1000, deadline=None)
@given(sv_params, seeds, st.booleans())
def test_csmc_preserves_reference(prm, seed, ancestor_sampling):
    obs = sv_obs(seed)
    model = SvSeriesModel(prm, np.zeros(len(obs)))
    rng = np.random.default_rng(seed)
    path = prm.mu + rng.standard_normal(len(obs))
    ref = ReferenceTrajectory.pinned(path, 6)
    kernel = csmc_ancestor_sampling if ancestor_sampling else conditional_smc
    sys = kernel(model, obs, 6, ref, rng)
    assert np.array_equal(sys.particles[5], path)
    assert np.allclose(sys.normweights.sum(axis=0), 1.0)
    if not ancestor_sampling:
        assert np.all(sys.ancestors[5] == 5)


@settings(max_examples=1000, deadline=None)
@given(sv_params, seeds)
def test_updates_preserve_support(prm, seed):
    rng = np.random.default_rng(seed)
    h = prm.mu + 0.5 * rng.standard_normal(12)
    ctx = ObsContext(rng.standard_normal(12), np.zeros(12))
    new, _ = update_phi_pg(h, prm, ctx, rng)
    assert abs(new.phi) < 1
    new, _ = update_tau2_pg(h, new, ctx, rng)
    assert new.tau2 > 0 and math.isfinite(new.tau2)
    assert new.is_valid


@settings(max_examples=1000, deadline=None)
@given(lower_triangular(), st.floats(0.1, 10.0), st.data())
def test_rescale_factor_round_trip(B, c, data):
    k = B.shape[1]
    j = data.draw(st.integers(0, k - 1))
    f = np.linspace(-1, 1, 3 * k).reshape(k, 3)
    h2 = np.zeros((k, 3))
    B2, f2, h22 = rescale_factor(*rescale_factor(B, f, h2, j, c), j, 1 / c)
    assert np.allclose(B2, B)
    assert np.allclose(f2, f)
    assert np.allclose(h22, h2)


if __name__ == "__main__":
    run_tests(globals())
