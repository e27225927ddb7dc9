import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import mp_cdf, mp_pmf, quad_pmf
from bayesreadout.count_model import (
    POISSON_BETA,
    TAIL_MASS,
    MixtureModel,
    ShotRecord,
    SuperPoissonParams,
    fit_moments,
    logpmf,
    mixture_pmf,
    overlap,
    pmf,
    sample,
)
from bayesreadout.errors import DegenerateWeightsError, ParameterDomainError

alphas = st.floats(0.05, 400.0)
betas = st.floats(0.05, 50.0)


def test_pmf_zero_unit_params_by_quadrature():
    # integral of exp(-lam) * exp(-lam) over lam >= 0
    assert quad_pmf(1.0, 1.0, 0) == pytest.approx(0.5, abs=1e-12)
    assert pmf(SuperPoissonParams(1.0, 1.0), 0) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("alpha,beta", [(1.0, 2.0), (7.19, 2.0), (0.3, 0.2), (69.4, 0.5), (250.0, 15.0)])
@pytest.mark.parametrize("n", [0, 1, 3, 17, 140])
def test_logpmf_matches_closed_form_and_quadrature(alpha, beta, n):
    p = SuperPoissonParams(alpha, beta)
    ref = float(mp_pmf(alpha, beta, n))
    assert math.exp(float(logpmf(p, n))) == pytest.approx(ref, rel=1e-11)
    if ref > 1e-200:
        assert float(pmf(p, n)) == pytest.approx(quad_pmf(alpha, beta, n), rel=1e-6)


def test_known_values():
    # nbinom with r = 1, p = 2/3 -> P(0) = 2/3, P(1) = 2/9
    p = SuperPoissonParams(1.0, 2.0)
    np.testing.assert_allclose(pmf(p, [0, 1]), [2 / 3, 2 / 9], rtol=1e-14)
    assert p.mean == pytest.approx(0.5)
    assert p.variance == pytest.approx(0.75)


@given(alphas, betas)
def test_moments_from_pmf(alpha, beta):
    p = SuperPoissonParams(alpha, beta)
    n = np.arange(p.support_max() + 1)
    w = pmf(p, n)
    assert w.sum() == pytest.approx(1.0, abs=2 * TAIL_MASS)
    m = np.dot(w, n)
    assert m == pytest.approx(p.mean, rel=1e-6, abs=1e-9)
    assert np.dot(w, (n - m) ** 2) == pytest.approx(p.variance, rel=1e-5, abs=1e-8)
    assert p.variance > p.mean


@given(alphas, betas)
def test_support_max_is_smallest(alpha, beta):
    p = SuperPoissonParams(alpha, beta)
    n_max = p.support_max()
    assert mp_cdf(alpha, beta, n_max) >= 1.0 - TAIL_MASS
    if n_max > 0:
        assert mp_cdf(alpha, beta, n_max - 1) < 1.0 - TAIL_MASS


@given(alphas, betas, alphas, betas)
def test_overlap_symmetric_and_bounded(a1, b1, a2, b2):
    f, g = SuperPoissonParams(a1, b1), SuperPoissonParams(a2, b2)
    o = overlap(f, g)
    assert 0.0 <= o <= 1.0
    assert o == pytest.approx(overlap(g, f), abs=1e-12)


@given(alphas, betas)
def test_overlap_with_itself_is_one(a, b):
    p = SuperPoissonParams(a, b)
    assert overlap(p, p) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("bad", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (math.nan, 1.0), (1.0, math.inf)])
def test_invalid_params_rejected(bad):
    with pytest.raises(ParameterDomainError):
        SuperPoissonParams(*bad)


def test_from_moments_roundtrip_and_rejects_poisson():
    p = SuperPoissonParams.from_moments(3.0, 7.5)
    assert (p.mean, p.variance) == pytest.approx((3.0, 7.5))
    with pytest.raises(ParameterDomainError):
        SuperPoissonParams.from_moments(3.0, 3.0)


def test_negative_counts_rejected():
    with pytest.raises(ParameterDomainError):
        logpmf(SuperPoissonParams(1, 1), [-1])
    with pytest.raises(ParameterDomainError):
        ShotRecord([1, -2])


def test_mixture_bounds_and_normalization():
    g, f = SuperPoissonParams(1, 2), SuperPoissonParams(7.19, 2)
    with pytest.raises(ParameterDomainError):
        MixtureModel(g, f, 1.5)
    n = np.arange(200)
    for l in (0.0, 0.3, 1.0):
        assert mixture_pmf(MixtureModel(g, f, l), n).sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(mixture_pmf(MixtureModel(g, f, 0.0), n), pmf(g, n))


def test_sample_is_seeded_and_matches_moments():
    g, f = SuperPoissonParams(1, 2), SuperPoissonParams(7.19, 2)
    model = MixtureModel(g, f, 0.3)
    a, b = sample(model, 500, seed=4), sample(model, 500, seed=4)
    assert a == b
    assert sample(model, 500, seed=5) != a
    big = sample(model, 200_000, seed=1).counts
    mean = 0.7 * g.mean + 0.3 * f.mean
    second = 0.7 * (g.variance + g.mean**2) + 0.3 * (f.variance + f.mean**2)
    assert big.mean() == pytest.approx(mean, rel=0.01)
    assert big.var() == pytest.approx(second - mean**2, rel=0.02)


def test_sample_pure_states():
    g, f = SuperPoissonParams(1, 2), SuperPoissonParams(69.4, 0.5)
    dark = sample(MixtureModel(g, f, 0.0), 20_000, seed=2).counts
    assert dark.mean() == pytest.approx(g.mean, rel=0.05)
    bright = sample(MixtureModel(g, f, 1.0), 20_000, seed=2).counts
    assert bright.mean() == pytest.approx(f.mean, rel=0.02)


def test_shot_record_binning_and_immutability():
    rec = ShotRecord.from_values([0.5, 1.5, 2.5, 2.4999, 3.7])
    assert rec.counts.tolist() == [0, 2, 2, 2, 4]
    with pytest.raises(ValueError):
        rec.counts[0] = 5
    with pytest.raises(ParameterDomainError):
        ShotRecord([1.5])
    empty = ShotRecord([])
    assert empty.N == 0


def test_fit_moments_weighted_and_clamped():
    counts = np.array([0, 1, 2, 10, 12, 30])
    w = np.array([0, 0, 0, 1.0, 2.0, 1.0])
    p = fit_moments(counts, w)
    m = (10 + 24 + 30) / 4
    v = ((10 - m) ** 2 + 2 * (12 - m) ** 2 + (30 - m) ** 2) / 4
    assert (p.mean, p.variance) == pytest.approx((m, v))
    flat = fit_moments([4, 4, 4, 4])
    assert flat.clamped and flat.beta == POISSON_BETA and flat.mean == pytest.approx(4.0)
    with pytest.raises(DegenerateWeightsError):
        fit_moments(counts, np.zeros(6))
