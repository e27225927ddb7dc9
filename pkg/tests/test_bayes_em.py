import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesreadout.bayes_em import (
    EmConfig,
    bright_weights,
    default_init_f,
    refit_theta,
    run_anchored,
    run_em,
    run_em_joint,
)
from bayesreadout.count_model import MixtureModel, ShotRecord, SuperPoissonParams, logpmf, sample
from bayesreadout.errors import ConfigError, ParameterDomainError
from bayesreadout.fixtures import PAIRS
from bayesreadout.posterior_grid import PriorSpec, compute_posterior

G, F = PAIRS["o61"]


def test_config_validation():
    with pytest.raises(ConfigError):
        EmConfig(max_iter=-1)
    with pytest.raises(ConfigError):
        EmConfig(tol_theta=0.0)
    with pytest.raises(ConfigError):
        EmConfig(e_step_engine="magic")
    with pytest.raises(ParameterDomainError):
        EmConfig(grid_size=1)


def test_empty_record_rejected():
    with pytest.raises(ParameterDomainError):
        run_em(ShotRecord([]), G)


def test_recovers_occupation_on_fixture():
    errs, iters = [], []
    for seed in range(20):
        post, theta, trace = run_em(sample(MixtureModel(G, F, 0.7), 200, seed), G)
        errs.append(abs(post.mean - 0.7))
        iters.append(trace.iterations_used)
        assert trace.iterations_used <= 50
        assert len(trace.iterations) == trace.iterations_used
    assert np.median(errs) < 0.06


@pytest.mark.parametrize("name", ["o61", "o72", "long"])
def test_pure_dark_data_gives_small_occupation(name):
    g, f = PAIRS[name]
    for seed in range(20):
        post, _, trace = run_em(sample(MixtureModel(g, f, 0.0), 200, seed), g)
        assert post.mean < 0.1
        assert trace.degenerate_bright


def test_weight_floor_freezes_bright_law():
    # bright law far above the data: almost no bright weight from the start
    counts = sample(MixtureModel(G, F, 0.0), 200, 3)
    far = SuperPoissonParams(400.0, 2.0)
    post, theta, trace = run_em(counts, G, config=EmConfig(init_f=far))
    assert trace.degenerate_bright
    assert theta == far
    assert post.mean < 0.05


def test_init_robustness():
    near, far = [], []
    for seed in range(10):
        rec = sample(MixtureModel(G, F, 0.7), 200, 100 + seed)
        a, _, _ = run_em(rec, G, config=EmConfig(init_f=F))
        b, _, _ = run_em(rec, G, config=EmConfig(init_f=SuperPoissonParams.from_moments(3 * F.mean, 3 * F.variance)))
        near.append(a.mean)
        far.append(b.mean)
    assert np.max(np.abs(np.array(near) - np.array(far))) < 0.02


def test_zero_iterations_is_anchored_pass():
    rec = sample(MixtureModel(G, F, 0.4), 150, 8)
    post, theta, trace = run_em(rec, G, config=EmConfig(max_iter=0, init_f=F, evidence_check=False))
    ref = run_anchored(rec, G, F)
    np.testing.assert_array_equal(post.masses, ref.masses)
    assert theta == F and trace.iterations_used == 0


def test_anchored_identical_laws_returns_prior():
    prior = PriorSpec.from_masses(np.arange(1, 102) / np.arange(1, 102).sum())
    post = run_anchored([0, 3, 5], G, G, prior=prior, L=101)
    np.testing.assert_allclose(post.masses, np.asarray(prior.masses), rtol=1e-12)


def test_anchored_matches_compute_posterior():
    counts = [0, 0, 1, 4, 9]
    a = run_anchored(counts, G, F, L=501)
    b = compute_posterior(counts, G, F, L=501)
    np.testing.assert_array_equal(a.masses, b.masses)


def test_fixed_point_on_convergence():
    for seed in range(10):
        rec = sample(MixtureModel(G, F, 0.6), 200, 40 + seed)
        post, theta, trace = run_em(rec, G)
        if not trace.converged:
            continue
        lbar = trace.iterations[-1].mean
        last_theta = trace.iterations[-1].theta_f
        again = refit_theta(rec, G, last_theta, lbar)
        assert abs(again.alpha - theta.alpha) / theta.alpha < 1e-12
        # one more M-step from the final state moves theta by less than the tolerance
        step = refit_theta(rec, G, theta, post.mean)
        assert abs(step.alpha - theta.alpha) / theta.alpha < 1e-3
        assert abs(step.beta - theta.beta) / theta.beta < 1e-3


@settings(max_examples=25)
@given(st.lists(st.integers(0, 40), min_size=5, max_size=80), st.randoms(use_true_random=False))
def test_shot_order_invariance(counts, rnd):
    shuffled = list(counts)
    rnd.shuffle(shuffled)
    a, ta, _ = run_em(counts, G)
    b, tb, _ = run_em(shuffled, G)
    assert abs(a.mean - b.mean) < 1e-12
    assert ta.as_tuple() == pytest.approx(tb.as_tuple(), rel=1e-12)


@given(st.floats(0.0, 1.0), st.lists(st.integers(0, 60), min_size=1, max_size=50))
def test_weight_identities(lbar, counts):
    n = np.array(counts)
    w = bright_weights(logpmf(F, n), logpmf(G, n), lbar)
    assert np.all((w >= 0) & (w <= 1))
    one = bright_weights(np.array([-1.0]), np.array([-np.inf]), 0.3)
    zero = bright_weights(np.array([-np.inf]), np.array([-1.0]), 0.3)
    assert one[0] == 1.0 and zero[0] == 0.0


def test_weights_match_formula():
    n = np.arange(15)
    lbar = 0.37
    g, f = G.pmf(n), F.pmf(n)
    ref = lbar * f / ((1 - lbar) * g + lbar * f)
    np.testing.assert_allclose(bright_weights(np.log(f), np.log(g), lbar), ref, rtol=1e-12)


def test_strong_weak_agreement():
    ok = 0
    for seed in range(100):
        rec = sample(MixtureModel(G, F, 0.7), 200, 1000 + seed)
        weak, _, _ = run_em(rec, G)
        strong = run_anchored(rec, G, F)
        ok += abs(weak.mean - strong.mean) < 3 * max(weak.sd, strong.sd)
    assert ok >= 90


def test_joint_single_record_equals_run_em():
    rec = sample(MixtureModel(G, F, 0.5), 200, 9)
    a, ta, _ = run_em(rec, G)
    (b,), tb, _ = run_em_joint([rec], G)
    np.testing.assert_array_equal(a.masses, b.masses)
    assert ta == tb


def test_joint_recovers_dark_point():
    # a scan that contains an l = 0 point: the shared bright law keeps it identifiable
    recs = [sample(MixtureModel(G, F, l), 200, 50 + k) for k, l in enumerate([0.0, 0.3, 0.6, 0.85])]
    posts, theta, trace = run_em_joint(recs, G)
    assert posts[0].mean < 0.06
    assert not trace.degenerate_bright
    assert theta.mean == pytest.approx(F.mean, rel=0.25)


def test_per_shot_mode_matches_collapsed():
    rec = sample(MixtureModel(G, F, 0.5), 300, 11)
    a, ta, _ = run_em(rec, G)
    b, tb, _ = run_em(rec, G, config=EmConfig(collapse=False))
    assert abs(a.mean - b.mean) < 1e-9
    assert ta.as_tuple() == pytest.approx(tb.as_tuple(), rel=1e-8)


def test_default_init_is_upper_half_fit():
    counts = np.array([0, 0, 0, 1, 1, 5, 6, 9, 12, 20])
    p = default_init_f(counts)
    upper = counts[counts > np.median(counts)]
    assert p.mean == pytest.approx(upper.mean())


def test_trace_bookkeeping():
    rec = sample(MixtureModel(G, F, 0.7), 200, 2)
    _, _, trace = run_em(rec, G, config=EmConfig(max_iter=3, keep_posteriors=True))
    assert trace.iterations_used == 3 and not trace.converged
    assert trace.theta_path().shape == (3, 2)
    assert trace.iterations[0].posteriors[0].L == 1001
    s = trace.summary()
    assert set(s) >= {"iterations_used", "converged", "degenerate_bright"}
    assert math.isfinite(s["log_bright_evidence"])
