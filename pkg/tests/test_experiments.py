import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayesreadout.bayes_em import EmConfig
from bayesreadout.count_model import SuperPoissonParams
from bayesreadout.errors import CalibrationRequiredError, ConfigError, FitDegenerateError, ParameterDomainError
from bayesreadout.experiments import (
    RABI_TIMES,
    ExperimentResult,
    RabiModel,
    RamseyModel,
    ShotSeries,
    compare_methods,
    fidelity,
    fit_rabi,
    fit_ramsey,
    generate_experiment,
    point_seeds,
)
from bayesreadout.fixtures import PAIRS, RABI, RAMSEY, RAMSEY_TIMES

unit = st.floats(0.0, 1.0)


# -- fidelity ------------------------------------------------------------------


def test_fidelity_hand_values():
    assert fidelity(0.5, 0.6) == pytest.approx((math.sqrt(0.30) + math.sqrt(0.20)) ** 2, abs=1e-15)
    assert fidelity(0.5, 0.6) == pytest.approx(0.98990, abs=5e-6)
    assert fidelity(0.0, 1.0) == 0.0
    assert fidelity(0.3, 0.3) == pytest.approx(1.0, abs=1e-15)


@given(unit, unit)
def test_fidelity_symmetric_and_bounded(a, b):
    assert fidelity(a, b) == fidelity(b, a)
    assert 0.0 <= fidelity(a, b) <= 1.0


@given(unit)
def test_fidelity_self_is_one(a):
    assert fidelity(a, a) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("pair", [(-0.1, 0.5), (0.5, 1.2), (float("nan"), 0.5)])
def test_fidelity_domain(pair):
    with pytest.raises(ParameterDomainError):
        fidelity(*pair)


# -- models --------------------------------------------------------------------


def test_rabi_reference_point():
    expected = 0.87 * math.sin(math.pi * 25.1e3 * 21e-6) ** 2
    assert RABI.occupation(21e-6) == pytest.approx(expected, rel=1e-14)
    assert RABI.occupation(21e-6) == pytest.approx(0.86371, abs=5e-6)
    assert RABI.occupation(0.0) == 0.0


def test_ramsey_long_time_limit():
    assert RAMSEY.occupation(1.0) == pytest.approx(RAMSEY.l0, abs=1e-12)
    assert RAMSEY.t2 == pytest.approx(6.43e-3, rel=1e-14)
    # 1/e envelope at T2
    env = (RAMSEY.occupation(RAMSEY.t2) - RAMSEY.l0) / (RAMSEY.amp * math.cos(RAMSEY.delta_omega * RAMSEY.t2))
    assert env == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_model_validation():
    with pytest.raises(ParameterDomainError):
        RabiModel(-1.0, 0.5)
    with pytest.raises(ParameterDomainError):
        RabiModel(1.0, 1.5)
    with pytest.raises(ParameterDomainError):
        RamseyModel(0.0, 1.0, 0.0, 0.5, 0.4)


def test_generate_rejects_out_of_range_model():
    bad = RamseyModel(1e-3, 1e3, 0.0, 0.9, 0.4)
    g, f = PAIRS["o61"]
    with pytest.raises(ParameterDomainError):
        generate_experiment(bad, [0.0, 1e-4], 10, g, f, seed=0)


def test_generate_is_deterministic():
    g, f = PAIRS["o61"]
    a = generate_experiment(RABI, RABI_TIMES, 50, g, f, seed=4)
    b = generate_experiment(RABI, RABI_TIMES, 50, g, f, seed=4)
    assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a.records, b.records))
    assert a.l_true[0] == 0.0
    assert len(set(point_seeds(4, 7))) == 7


def test_series_validation():
    with pytest.raises(ParameterDomainError):
        ShotSeries([0.0, 1.0], [None])
    with pytest.raises(ParameterDomainError):
        ShotSeries([1.0, 0.0], [None, None])
    with pytest.raises(ParameterDomainError):
        ExperimentResult("em_exact", np.array([0.0, 0.0]), np.zeros(2), None, None, None, None)


# -- fits ----------------------------------------------------------------------


@pytest.mark.parametrize("freq,amp", [(25.1e3, 0.87), (12e3, 0.5), (40e3, 1.0)])
def test_rabi_fit_noiseless(freq, amp):
    truth = RabiModel.from_frequency(freq, amp)
    t = np.asarray(RABI_TIMES)
    fit = fit_rabi(t, truth.occupation(t))
    assert fit.omega == pytest.approx(truth.omega, rel=1e-6)
    assert fit.amplitude == pytest.approx(amp, rel=1e-6)
    assert fit.residual_norm < 1e-10


def test_rabi_amplitude_clamped():
    t = np.asarray(RABI_TIMES)
    y = np.clip(1.3 * np.sin(0.5 * 2 * math.pi * 25e3 * t) ** 2, 0, None)
    assert fit_rabi(t, y).amplitude <= 1.0


@pytest.mark.parametrize("phi", [0.0, 0.7, -2.0])
def test_ramsey_fit_noiseless(phi):
    truth = RamseyModel.from_t2(6.43e-3, 767.0, phi=phi, l0=0.5, amp=0.4)
    t = np.asarray(RAMSEY_TIMES)
    fit = fit_ramsey(t, truth.occupation(t))
    for name in ("sigma", "delta_omega", "l0", "amp"):
        assert getattr(fit, name) == pytest.approx(getattr(truth, name), rel=1e-6)
    assert math.remainder(fit.phi - phi, 2 * math.pi) == pytest.approx(0.0, abs=1e-6)
    assert fit.residual_norm < 1e-10


def test_ramsey_phase_periodicity():
    t = np.asarray(RAMSEY_TIMES)
    a = RamseyModel.from_t2(6.43e-3, 767.0, phi=0.4)
    b = RamseyModel.from_t2(6.43e-3, 767.0, phi=0.4 + 2 * math.pi)
    y = a.occupation(t)
    assert np.allclose(b.occupation(t), y, atol=1e-14)
    rng = np.random.default_rng(0)
    noisy = y + rng.normal(0, 0.02, y.size)
    fa, fb = fit_ramsey(t, noisy), fit_ramsey(t, b.occupation(t) + (noisy - y))
    assert fa.residual_norm == pytest.approx(fb.residual_norm, rel=1e-6)


def test_fits_reject_degenerate_inputs():
    t = np.asarray(RABI_TIMES)
    with pytest.raises(FitDegenerateError):
        fit_rabi(t, np.full(t.size, 0.3))
    with pytest.raises(FitDegenerateError):
        fit_rabi(t[:2], [0.0, 0.5])
    with pytest.raises(FitDegenerateError):
        fit_ramsey(t[:5], [0.1, 0.2, 0.3, 0.2, 0.1])
    with pytest.raises(ParameterDomainError):
        fit_rabi(t, RABI.occupation(t), weights=-np.ones(t.size))


# -- method comparison ---------------------------------------------------------


def test_compare_needs_calibration_for_threshold():
    g, f = PAIRS["o61"]
    series = generate_experiment(RABI, RABI_TIMES, 50, g, f, seed=0)
    with pytest.raises(CalibrationRequiredError):
        compare_methods(series, g, methods=("threshold",))


def test_compare_needs_weights_for_network():
    g, f = PAIRS["o61"]
    series = generate_experiment(RABI, RABI_TIMES, 50, g, f, seed=0)
    with pytest.raises(ConfigError):
        compare_methods(series, g, methods=("em_network",))
    with pytest.raises(ConfigError):
        compare_methods(series, g, methods=("magic",))


def test_methods_agree_on_easy_data(default_weights):
    g, f = PAIRS["long"]
    series = generate_experiment(RABI, RABI_TIMES, 2000, g, f, seed=1)
    res = compare_methods(series, g, network=default_weights, bright_calibration=f)
    freqs = [res[m].fit.frequency_hz for m in ("threshold", "em_exact", "em_network")]
    assert max(freqs) / min(freqs) - 1 < 0.01
    assert all(res[m].mean_fidelity > 0.995 for m in res)


def test_rabi_end_to_end_frequency():
    g, f = PAIRS["o61"]
    freqs = []
    for seed in range(20):
        series = generate_experiment(RABI, RABI_TIMES, 200, g, f, seed=seed)
        res = compare_methods(series, g, methods=("em_exact",))
        freqs.append(res["em_exact"].fit.frequency_hz)
    assert abs(np.median(freqs) / 25.1e3 - 1) < 0.05


def test_posterior_calibration_sanity():
    hits = total = 0
    for name in ("o61", "o72"):
        g, f = PAIRS[name]
        for seed in range(10):
            series = generate_experiment(RABI, RABI_TIMES, 200, g, f, seed=50 + seed)
            r = compare_methods(series, g, methods=("em_exact",))["em_exact"]
            hits += int(np.sum(np.abs(r.estimates - series.l_true) < 3 * np.maximum(r.sds, 1e-12)))
            total += series.l_true.size
    assert hits / total >= 0.9


def test_em_beats_threshold_at_o61():
    g, f = PAIRS["o61"]
    em, th = [], []
    for seed in range(8):
        series = generate_experiment(RABI, RABI_TIMES, 200, g, f, seed=seed)
        res = compare_methods(series, g, methods=("threshold", "em_exact"), bright_calibration=f)
        em.append(res["em_exact"].mean_fidelity)
        th.append(res["threshold"].mean_fidelity)
    assert np.mean(em) >= 0.99
    assert np.mean(em) - np.mean(th) >= 0.02


def test_per_point_em_option():
    g, f = PAIRS["o61"]
    series = generate_experiment(RABI, RABI_TIMES, 200, g, f, seed=3)
    res = compare_methods(series, g, EmConfig(), methods=("em_exact",), share_bright=False)
    assert "per_point" in res["em_exact"].em
    assert len(res["em_exact"].rows()) == 7
    assert res["em_exact"].fit_summary()["kind"] == "rabi"


def test_reference_overrides_truth():
    g, f = PAIRS["o61"]
    series = generate_experiment(RABI, RABI_TIMES, 100, g, f, seed=2)
    ref = np.full(7, 0.5)
    res = compare_methods(series, g, methods=("em_exact",), reference=ref)
    assert np.array_equal(res["em_exact"].reference, ref)
