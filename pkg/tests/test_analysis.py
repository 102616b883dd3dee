import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specdn.analysis import (Mdc, extract_mdc, fit_kink, fit_mdc_lorentzian, gaussian_kernel,
                             gaussian_smooth, lorentzian_model, nearest_row, second_derivative,
                             trace_dispersion, trace_energies, trace_rms_error)
from specdn.errors import DegenerateData, OutOfRange, TooFewSamples
from specdn.experiment import KINK, kink_config, kink_truth, trace_window
from specdn.noise import sample_poisson_counts
from specdn.spectrum import AxisInfo, Spectrum
from specdn.synth import BandSpec, SynthConfig, synth_spectrum


def test_smooth_identity_and_constant():
    s = Spectrum.from_array(np.random.default_rng(0).random((20, 30)))
    assert gaussian_smooth(s, (0, 0)) == s
    c = Spectrum.from_array(np.full((20, 30), 3.0))
    np.testing.assert_allclose(gaussian_smooth(c, (2.0, 3.5)).values, 3.0, rtol=1e-14)


def test_smooth_impulse_moment():
    x = np.zeros((41, 41))
    x[20, 20] = 1.0
    out = gaussian_smooth(Spectrum.from_array(x), (2.0, 2.0)).values
    r = np.arange(41) - 20
    assert (out.sum(axis=1) * r ** 2).sum() == pytest.approx(4.0, rel=0.02)
    assert (out.sum(axis=0) * r ** 2).sum() == pytest.approx(4.0, rel=0.02)


@given(st.floats(0.0, 4.0), st.floats(0.0, 4.0), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_smooth_preserves_mass(se, sk, seed):
    v = np.random.default_rng(seed).random((24, 33))
    out = gaussian_smooth(Spectrum.from_array(v), (se, sk)).values
    assert out.sum() == pytest.approx(v.sum(), rel=1e-6)


def test_kernel_truncation():
    g = gaussian_kernel(1.5)
    assert g.size == 2 * 6 + 1 and g.sum() == pytest.approx(1.0, abs=1e-15)


def test_second_derivative_quadratic_and_ramp():
    k_ax = AxisInfo("momentum", -1.0, 1.0, 21)
    e_ax = AxisInfo("energy", 0.0, 1.0, 5)
    k = k_ax.values
    a = 0.7
    quad = Spectrum(np.tile(a * k ** 2, (5, 1)), e_ax, k_ax)
    d2 = second_derivative(quad, "momentum").values
    np.testing.assert_allclose(d2[:, 1:-1], 2 * a, rtol=1e-9)
    ramp = Spectrum(np.tile(2 + k, (5, 1)), e_ax, k_ax)
    np.testing.assert_allclose(second_derivative(ramp, "momentum").values[:, 1:-1], 0,
                               atol=1e-9)


def test_second_derivative_too_small():
    with pytest.raises(TooFewSamples):
        second_derivative(Spectrum.from_array(np.ones((4, 2))), "momentum")


@given(st.integers(0, 2 ** 31), st.floats(0.0, 2.0))
@settings(max_examples=25, deadline=None)
def test_second_derivative_commutes_with_flips(seed, sigma):
    v = np.random.default_rng(seed).random((12, 15))
    s = Spectrum.from_array(v)
    flipped = Spectrum.from_array(v[::-1])
    np.testing.assert_allclose(second_derivative(flipped, "momentum", sigma).values,
                               second_derivative(s, "momentum", sigma).values[::-1], atol=1e-9)
    flipped = Spectrum.from_array(v[:, ::-1])
    np.testing.assert_allclose(second_derivative(flipped, "energy", sigma).values,
                               second_derivative(s, "energy", sigma).values[:, ::-1], atol=1e-9)


def test_second_derivative_tracks_noisy_band():
    cfg = kink_config(64)
    p = synth_spectrum(cfg)
    noisy = sample_poisson_counts(p, 1e5, np.random.default_rng(0))
    d2 = second_derivative(noisy, "momentum", 2.0).values
    e = cfg.energy_axis.values
    k = cfg.momentum_axis.values
    step = cfg.momentum_axis.step
    rows = np.nonzero(e < cfg.fermi_level - 3 * cfg.energy_axis.step)[0]
    truth = kink_truth(e[rows])
    inside = (truth > k[2]) & (truth < k[-3])
    found = k[np.argmin(d2[rows], axis=1)]
    hits = np.abs(found - truth)[inside] <= step
    assert hits.mean() >= 0.9


def test_nearest_row_rules():
    s = Spectrum(np.ones((5, 6)), AxisInfo("energy", 0.0, 4.0, 5), AxisInfo("k", 0, 1, 6))
    assert nearest_row(s, 0.0) == 0
    assert nearest_row(s, 1.5) == 1
    assert nearest_row(s, 1.6) == 2
    assert nearest_row(s, 4.0) == 4
    with pytest.raises(OutOfRange):
        nearest_row(s, 4.5)
    s = Spectrum.from_array(np.random.default_rng(0).random((5, 6)))
    mdc = extract_mdc(s, s.energy_axis.values[3])
    assert np.array_equal(mdc.intensity, s.values[3]) and mdc.row == 3


def test_mdc_needs_four_samples():
    with pytest.raises(ValueError):
        Mdc(np.arange(3.0), np.ones(3), 0.0)


def test_fit_noiseless_lorentzian():
    k = np.linspace(-0.5, 0.5, 101)
    y = lorentzian_model(k, 2.0, 0.1, 0.05)
    fit = fit_mdc_lorentzian(Mdc(k, y, 0.0))
    assert fit.converged
    assert fit.peak_position == pytest.approx(0.1, rel=1e-3)
    assert fit.width == pytest.approx(0.05, rel=1e-3)
    assert fit.residual_norm < 1e-8 * 2.0


def test_fit_with_linear_background():
    k = np.linspace(-0.5, 0.5, 101)
    amp = 1.5
    y = lorentzian_model(k, amp, -0.12, 0.04, 0.2, 0.3 * amp)
    fit = fit_mdc_lorentzian(Mdc(k, y, 0.0))
    got = [fit.amplitude, fit.peak_position, fit.width, *fit.background]
    np.testing.assert_allclose(got, [amp, -0.12, 0.04, 0.2, 0.45], rtol=0.01)


def test_fit_symmetric_input():
    k = np.linspace(-0.4, 0.4, 81)
    fit = fit_mdc_lorentzian(Mdc(k, lorentzian_model(k, 1.0, 0.0, 0.07, 0.1), 0.0))
    assert abs(fit.peak_position) < 1e-9


def test_fit_flat_input():
    k = np.linspace(-0.4, 0.4, 20)
    with pytest.raises(DegenerateData):
        fit_mdc_lorentzian(Mdc(k, np.ones(20), 0.0))


@given(st.floats(-0.3, 0.3), st.floats(0.02, 0.1), st.floats(0.2, 5.0))
@settings(max_examples=30, deadline=None)
def test_fit_recovers_random_peaks(k0, w, amp):
    k = np.linspace(-0.5, 0.5, 121)
    fit = fit_mdc_lorentzian(Mdc(k, lorentzian_model(k, amp, k0, w, 0.05 * amp), 0.0))
    assert fit.converged and fit.width > 0
    assert fit.peak_position == pytest.approx(k0, abs=1e-6)
    assert fit.width == pytest.approx(w, rel=1e-4)


def test_trace_energies():
    assert trace_energies(0.0, 0.0, 0.1).size == 0
    np.testing.assert_allclose(trace_energies(0.0, 0.3, 0.1), [0.0, 0.1, 0.2])
    np.testing.assert_allclose(trace_energies(0.3, 0.0, -0.1), [0.3, 0.2, 0.1])
    s = Spectrum.from_array(np.ones((8, 8)))
    assert trace_dispersion(s, (0.0, 0.0), 0.01) == []


def test_trace_parabolic_band():
    de = 0.4 / 63
    band = BandSpec("parabolic", {"k0": -0.1, "curvature": 1.5, "offset": -0.28}, gamma=2 * de)
    cfg = SynthConfig(bands=(band,), temperature=de, fermi_level=0.0)
    p = synth_spectrum(cfg)
    tr = trace_dispersion(p, (-0.2, -0.02), de, momentum_window=(-0.1, 0.5))
    rows = [nearest_row(p, e) for e, _ in tr]
    e = cfg.energy_axis.values[rows]
    truth = -0.1 + np.sqrt((e + 0.28) / 1.5)
    rms = trace_rms_error(tr, truth, cfg.momentum_axis.step)
    assert rms < 0.2


def test_trace_kink_energy():
    cfg = kink_config(64, background=0.0)
    p = synth_spectrum(cfg)
    e_from, e_to, step = trace_window(cfg)
    tr = trace_dispersion(p, (e_from, e_to), step)
    rows = [nearest_row(p, e) for e, _ in tr]
    e = cfg.energy_axis.values[rows]
    assert trace_rms_error(tr, kink_truth(e), cfg.momentum_axis.step) < 0.2
    eb, _ = fit_kink(e, [r.peak_position for _, r in tr])
    assert abs(eb - KINK["kink_energy"]) <= 2 * cfg.energy_axis.step


def test_trace_rms_penalty():
    class R:
        def __init__(self, k):
            self.peak_position = k

    tr = [(0.0, R(0.0)), (0.1, R(float("nan"))), (0.2, R(5.0))]
    assert trace_rms_error(tr, [0.0, 0.0, 0.0], 0.1, window=(-1, 1)) == 0.0
    got = trace_rms_error(tr, [0.0, 0.0, 0.0], 0.1, lost_penalty=10.0, window=(-1, 1))
    assert got == pytest.approx(np.sqrt(200 / 3))
