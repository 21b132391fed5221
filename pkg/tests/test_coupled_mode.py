import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twpahb.circuit import snail_chain_100
from twpahb.coupled_mode import (
    CMParams, analytic_m2, cm_integrate, cm_rhs, compare_cm_vs_hb, conversion_distance, first_period,
    mismatch_weight, mu_of_dispersion, params_for_circuit, xi_of_position,
)
from twpahb.devices import extract_c3
from twpahb.linear import cell_wavenumber


# --- right-hand side ------------------------------------------------------


def test_pure_pump_drives_second_harmonic():
    d = cm_rhs(0.0, np.array([1.0, 0.0]), CMParams(M=2))
    np.testing.assert_allclose(d, [0.0, -1.0])


def test_zero_state_has_zero_derivative():
    np.testing.assert_array_equal(cm_rhs(0.3, np.zeros(5), CMParams(M=5, mu=1.2)), 0.0)


def test_m2_reduces_to_two_coupled_equations():
    # da1 = a2 a1* e^{i mu xi}, da2 = -a1^2 e^{-i mu xi}
    p = CMParams(M=2, mu=0.8)
    a = np.array([0.6 + 0.2j, -0.3 + 0.5j])
    xi = 0.7
    ph = np.exp(1j * p.mu * xi)
    np.testing.assert_allclose(cm_rhs(xi, a, p), [a[1] * np.conj(a[0]) * ph, -a[0] ** 2 / ph])


def test_mismatch_weights():
    assert mismatch_weight(1, 1) == 1.0
    assert mismatch_weight(1, 2) == 3.0
    assert mismatch_weight(2, 3) == 15.0


@pytest.mark.parametrize("xi", [0.0, 0.4, 1.3, 2.9])
def test_analytic_solution_zeroes_the_residual(xi):
    a1, a2 = analytic_m2(xi)
    d = cm_rhs(xi, np.array([a1, a2]), CMParams(M=2))
    # d sech = -sech tanh, d(-tanh) = -sech^2
    np.testing.assert_allclose(d, [-a1 * np.tanh(xi), -a1 ** 2], atol=1e-15)


# --- integration ----------------------------------------------------------


def test_rk4_matches_sech_tanh():
    tr = cm_integrate(CMParams(M=2), 3.0)
    a1, a2 = analytic_m2(tr.xi)
    assert np.max(np.abs(tr.a[:, 0] - a1)) < 1e-6
    assert np.max(np.abs(tr.a[:, 1] - a2)) < 1e-6


def test_conversion_distance_is_arcsinh_one():
    assert conversion_distance() == pytest.approx(0.881373587, abs=1e-9)
    a1, a2 = analytic_m2(conversion_distance())
    assert abs(a1) == pytest.approx(abs(a2), abs=1e-15)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([2, 3, 5]), st.floats(min_value=-3, max_value=3), st.integers(0, 2 ** 32 - 1))
def test_total_power_is_conserved(M, mu, seed):
    rng = np.random.default_rng(seed)
    a0 = rng.normal(size=M) + 1j * rng.normal(size=M)
    a0 /= np.linalg.norm(a0)
    tr = cm_integrate(CMParams(M=M, mu=mu), 3.0, a0)
    assert np.max(np.abs(tr.total_power - 1.0)) < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([2, 3, 5]), st.floats(min_value=0.1, max_value=5))
def test_mismatch_sign_does_not_change_magnitudes(M, mu):
    plus = cm_integrate(CMParams(M=M, mu=mu), 2.0, steps=1024)
    minus = cm_integrate(CMParams(M=M, mu=-mu), 2.0, steps=1024)
    np.testing.assert_allclose(np.abs(plus.a), np.abs(minus.a), atol=1e-9)


def test_large_mismatch_blocks_conversion():
    mu = 200.0
    tr = cm_integrate(CMParams(M=2, mu=mu), 3.0, steps=16384)
    # a2 ~ (1 - e^{-i mu xi}) / (i mu): bounded by 2 / mu
    assert np.max(np.abs(tr.a[:, 1])) < 2.2 / mu
    assert np.min(np.abs(tr.a[:, 0])) > 0.99


def test_integration_rejects_bad_inputs():
    with pytest.raises(ValueError):
        cm_integrate(CMParams(M=2), 0.0)
    with pytest.raises(ValueError):
        cm_integrate(CMParams(M=3), 1.0, init=[1.0, 0.0])
    with pytest.raises(ValueError):
        CMParams(M=1)
    with pytest.raises(ValueError):
        CMParams(omega1=3.0, omega0=2.0)


# --- effective length and mismatch ---------------------------------------------


def test_xi_of_position():
    p = CMParams(c3=1.1, omega1=1.0, omega0=2.0, cell_pitch=15e-6, A1_0=0.4)
    assert xi_of_position(0.0, p) == 0.0
    assert xi_of_position(15e-6, p) == pytest.approx(p.xi_per_cell)
    assert p.xi_per_cell == pytest.approx(1.1 * 0.25 * 0.4 / 4)
    doubled = CMParams(c3=1.1, omega1=1.0, omega0=2.0, cell_pitch=15e-6, A1_0=0.8)
    assert xi_of_position(30e-6, doubled) == pytest.approx(4 * xi_of_position(15e-6, p))


def test_mu_vanishes_for_linear_dispersion_and_scales_inversely():
    p = CMParams(A1_0=0.5)
    assert mu_of_dispersion(0.3, 0.6, p) == 0.0
    q = CMParams(A1_0=1.0)
    assert mu_of_dispersion(0.3, 0.5, q) == pytest.approx(mu_of_dispersion(0.3, 0.5, p) / 2)


def test_circuit_parameters_use_device_and_bloch_dispersion():
    c = snail_chain_100()
    p = params_for_circuit(c, 10e9, 1e-6, M=5)
    cell = c.cells[0]
    assert p.c3 == pytest.approx(extract_c3(cell.device))
    k1 = cell_wavenumber(cell, 10e9)[0]
    k2 = cell_wavenumber(cell, 20e9)[0]
    assert k2 > 2 * k1  # the discrete ladder disperses upward towards cutoff
    assert p.mu > 0
    assert p.mu * p.xi_per_cell == pytest.approx(k2 - 2 * k1)
    assert p.A1_0 == pytest.approx(2 * math.pi / 2.067833848e-15 * 1e-6 / (2 * math.pi * 10e9), rel=1e-8)


# --- comparison ---------------------------------------------------------------


def test_identical_profiles_have_zero_deviation():
    p = CMParams(M=3, mu=0.5, c3=1.0, omega1=1.0, omega0=2.0, A1_0=1.6)
    tr = cm_integrate(p, 400 * p.xi_per_cell)
    cells = np.arange(400)
    profile = tr.at(cells * p.xi_per_cell)
    cmp = compare_cm_vs_hb(tr, profile, smooth=1)
    np.testing.assert_array_equal(cmp.rms, 0.0)
    assert cmp.period_error == 0.0


def test_comparison_rejects_mismatched_axes():
    p = CMParams(M=3, A1_0=1.6)
    tr = cm_integrate(p, 10 * p.xi_per_cell)
    with pytest.raises(ValueError):
        compare_cm_vs_hb(tr, np.zeros((20, 2)))
    with pytest.raises(ValueError):
        compare_cm_vs_hb(tr, np.zeros((40, 3)))


def test_first_period_of_a_cosine():
    x = np.arange(200, dtype=float)
    y = 0.5 * (1 - np.cos(2 * np.pi * x / 37.3))
    assert first_period(y) == pytest.approx(37.3, abs=0.05)


def test_first_period_skips_shallow_ripple():
    x = np.arange(200, dtype=float)
    y = 0.5 * (1 - np.cos(2 * np.pi * x / 50)) + 0.03 * np.sin(2 * np.pi * x / 3)
    assert first_period(y, smooth=3) == pytest.approx(50, abs=1.0)
