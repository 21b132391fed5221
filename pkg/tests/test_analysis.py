import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from twpahb.analysis import (
    NotReached, branch_power_flow, compression_point, default_idler, fit_slopes, gain_spectrum,
    harmonic_profile_along_chain, harmonics_vs_input_power, power_balance, ripple_spacing, solve_pump,
)
from twpahb.circuit import jj_chain_2000, jj_chain_4wm, snail_chain_100, snail_chain_440
from twpahb.hb import SolverOptions
from twpahb.linear import chain_sparams
from twpahb.spectral import IDLER, MixIndex

F_P = 6.0102e9


# --- gain spectra ---------------------------------------------------------


def test_zero_pump_gives_passive_transmission():
    circ = jj_chain_4wm(40)
    fs = np.array([3.1e9, 4.7e9, 7.9e9])
    sweep = gain_spectrum(circ, F_P, 0.0, fs, i_signal=1e-9, opts=SolverOptions(harmonics=3))
    assert sweep.converged.all()
    s21 = chain_sparams(circ, fs).s21
    np.testing.assert_allclose(sweep.gain_db, 20 * np.log10(np.abs(s21)), atol=1e-6)
    assert np.max(np.abs(sweep.gain_db)) < 0.01


@pytest.fixture(scope="module")
def short_4wm_sweep():
    circ = jj_chain_4wm(400)
    fs = [F_P - 1.0e9, F_P + 1.0e9, F_P, F_P / 2]
    return gain_spectrum(circ, F_P, 0.659e-6, fs, opts=SolverOptions(harmonics=5))


def test_four_wave_mixing_gives_gain(short_4wm_sweep):
    s = short_4wm_sweep
    assert s.converged[:2].all()
    assert np.all(s.gain_db[:2] > 1.5)
    assert np.all(np.isfinite(s.p_idler_dbm[:2]))
    assert s.idler == MixIndex(-1, 2)


def test_signal_on_pump_is_reported_as_failed(short_4wm_sweep):
    s = short_4wm_sweep
    assert not s.converged[2]
    assert math.isnan(s.gain_db[2])
    assert "pump" in s.notes[2]


def test_subharmonic_signal_uses_common_grid(short_4wm_sweep):
    s = short_4wm_sweep
    assert s.converged[3]
    assert "1/2" in s.notes[3]


def test_parallel_sweep_keeps_input_order():
    circ = jj_chain_4wm(30)
    fs = [7.5e9, 4.0e9, 5.2e9]
    opts = SolverOptions(harmonics=3)
    serial = gain_spectrum(circ, F_P, 0.4e-6, fs, opts=opts)
    parallel = gain_spectrum(circ, F_P, 0.4e-6, fs, opts=opts, jobs=2)
    np.testing.assert_array_equal(parallel.frequencies, fs)
    np.testing.assert_allclose(parallel.gain_db, serial.gain_db, atol=1e-12)


def test_signal_defaults_to_thousandth_of_pump():
    s = gain_spectrum(jj_chain_4wm(10), F_P, 0.5e-6, [5e9], opts=SolverOptions(harmonics=3))
    assert s.i_signal == pytest.approx(0.5e-9)


def test_default_idler_follows_mixing_order():
    assert default_idler(jj_chain_4wm(5)) == MixIndex(-1, 2)
    assert default_idler(jj_chain_2000(5)) == IDLER
    assert default_idler(snail_chain_440(5)) == IDLER


def test_failed_pump_marks_every_point():
    opts = SolverOptions(harmonics=3, max_iterations=0)
    s = gain_spectrum(jj_chain_4wm(20), F_P, 0.659e-6, [5e9, 7e9], opts=opts,
                      pump_solution=solve_pump(jj_chain_4wm(20), F_P, 0.659e-6, opts, power_steps=1))
    assert not s.converged.any()
    assert np.isnan(s.gain_db).all()


def test_empty_frequency_list_is_rejected():
    with pytest.raises(ValueError):
        gain_spectrum(jj_chain_4wm(5), F_P, 1e-7, [])


# --- harmonic profiles ------------------------------------------------------


@pytest.fixture(scope="module")
def snail_profile():
    return harmonic_profile_along_chain(snail_chain_100(), 10e9, 400e-9, 3, SolverOptions(harmonics=6))


def test_fundamental_dominates_at_chain_input(snail_profile):
    p = snail_profile.powers_dbm
    assert snail_profile.converged.all()
    assert np.all(p[0, 0] - p[0, 1:] > 20)
    assert np.all(np.isfinite(p))
    np.testing.assert_array_equal(snail_profile.axis, np.arange(101))


def test_power_flow_is_conserved_along_the_chain(snail_profile):
    sol = snail_profile.solutions[0]
    flow = branch_power_flow(sol)
    np.testing.assert_allclose(flow, flow[0], rtol=5e-3)
    p_src, p_load = power_balance(sol)
    assert p_load == pytest.approx(flow[0], rel=5e-3)
    assert p_src == pytest.approx(p_load, rel=1e-6)


@pytest.fixture(scope="module")
def slope_profile():
    return harmonics_vs_input_power(snail_chain_440(20), 8.5e9, np.arange(-150.0, -124.0, 4.0), 3,
                                    SolverOptions(harmonics=5))


def test_weak_drive_slopes_are_one_two_three(slope_profile):
    slopes = fit_slopes(slope_profile, -126.0)
    np.testing.assert_allclose(slopes / slopes[0], [1, 2, 3], rtol=0.02)


def test_halving_power_drops_second_harmonic_by_6db(slope_profile):
    p = slope_profile.powers_dbm[:, 1]
    # 4 dB input steps -> 8 dB second-harmonic steps in the quadratic regime
    np.testing.assert_allclose(np.diff(p)[:3], 8.0, atol=0.02)
    assert 20 * math.log10(2) == pytest.approx(6.02, abs=0.005)


def test_input_powers_must_be_monotone():
    with pytest.raises(ValueError):
        harmonics_vs_input_power(snail_chain_440(3), 8.5e9, [-120, -130, -110], 2)


def test_profile_columns():
    cols = harmonic_profile_along_chain(jj_chain_2000(5), 8e9, 0.2e-6, 2, SolverOptions(harmonics=3)).columns()
    assert list(cols) == ["cell_index", "p_h1_dbm", "p_h2_dbm"]


# --- compression and ripple -------------------------------------------------------


def test_linear_data_never_compresses():
    p = np.linspace(-130, -80, 26)
    with pytest.raises(NotReached):
        compression_point(p, p + 12.0)


def test_tanh_saturation_compression_point():
    p_in = np.arange(-30.0, 10.0, 0.1)
    amp = 10 ** (p_in / 20)
    p_out = 20 * np.log10(np.tanh(amp))
    a1 = brentq(lambda a: 20 * math.log10(math.tanh(a) / a) + 1.0, 1e-3, 10)
    assert compression_point(p_in, p_out) == pytest.approx(20 * math.log10(a1), abs=0.1)


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.2, max_value=3.0), st.floats(min_value=-5.0, max_value=5.0))
def test_compression_is_shift_invariant(db, shift):
    p_in = np.arange(-30.0, 10.0, 0.1)
    p_out = 20 * np.log10(np.tanh(10 ** (p_in / 20)))
    base = compression_point(p_in, p_out, db)
    assert compression_point(p_in + shift, p_out + shift, db) == pytest.approx(base + shift, abs=1e-9)


def test_ripple_spacing_of_synthetic_gain():
    f = np.linspace(3e9, 8e9, 401)
    g = 5 - 0.3 * ((f - 5.5e9) / 1e9) ** 2 + 0.8 * np.sin(2 * np.pi * f / 160e6)
    assert ripple_spacing(f, g) == pytest.approx(160e6, rel=0.02)


def test_ripple_spacing_ignores_failed_points():
    f = np.linspace(3e9, 8e9, 401)
    g = np.sin(2 * np.pi * f / 200e6)
    g[::37] = np.nan
    assert ripple_spacing(f, g) == pytest.approx(200e6, rel=0.03)
