import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twpahb.circuit import GROUND, CurrentSource, Netlist, Tone, jj_chain_2000, uniform_chain
from twpahb.devices import KAPPA, PHI0, JJParams
from twpahb.linear import unit_cell_metrics
from twpahb.transient import (
    NoSteadyState, ThresholdNotCrossed, TransientOptions, assemble_odes, envelope_crossings,
    jj_voltage_oscillation, measure_wavefront, pump_delay_run, run_transient, simulate_circuit,
    squid_flux_staircase,
)


def small_chain(n=5, i_dc=0.0, amp=0.3e-6, f=5e9):
    return uniform_chain(JJParams(1.4e-6), 108.6e-15, n, i_dc=i_dc, tones=(Tone(f, amp),))


# --- state-space assembly -------------------------------------------------


def test_single_cell_has_two_states():
    assert assemble_odes(uniform_chain(JJParams(1e-6), 100e-15, 1)).state_count == 2


@pytest.mark.parametrize("n", [1, 7, 40])
def test_state_count_is_twice_cell_count(n):
    assert assemble_odes(uniform_chain(JJParams(1e-6), 100e-15, n)).state_count == 2 * n


def test_zero_drive_gives_zero_response():
    circ = uniform_chain(JJParams(1.4e-6), 108.6e-15, 10)
    res = simulate_circuit(circ, TransientOptions(t_stop=1e-9, dt_max=5e-12))
    assert np.all(res.voltages == 0.0)
    assert np.all(res.phases == 0.0)


def test_dc_bias_is_a_fixed_point():
    circ = uniform_chain(JJParams(1.4e-6), 108.6e-15, 10, i_dc=0.7e-6)
    res = simulate_circuit(circ, TransientOptions(t_stop=0.5e-9, dt_max=5e-12))
    assert np.max(np.abs(res.voltages)) < 1e-15
    np.testing.assert_allclose(res.phases[-1], math.asin(0.5), atol=1e-12)


# --- Josephson voltage-frequency relation --------------------------------


@pytest.mark.parametrize("v_dc, f_expected", [(2e-6, 0.9672e9), (6e-6, 2.9016e9)])
def test_voltage_to_frequency(v_dc, f_expected):
    res = jj_voltage_oscillation(v_dc)
    assert res.frequency == pytest.approx(f_expected, rel=2e-3)
    assert res.frequency == pytest.approx(v_dc / PHI0, rel=1e-6)


@settings(max_examples=8, deadline=None)
@given(st.floats(min_value=0.5e-6, max_value=20e-6))
def test_voltage_to_frequency_property(v_dc):
    res = jj_voltage_oscillation(v_dc, periods=20)
    assert res.frequency == pytest.approx(v_dc * KAPPA / (2 * math.pi), rel=1e-5)


# --- flux quantization ---------------------------------------------------


def test_squid_pulse_spacing_is_one_flux_quantum():
    res = squid_flux_staircase(loop_l=100e-12)
    assert res.delta_i * 100e-12 == pytest.approx(PHI0, rel=1e-2)
    assert res.delta_i == pytest.approx(20.68e-6, rel=1e-2)
    assert res.areas.size >= 2
    np.testing.assert_allclose(res.areas, PHI0, rtol=1e-2)


def test_squid_doubling_inductance_halves_spacing():
    a = squid_flux_staircase(loop_l=100e-12)
    b = squid_flux_staircase(loop_l=200e-12)
    assert b.delta_i == pytest.approx(a.delta_i / 2, rel=1e-2)


def test_squid_without_ramp_range_raises():
    with pytest.raises(ValueError):
        squid_flux_staircase(loop_l=100e-12, i_stop=30e-6)


# --- integrator accuracy and symmetry -------------------------------------


def _steady_period(circ, spp, periods=60):
    f = circ.source.tones[0].frequency
    opts = TransientOptions(t_stop=periods / f, dt_max=1 / (f * spp), period=1 / f,
                            steady_tol=1e-3)
    return simulate_circuit(circ, opts)


def test_dt_halving_is_second_order():
    circ = small_chain()
    out = [_steady_period(circ, spp).last_period_voltages[:, -1] for spp in (40, 80, 160)]
    coarse = out[0]
    mid = out[1][::2]
    fine = out[2][::4]
    rms = np.sqrt(np.mean(fine ** 2))
    e1 = np.sqrt(np.mean((coarse - fine) ** 2))
    e2 = np.sqrt(np.mean((mid - fine) ** 2))
    assert e2 < 1e-3 * rms
    # Richardson: the error against the finest run drops ~4x per halving (5x for exact order 2)
    assert 3.0 < e1 / e2 < 6.0
    assert np.sqrt(np.mean((out[2][::2] - out[1]) ** 2)) < 1e-3 * rms


def test_output_is_half_wave_symmetric_without_bias():
    res = _steady_period(small_chain(amp=0.5e-6), 80)
    v = res.last_period_voltages[:, -1]
    half = len(v) // 2
    scale = np.max(np.abs(v))
    assert np.max(np.abs(v[:half] + v[half:])) < 2e-3 * scale


def test_output_is_asymmetric_with_bias():
    res = _steady_period(small_chain(i_dc=0.7e-6, amp=0.5e-6), 80)
    v = res.last_period_voltages[:, -1]
    v = v - v.mean()
    half = len(v) // 2
    scale = np.max(np.abs(v))
    assert np.max(np.abs(v[:half] + v[half:])) > 2e-2 * scale


def test_energy_balance_over_steady_period():
    circ = small_chain(n=8, amp=0.5e-6)
    res = _steady_period(circ, 160, periods=120)
    v = res.last_period_voltages
    f = circ.source.tones[0].frequency
    h = 1 / f / v.shape[0]
    t = res.flags["last_period_start"] + h * np.arange(v.shape[0])
    i_src = circ.to_netlist().source_current(t)[:, 0]
    p_in = np.mean(i_src * v[:, 0] - v[:, 0] ** 2 / circ.source.r_source)
    p_load = np.mean(v[:, -1] ** 2 / circ.r_load)
    assert p_load == pytest.approx(p_in, rel=5e-3)


def test_missing_steady_state_is_flagged():
    circ = small_chain()
    opts = TransientOptions(t_stop=3e-9, dt_max=5e-12, period=0.2e-9, steady_tol=1e-12)
    with pytest.raises(NoSteadyState) as info:
        simulate_circuit(circ, opts)
    assert info.value.result is not None
    assert info.value.result.flags["steady"] is False


def test_algebraic_node_is_allowed():
    # a junction between two nodes where only one carries capacitance
    j = JJParams(1e-6)
    net = Netlist(2, capacitors=((1, GROUND, 50e-15),), resistors=((0, GROUND, 50.0), (1, GROUND, 50.0)),
                  branches=((0, 1, j),), sources=(CurrentSource(GROUND, 0, tones=(Tone(5e9, 0.2e-6),)),))
    res = run_transient(assemble_odes(net), TransientOptions(t_stop=1e-9, dt_max=2e-12))
    assert np.all(np.isfinite(res.voltages))
    assert np.max(np.abs(res.voltages[:, 1])) > 0


# --- wavefront and group velocity -----------------------------------------


def test_delay_scales_with_cell_count():
    circ = jj_chain_2000(400)
    res = pump_delay_run(circ, 8e9, 200e-9, 4e-9, probes=(0, 200, 400))
    wf = measure_wavefront(res, (0, 200, 400), pitch=15e-6, final_window=0.5e-9)
    half = wf.arrival[1] - wf.arrival[0]
    assert half == pytest.approx(wf.delay / 2, rel=0.05)
    m = unit_cell_metrics(jj_chain_2000().cells[0].device.inductance(0.7e-6), 108.6e-15, 15e-6)
    assert wf.velocity == pytest.approx(m.v_group, rel=0.05)


def test_threshold_not_crossed():
    t = np.linspace(0, 1, 11)
    with pytest.raises(ThresholdNotCrossed):
        envelope_crossings(t, np.zeros_like(t))


@pytest.mark.slow
def test_2000_cell_delay():
    res = pump_delay_run(jj_chain_2000(), 8e9, 200e-9, 16e-9, probes=(0, 1000, 2000))
    wf = measure_wavefront(res, (0, 1000, 2000), pitch=15e-6, final_window=2e-9)
    assert wf.delay == pytest.approx(11.7e-9, rel=0.1)
    assert wf.arrival[1] - wf.arrival[0] == pytest.approx(wf.delay / 2, rel=0.05)
