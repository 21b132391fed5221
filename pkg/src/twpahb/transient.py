"""Time-domain integration of Josephson networks.

Nodal trapezoidal integration with branch phases as states:

    C dv/dt + G v + A i(psi) = i_src(t),     dpsi/dt = kappa A^T v

The phase update of the trapezoidal rule is substituted into KCL so each
step is a Newton solve in the node voltages only, with Jacobian
``2C/h + G + (h kappa / 2) A diag(i'(psi)) A^T``.  The factorisation is
reused across iterations and steps until convergence slows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csc_matrix, diags
from scipy.sparse.linalg import splu

from .circuit import GROUND, Circuit, CurrentSource, Netlist, Tone
from .devices import KAPPA, JJParams, LinearInductor

log = logging.getLogger(__name__)


class NoSteadyState(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class NewtonFailure(RuntimeError):
    pass


class ThresholdNotCrossed(ValueError):
    pass


@dataclass
class ODESystem:
    """Assembled nodal system of a netlist."""

    netlist: Netlist
    c: csc_matrix
    g: csc_matrix
    a: csc_matrix
    devices: tuple
    dynamic: np.ndarray  # nodes whose C row is non-zero

    @property
    def n_nodes(self) -> int:
        return self.netlist.n_nodes

    @property
    def n_branches(self) -> int:
        return len(self.devices)

    @property
    def state_count(self) -> int:
        return self.n_branches + int(self.dynamic.sum())

    def branch_current(self, psi):
        out = np.empty_like(psi)
        for idx, dev in self._groups():
            out[idx] = dev.current(psi[idx])
        return out

    def branch_dcurrent(self, psi):
        out = np.empty_like(psi)
        for idx, dev in self._groups():
            out[idx] = dev.dcurrent(psi[idx])
        return out

    def _groups(self):
        cache = self.__dict__.get("_group_cache")
        if cache is None:
            groups: dict = {}
            for k, dev in enumerate(self.devices):
                groups.setdefault(dev, []).append(k)
            cache = [(np.array(v), dev) for dev, v in groups.items()]
            self.__dict__["_group_cache"] = cache
        return cache


def assemble_odes(circuit: Circuit | Netlist) -> ODESystem:
    net = circuit.to_netlist() if isinstance(circuit, Circuit) else circuit
    c = net.capacitance_matrix().tocsc()
    g = net.conductance_matrix().tocsc()
    a = net.incidence().tocsc()
    dynamic = np.asarray(abs(c).sum(axis=1)).ravel() > 0
    return ODESystem(net, c, g, a, tuple(dev for _, _, dev in net.branches), dynamic)


@dataclass
class TransientResult:
    time: np.ndarray
    voltages: np.ndarray  # (T, len(probe_nodes))
    phases: np.ndarray  # (T, len(probe_branches))
    probe_nodes: tuple
    probe_branches: tuple
    steady_state_time: float | None
    last_period_voltages: np.ndarray | None = None  # (S, n_nodes), uniform over one period
    last_period_phases: np.ndarray | None = None  # (S, n_branches)
    period: float | None = None
    steps: int = 0
    newton_iterations: int = 0
    factorizations: int = 0
    flags: dict = field(default_factory=dict)

    def node_trace(self, node: int) -> np.ndarray:
        return self.voltages[:, self.probe_nodes.index(node)]

    def branch_trace(self, branch: int) -> np.ndarray:
        return self.phases[:, self.probe_branches.index(branch)]


@dataclass(frozen=True)
class TransientOptions:
    t_stop: float
    dt_max: float
    period: float | None = None  # steady-state detection period (pump period)
    steady_tol: float = 1e-4
    min_steady_time: float = 0.0
    stop_at_steady: bool = False
    newton_tol: float = 1e-12  # A, on the KCL residual
    max_newton: int = 50
    probe_nodes: Sequence[int] | None = None
    probe_branches: Sequence[int] | None = None
    record_every: int = 1
    samples_per_period_min: int = 20
    turn_on: float = 0.0  # raised-cosine ramp of the ac tones (s); 0 switches them on abruptly


def initial_state(sys: ODESystem, phases=None):
    """Dc state: zero node voltages and the given (or zero) branch phases."""
    psi = np.zeros(sys.n_branches) if phases is None else np.asarray(phases, float).copy()
    return np.zeros(sys.n_nodes), psi


def _consistent_start(sys: ODESystem, v, psi, t0, ac_scale=1.0):
    """Solve algebraic (capacitor-free) nodes at t0; return v and C dv/dt."""
    src = sys.netlist.source_current(t0, ac_scale)
    alg = ~sys.dynamic
    if alg.any():
        idx = np.nonzero(alg)[0]
        g_kk = sys.g[idx][:, idx].toarray()
        rest = src - sys.g @ v - sys.a @ sys.branch_current(psi)
        if np.linalg.matrix_rank(g_kk) == len(idx):
            v = v.copy()
            v[idx] += np.linalg.solve(g_kk, rest[idx])
    i_c = src - sys.g @ v - sys.a @ sys.branch_current(psi)
    i_c[~sys.dynamic] = 0.0
    return v, i_c


def run_transient(sys: ODESystem, opts: TransientOptions, v0=None, psi0=None) -> TransientResult:
    """Trapezoidal integration from ``(v0, psi0)`` (default: dc state at zero phase).

    When ``opts.period`` is given, the step divides the period exactly and
    steady state is declared once two consecutive periods of all node
    voltages differ by less than ``steady_tol`` (relative RMS).
    """
    if opts.period is not None:
        spp = max(math.ceil(opts.period / opts.dt_max - 1e-9), opts.samples_per_period_min)
        h = opts.period / spp
    else:
        spp = None
        h = opts.dt_max
    n_steps = int(math.ceil(opts.t_stop / h - 1e-9))
    n, nb = sys.n_nodes, sys.n_branches

    v = np.zeros(n) if v0 is None else np.asarray(v0, float).copy()
    psi = np.zeros(nb) if psi0 is None else np.asarray(psi0, float).copy()
    v, i_c = _consistent_start(sys, v, psi, 0.0, _turn_on(0.0, opts.turn_on))
    at = sys.a.T.tocsc()
    c2h = (2.0 / h) * sys.c
    base = (c2h + sys.g).tocsc()
    k_half = 0.5 * h * KAPPA

    probe_nodes = tuple(range(n)) if opts.probe_nodes is None else tuple(opts.probe_nodes)
    probe_branches = tuple(range(nb)) if opts.probe_branches is None else tuple(opts.probe_branches)
    n_rec = n_steps // opts.record_every + 1
    times = np.empty(n_rec)
    vrec = np.empty((n_rec, len(probe_nodes)))
    prec = np.empty((n_rec, len(probe_branches)))
    times[0], vrec[0], prec[0] = 0.0, v[list(probe_nodes)], psi[list(probe_branches)]
    rec = 1

    ring_v = ring_p = None
    if spp is not None:
        ring_v = np.zeros((spp, n))
        ring_p = np.zeros((spp, nb))
        prev_period = None

    lu = None
    lu_age = 0
    newton_total = 0
    factorizations = 0
    steady_time = None
    dpsi_prev = KAPPA * (at @ v)

    def factor(psi_guess):
        nonlocal factorizations
        jac = base + k_half * (sys.a @ diags(sys.branch_dcurrent(psi_guess)) @ at)
        factorizations += 1
        return splu(jac.tocsc())

    for step in range(1, n_steps + 1):
        t = step * h
        src = sys.netlist.source_current(t, _turn_on(t, opts.turn_on))
        # history terms
        hist_c = c2h @ v + i_c
        psi_base = psi + 0.5 * h * dpsi_prev
        v_new = v.copy()
        converged = False
        for it in range(opts.max_newton):
            psi_new = psi_base + k_half * (at @ v_new)
            i_br = sys.branch_current(psi_new)
            resid = base @ v_new - hist_c + sys.a @ i_br - src
            err = np.max(np.abs(resid)) if n else 0.0
            if err < opts.newton_tol:
                converged = True
                break
            if lu is None or (it >= 3 and it % 3 == 0) or lu_age > 200:
                lu = factor(psi_new)
                lu_age = 0
            v_new = v_new - lu.solve(resid)
            newton_total += 1
        if not converged:
            # fresh factorisation before giving up
            for it in range(opts.max_newton):
                psi_new = psi_base + k_half * (at @ v_new)
                resid = base @ v_new - hist_c + sys.a @ sys.branch_current(psi_new) - src
                if np.max(np.abs(resid)) < opts.newton_tol:
                    converged = True
                    break
                lu = factor(psi_new)
                v_new = v_new - lu.solve(resid)
                newton_total += 1
            if not converged:
                raise NewtonFailure(f"trapezoidal step failed at t = {t:.4g} s (|F| = {np.max(np.abs(resid)):.3g} A)")
        lu_age += 1
        psi = psi_base + k_half * (at @ v_new)
        i_c = c2h @ (v_new - v) - i_c
        i_c[~sys.dynamic] = 0.0
        v = v_new
        dpsi_prev = KAPPA * (at @ v)

        if step % opts.record_every == 0 and rec < n_rec:
            times[rec] = t
            vrec[rec] = v[list(probe_nodes)]
            prec[rec] = psi[list(probe_branches)]
            rec += 1

        if spp is not None:
            slot = step % spp
            ring_v[slot] = v
            ring_p[slot] = psi
            if slot == 0 and step >= spp:
                cur = ring_v.copy()
                if prev_period is not None and steady_time is None and t >= opts.min_steady_time:
                    scale = np.sqrt(np.mean(cur ** 2))
                    diff = np.sqrt(np.mean((cur - prev_period) ** 2))
                    if scale == 0.0 or diff <= opts.steady_tol * scale:
                        steady_time = t
                        if opts.stop_at_steady:
                            break
                prev_period = cur

    result = TransientResult(
        time=times[:rec], voltages=vrec[:rec], phases=prec[:rec],
        probe_nodes=probe_nodes, probe_branches=probe_branches,
        steady_state_time=steady_time, period=opts.period, steps=step,
        newton_iterations=newton_total, factorizations=factorizations,
    )
    if spp is not None:
        # row s holds the state at t_end - period + s h (row 0 equals the final state by periodicity)
        order = (np.arange(spp) + step) % spp
        result.last_period_voltages = ring_v[order]
        result.last_period_phases = ring_p[order]
        result.flags["last_period_start"] = (step - spp) * h
        if steady_time is None:
            result.flags["steady"] = False
            raise NoSteadyState(f"no steady state within {opts.t_stop:.3g} s", result)
        result.flags["steady"] = True
    return result


def _turn_on(t: float, ramp: float) -> float:
    if ramp <= 0 or t >= ramp:
        return 1.0
    return 0.5 * (1 - math.cos(math.pi * t / ramp))


def simulate_circuit(circuit: Circuit, opts: TransientOptions) -> TransientResult:
    """Transient of a TWPA chain started from its dc operating point."""
    sys = assemble_odes(circuit)
    return run_transient(sys, opts, psi0=circuit.operating_phases())


# ---------------------------------------------------------------------------
# measurements


def envelope_crossings(time, trace, threshold: float = 0.5, final_window: float | None = None) -> float:
    """First time |trace - baseline| reaches ``threshold`` of its final amplitude."""
    trace = np.asarray(trace)
    if final_window is None:
        final_window = 0.1 * (time[-1] - time[0])
    tail = time >= time[-1] - final_window
    base = trace[0]
    amp = np.max(np.abs(trace[tail] - base))
    if amp == 0:
        raise ThresholdNotCrossed("trace never departs from its initial value")
    above = np.nonzero(np.abs(trace - base) >= threshold * amp)[0]
    if above.size == 0:
        raise ThresholdNotCrossed("threshold never crossed")
    i = above[0]
    if i == 0:
        return float(time[0])
    # linear interpolation of the crossing
    y0, y1 = abs(trace[i - 1] - base), abs(trace[i] - base)
    frac = (threshold * amp - y0) / (y1 - y0) if y1 != y0 else 0.0
    return float(time[i - 1] + frac * (time[i] - time[i - 1]))


@dataclass(frozen=True)
class Wavefront:
    nodes: tuple
    arrival: np.ndarray
    delay: float  # last probe minus first probe
    velocity: float | None


def measure_wavefront(res: TransientResult, node_indices: Sequence[int], threshold: float = 0.5,
                      pitch: float | None = None, final_window: float | None = None) -> Wavefront:
    times = np.array([envelope_crossings(res.time, res.node_trace(nd), threshold, final_window)
                      for nd in node_indices])
    delay = float(times[-1] - times[0])
    cells = abs(node_indices[-1] - node_indices[0])
    vel = None if pitch is None or delay <= 0 else pitch * cells / delay
    return Wavefront(tuple(node_indices), times, delay, vel)


def dominant_frequency(time, trace) -> float:
    """Frequency of the strongest spectral line, refined by parabolic interpolation."""
    x = np.asarray(trace) - np.mean(trace)
    n = len(x)
    dt = time[1] - time[0]
    win = np.hanning(n)
    spec = np.abs(np.fft.rfft(x * win, 8 * n))
    k = int(np.argmax(spec[1:])) + 1
    if 1 <= k < len(spec) - 1:
        a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
        k = k + 0.5 * (a - c) / (a - 2 * b + c)
    return float(k / (8 * n * dt))


def zero_crossing_frequency(time, trace) -> float:
    """Mean frequency from upward mean-crossings (robust for non-sinusoidal traces)."""
    x = np.asarray(trace) - np.mean(trace)
    idx = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    if idx.size < 2:
        raise ValueError("fewer than two oscillation periods")
    tc = time[idx] - x[idx] * (time[idx + 1] - time[idx]) / (x[idx + 1] - x[idx])
    return float((len(tc) - 1) / (tc[-1] - tc[0]))


# ---------------------------------------------------------------------------
# canned experiments


@dataclass(frozen=True)
class VCOResult:
    frequency: float
    expected: float
    time: np.ndarray
    current: np.ndarray


def jj_voltage_oscillation(v_dc: float, junction: JJParams = JJParams(1e-6), periods: int = 40,
                           r_source: float = 1e-4, points_per_period: int = 200) -> VCOResult:
    """Junction fed by a stiff dc voltage source; the supercurrent oscillates at V/Phi0."""
    f_j = v_dc * KAPPA / (2 * math.pi)
    net = Netlist(
        1,
        capacitors=(),
        resistors=((0, GROUND, r_source),),
        branches=((0, GROUND, junction),),
        sources=(CurrentSource(GROUND, 0, dc=v_dc / r_source),),
    )
    sys = assemble_odes(net)
    h = 1.0 / (f_j * points_per_period)
    res = run_transient(sys, TransientOptions(t_stop=periods / f_j, dt_max=h))
    current = junction.i_c * np.sin(res.phases[:, 0])
    return VCOResult(zero_crossing_frequency(res.time, current), f_j, res.time, current)


@dataclass(frozen=True)
class StaircaseResult:
    pulse_currents: np.ndarray  # ramp current at each pulse peak (A)
    spacings: np.ndarray
    delta_i: float  # median spacing
    areas: np.ndarray  # flux carried per interior pulse, integrated over its ramp period (Wb)
    time: np.ndarray
    ramp_current: np.ndarray
    voltage: np.ndarray


def squid_netlist(loop_l: float, junction: JJParams, ramp: float, i_bias: float,
                  r_shunt: float) -> Netlist:
    """Symmetric dc SQUID with the loop inductance in its left arm.

    Node 0 is the top of the loop, node 1 sits between the inductor and the
    left junction.  The bias enters node 0; the ramp is injected into the
    left arm at node 1 and returns through node 0, so it only adds flux.
    """
    cj = junction.c_j
    caps = ((1, GROUND, cj), (0, GROUND, cj)) if cj > 0 else ()
    return Netlist(
        2,
        capacitors=caps,
        resistors=((1, GROUND, r_shunt), (0, GROUND, r_shunt)),
        branches=((0, 1, LinearInductor(loop_l)), (1, GROUND, junction), (0, GROUND, junction)),
        sources=(CurrentSource(GROUND, 0, dc=i_bias), CurrentSource(0, 1, ramp=ramp)),
    )


def squid_flux_staircase(loop_l: float = 100e-12, ramp: float = 20e-6 / 1e-9,
                         junction: JJParams = JJParams(10e-6), i_bias: float | None = None,
                         r_shunt: float = 2.0, i_stop: float = 120e-6,
                         points_per_pulse: int = 40) -> StaircaseResult:
    """Ramp flux into a symmetric SQUID and record the single-flux-quantum pulses.

    Returns the ramp current at each pulse and the voltage-time area per
    pulse of the left junction (the one the flux enters through).
    """
    if i_bias is None:
        # with no bias both junctions share each slip and the pulses come
        # every 2 Phi0 / L; a bias of one I_c makes the left junction slip alone
        i_bias = junction.i_c
    net = squid_netlist(loop_l, junction, ramp, i_bias, r_shunt)
    sys = assemble_odes(net)
    # resolve the switching time scale Phi0 / (2 pi I_c R)
    tau = 1.0 / (KAPPA * junction.i_c * r_shunt)
    if junction.c_j > 0:
        tau = min(tau, math.sqrt(junction.l_j0 * junction.c_j))
    h = tau / points_per_pulse * 2 * math.pi
    t_stop = i_stop / ramp
    # start from the dc state carrying the bias
    psi0 = _squid_dc_phases(loop_l, junction, i_bias)
    v0 = np.zeros(2)
    res = run_transient(sys, TransientOptions(t_stop=t_stop, dt_max=h, max_newton=80), v0=v0, psi0=psi0)
    v_left = res.node_trace(1)
    i_ramp = ramp * res.time
    peaks = _find_pulses(v_left)
    if peaks.size < 4:
        raise ValueError("fewer than four flux pulses detected; lengthen the ramp")
    t_peak = np.array([_interpolated_peak_time(res.time, v_left, p) for p in peaks])
    currents = ramp * t_peak
    spacings = np.diff(currents)
    # split the record at midpoints between pulses; each window carries one pulse.
    # The first two windows still hold the start-up transient and the last is
    # cut by the end of the record, so only the periodic interior is kept.
    mids = np.concatenate(([0], (peaks[:-1] + peaks[1:]) // 2, [len(v_left) - 1]))
    areas = np.array([np.trapezoid(v_left[mids[i]:mids[i + 1] + 1], res.time[mids[i]:mids[i + 1] + 1])
                      for i in range(2, len(peaks) - 1)])
    return StaircaseResult(currents, spacings, float(np.median(spacings[1:])),
                           areas, res.time, i_ramp, v_left)


def _interpolated_peak_time(t, v, i):
    if i == 0 or i == len(v) - 1:
        return float(t[i])
    a, b, c = np.abs(v[i - 1:i + 2])
    den = a - 2 * b + c
    shift = 0.5 * (a - c) / den if den != 0 else 0.0
    return float(t[i] + shift * (t[i + 1] - t[i]))


def _squid_dc_phases(loop_l, junction, i_bias):
    # equal split of the bias, no circulating current
    phi = math.asin(min(0.5 * i_bias / junction.i_c, 0.999))
    return np.array([0.0, phi, phi])


def _find_pulses(v, rel: float = 0.3) -> np.ndarray:
    peak = np.max(np.abs(v))
    if peak == 0:
        return np.array([], dtype=int)
    above = np.abs(v) >= rel * peak
    starts = np.nonzero(above[1:] & ~above[:-1])[0] + 1
    if above[0]:
        starts = np.concatenate(([0], starts))
    ends = np.nonzero(~above[1:] & above[:-1])[0] + 1
    if above[-1]:
        ends = np.concatenate((ends, [len(v)]))
    return np.array([s + int(np.argmax(np.abs(v[s:e]))) for s, e in zip(starts, ends)], dtype=int)


def pump_delay_run(circuit: Circuit, f_pump: float, i_pump: float, t_stop: float,
                   dt_max: float | None = None, probes: Sequence[int] | None = None) -> TransientResult:
    """Launch a pump tone (sine start, no step) into a chain and record probe nodes."""
    tone = Tone(f_pump, i_pump, -math.pi / 2)
    circ = circuit.with_drive(tone)
    if probes is None:
        probes = (0, circ.n_cells // 2, circ.n_cells)
    if dt_max is None:
        dt_max = 1.0 / (f_pump * 40)
    opts = TransientOptions(t_stop=t_stop, dt_max=dt_max, probe_nodes=probes, probe_branches=())
    return simulate_circuit(circ, opts)
