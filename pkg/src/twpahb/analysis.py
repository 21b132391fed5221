"""TWPA experiments on top of the harmonic-balance solver.

Gain spectra (signal + pump grids), pump-harmonic profiles along the
chain and versus input power, compression and ripple extraction.

Power convention: a peak phasor ``V`` into ``R`` carries ``|V|^2 / (2 R)``;
gain is transducer gain, the signal power delivered to the load over the
available power of the incident signal (``I_s^2 R_source / 2``).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .circuit import Circuit, Tone
from .devices import SNAILParams
from .hb import (
    HBSolution, SolverOptions, available_power_dbm, build_problem, hbahb_continue,
    incident_amplitude, nonlinear_currents, pack, power_dbm, solve, solve_continuation,
)
from .spectral import IDLER, SIGNAL, CollisionError, MixIndex, build_tone_grid


class NotReached(ValueError):
    """The sweep never compresses by the requested amount."""


# ---------------------------------------------------------------------------
# gain spectra


@dataclass
class GainSweep:
    f_pump: float
    i_pump: float
    i_signal: float
    frequencies: np.ndarray
    gain_db: np.ndarray
    p_idler_dbm: np.ndarray
    converged: np.ndarray
    idler: MixIndex
    harmonics: tuple
    notes: list = field(default_factory=list)  # per-point remarks (fallbacks, failures)

    @property
    def failed(self) -> np.ndarray:
        return ~self.converged

    def columns(self):
        return {
            "f_signal_hz": self.frequencies,
            "gain_db": self.gain_db,
            "p_idler_dbm": self.p_idler_dbm,
            "converged": self.converged.astype(int),
        }


def default_idler(circuit: Circuit) -> MixIndex:
    """{-1, 1} for three-wave mixing (dc or flux bias), {-1, 2} for pure four-wave mixing."""
    biased = circuit.source.i_dc != 0.0
    fluxed = any(isinstance(c.device, SNAILParams) and c.device.flux_F % math.pi != 0 for c in circuit.cells)
    return IDLER if (biased or fluxed) else MixIndex(-1, 2)


def solve_pump(circuit: Circuit, f_pump: float, i_pump: float, opts: SolverOptions,
               power_steps: int = 4) -> HBSolution:
    """Pump-only steady state, with power continuation when the first attempt fails."""
    k = opts.harmonics if isinstance(opts.harmonics, int) else opts.harmonics[-1]
    circ = circuit.with_drive(Tone(f_pump, i_pump))
    grid = build_tone_grid([f_pump], [k], opts.truncation)
    prob = build_problem(circ, grid, opts.oversampling)
    sol = solve(prob, opts)
    if not sol.converged and power_steps > 1:
        sol = solve_continuation(prob, opts, power_steps)
    return sol


def _signal_point(args):
    circuit, f_pump, i_pump, fs, i_sig, opts, pump_x, pump_k, idler = args
    k = pump_k
    circ = circuit.with_drive(Tone(f_pump, i_pump), Tone(fs, i_sig))
    out_node = circ.n_cells
    r_load = circ.r_load
    p_avail = available_power_dbm(i_sig, circ.source.r_source)
    try:
        grid = build_tone_grid([fs, f_pump], [1, k], opts.truncation)
    except CollisionError:
        return _degenerate_point(circ, f_pump, fs, i_sig, opts, pump_x, k, p_avail)
    prob = build_problem(circ, grid, opts.oversampling)
    pump_grid = build_tone_grid([f_pump], [k], opts.truncation)
    x0 = _embed_pump(prob, pump_grid, pump_x)
    sol = solve(prob, replace(opts, harmonics=(1, k)), x0)
    if not sol.converged:
        return (math.nan, math.nan, False, f"no convergence (|F| = {sol.residual_norm:.2e} A)")
    v_sig = abs(sol.voltage(out_node, SIGNAL))
    try:
        v_idl = abs(sol.voltage(out_node, idler))
        p_idl = float(power_dbm(v_idl, r_load))
    except KeyError:
        p_idl = math.nan
    return (float(power_dbm(v_sig, r_load)) - p_avail, p_idl, True, "")


def _embed_pump(prob, pump_grid, pump_x):
    """Pump-only unknowns re-indexed onto a two-tone problem."""
    n_nodes = prob.n_nodes
    xr = np.asarray(pump_x).reshape(n_nodes, pump_grid.size, 2)
    v_old = xr[..., 0] + 1j * xr[..., 1]
    v_old[:, 0] = xr[:, 0, 0]
    psi_dc = xr[prob.slot_node, 0, 1]
    idx = pump_grid.embed_map(prob.grid)
    v = np.zeros((n_nodes, prob.n_bins), dtype=complex)
    v[:, idx] = v_old
    return pack(prob, v, psi_dc)


def _degenerate_point(circ, f_pump, fs, i_sig, opts, pump_x, k, p_avail):
    """Signal on a rational fraction p/q of the pump: solve on the f_pump/q subharmonic grid."""
    ratio = Fraction(fs / f_pump).limit_denominator(4)
    p, q = ratio.numerator, ratio.denominator
    if abs(fs - f_pump * p / q) > 1e3 or q == 1:
        return (math.nan, math.nan, False, "signal coincides with a pump harmonic")
    f0 = f_pump / q
    grid = build_tone_grid([f0], [q * k], opts.truncation)
    prob = build_problem(circ, grid, opts.oversampling)
    n_nodes = prob.n_nodes
    pump_grid_size = k + 1
    xr = np.asarray(pump_x).reshape(n_nodes, pump_grid_size, 2)
    v_old = xr[..., 0] + 1j * xr[..., 1]
    v_old[:, 0] = xr[:, 0, 0]
    v = np.zeros((n_nodes, prob.n_bins), dtype=complex)
    v[:, q * np.arange(pump_grid_size)] = v_old
    x0 = pack(prob, v, xr[prob.slot_node, 0, 1])
    sol = solve(prob, replace(opts, harmonics=q * k), x0)
    if not sol.converged:
        return (math.nan, math.nan, False, "degenerate point did not converge")
    # for three-wave mixing at f_p / 2 signal and idler share the bin (phase-sensitive gain)
    v_sig = abs(sol.voltages[circ.n_cells, p])
    p_out = float(power_dbm(v_sig, circ.r_load))
    return (p_out - p_avail, p_out, True, f"signal = {p}/{q} pump, solved on the f_pump/{q} grid")


def gain_spectrum(circuit: Circuit, f_pump: float, i_pump: float, frequencies: Sequence[float],
                  i_signal: float | None = None, opts: SolverOptions = SolverOptions(harmonics=5),
                  jobs: int = 1, idler: MixIndex | None = None,
                  pump_solution: HBSolution | None = None) -> GainSweep:
    """Signal gain versus frequency; failed points are recorded, never interpolated.

    The pump-only solution seeds every point (the signal is perturbative).
    A signal on a simple fraction of the pump (e.g. f_p / 2) collides with
    its own idler; that point is solved on the common subharmonic grid.
    """
    frequencies = np.asarray(frequencies, dtype=float)
    if frequencies.size == 0:
        raise ValueError("empty signal frequency list")
    k = opts.harmonics if isinstance(opts.harmonics, int) else opts.harmonics[-1]
    i_sig = i_pump / 1000 if i_signal is None else i_signal
    idler = default_idler(circuit) if idler is None else idler
    pump = pump_solution or solve_pump(circuit, f_pump, i_pump, replace(opts, harmonics=k))
    if not pump.converged:
        n = frequencies.size
        return GainSweep(f_pump, i_pump, i_sig, frequencies, np.full(n, np.nan), np.full(n, np.nan),
                         np.zeros(n, bool), idler, (1, k), ["pump did not converge"] * n)
    tasks = [(circuit, f_pump, i_pump, float(fs), i_sig, opts, pump.x, k, idler) for fs in frequencies]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_signal_point, tasks))
    else:
        results = [_signal_point(t) for t in tasks]
    gain, p_idl, ok, notes = (list(col) for col in zip(*results))
    return GainSweep(f_pump, i_pump, i_sig, frequencies, np.array(gain), np.array(p_idl),
                     np.array(ok, dtype=bool), idler, (1, k), notes)


# ---------------------------------------------------------------------------
# harmonic profiles


@dataclass
class HarmonicProfile:
    axis: np.ndarray
    axis_name: str  # "cell_index" or "p_in_dbm"
    powers_dbm: np.ndarray  # (len(axis), M)
    converged: np.ndarray
    solutions: list = field(default_factory=list, repr=False)

    @property
    def n_harmonics(self) -> int:
        return self.powers_dbm.shape[1]

    def columns(self):
        cols = {self.axis_name: self.axis}
        for m in range(self.n_harmonics):
            cols[f"p_h{m + 1}_dbm"] = self.powers_dbm[:, m]
        return cols


def node_harmonic_powers(sol: HBSolution, n_harmonics: int, r_ref: float | None = None) -> np.ndarray:
    """(N, M) node powers of pump harmonics 1..M, dBm."""
    if r_ref is None:
        r_ref = sol.problem.circuit.r_load
    v = sol.voltages
    bins = [sol.grid.harmonic(m) for m in range(1, n_harmonics + 1)]
    return power_dbm(np.abs(v[:, bins]), r_ref)


def harmonic_profile_along_chain(circuit: Circuit, f_pump: float, i_pump: float, n_harmonics: int,
                                 opts: SolverOptions | None = None, power_steps: int = 4) -> HarmonicProfile:
    k = max(n_harmonics, (opts.harmonics if opts and isinstance(opts.harmonics, int) else 0))
    opts = replace(opts or SolverOptions(), harmonics=k)
    sol = solve_pump(circuit, f_pump, i_pump, opts, power_steps)
    powers = node_harmonic_powers(sol, n_harmonics)
    axis = np.arange(sol.problem.n_nodes)
    return HarmonicProfile(axis, "cell_index", powers, np.full(axis.size, sol.converged), [sol])


def harmonics_vs_input_power(circuit: Circuit, f_pump: float, p_in_dbm: Sequence[float], n_harmonics: int,
                             opts: SolverOptions | None = None, keep_solutions: bool = False) -> HarmonicProfile:
    """Output powers of pump harmonics versus available input power (HBAHB-chained sweep)."""
    p_in = np.asarray(p_in_dbm, dtype=float)
    if p_in.size > 1 and not (np.all(np.diff(p_in) > 0) or np.all(np.diff(p_in) < 0)):
        raise ValueError("input powers must be monotone for seeded sweeps")
    k = max(n_harmonics, (opts.harmonics if opts and isinstance(opts.harmonics, int) else 0))
    opts = replace(opts or SolverOptions(), harmonics=k)
    grid = build_tone_grid([f_pump], [k], opts.truncation)
    out = np.full((p_in.size, n_harmonics), np.nan)
    ok = np.zeros(p_in.size, dtype=bool)
    sols = []
    prev = None
    for i, p in enumerate(p_in):
        circ = circuit.with_drive(Tone(f_pump, incident_amplitude(p, circuit.source.r_source)))
        prob = build_problem(circ, grid, opts.oversampling)
        x0 = None if prev is None else hbahb_continue(prev, prob)
        sol = solve(prob, opts, x0)
        if not sol.converged:
            sol = solve_continuation(prob, opts, 6, x0)
        ok[i] = sol.converged
        if sol.converged:
            out[i] = node_harmonic_powers(sol, n_harmonics)[-1]
            prev = sol
        if keep_solutions:
            sols.append(sol)
    return HarmonicProfile(p_in, "p_in_dbm", out, ok, sols)


def fit_slopes(profile: HarmonicProfile, max_p_in: float) -> np.ndarray:
    """dB/dB slope of every harmonic over input powers at or below ``max_p_in``."""
    sel = (profile.axis <= max_p_in) & profile.converged
    if sel.sum() < 2:
        raise ValueError("need at least two converged points in the fit window")
    x = profile.axis[sel]
    return np.array([np.polyfit(x, profile.powers_dbm[sel, m], 1)[0] for m in range(profile.n_harmonics)])


def compression_point(p_in, p_out, db: float = 1.0, reference_points: int = 2) -> float:
    """Input power where gain (p_out - p_in) falls ``db`` below its small-signal value.

    The small-signal gain is the mean over the first ``reference_points`` samples.
    """
    p_in = np.asarray(p_in, float)
    gain = np.asarray(p_out, float) - p_in
    ref = np.mean(gain[:reference_points])
    drop = ref - gain
    idx = np.nonzero(drop >= db)[0]
    if idx.size == 0:
        raise NotReached(f"gain never drops by {db} dB")
    i = idx[0]
    if i == 0:
        return float(p_in[0])
    d0, d1 = drop[i - 1], drop[i]
    return float(p_in[i - 1] + (db - d0) / (d1 - d0) * (p_in[i] - p_in[i - 1]))


# ---------------------------------------------------------------------------
# power bookkeeping and ripple


def branch_power_flow(sol: HBSolution) -> np.ndarray:
    """Cycle-mean power entering each series element from its input node, summed over bins (W).

    The series element is the nonlinear branch together with any capacitor
    across the same node pair (junction capacitance).
    """
    prob = sol.problem
    i_br = nonlinear_currents(prob, sol.phases)
    v = sol.voltages
    w = prob.omega
    a, b = prob.branch_nodes[:, 0], prob.branch_nodes[:, 1]
    va = np.where((a >= 0)[:, None], v[a], 0.0)
    vb = np.where((b >= 0)[:, None], v[b], 0.0)
    c_par = np.zeros(len(a))
    pair = {(int(p), int(q)): k for k, (p, q) in enumerate(prob.branch_nodes)}
    for n1, n2, cap in prob.netlist.capacitors:
        k = pair.get((n1, n2), pair.get((n2, n1)))
        if k is not None:
            c_par[k] += cap
    i_tot = i_br + 1j * w[None, :] * c_par[:, None] * (va - vb)
    weights = np.full(prob.n_bins, 0.5)
    weights[0] = 1.0
    return np.sum(weights * np.real(va * np.conj(i_tot)), axis=1)


def power_balance(sol: HBSolution) -> tuple[float, float]:
    """(source-delivered, load-dissipated) cycle-mean powers over all bins (W)."""
    prob = sol.problem
    circ = prob.circuit
    v = sol.voltages
    weights = np.full(prob.n_bins, 0.5)
    weights[0] = 1.0
    v0, vn = v[0], v[-1]
    p_src = np.sum(weights * (np.real(v0 * np.conj(prob.source[0])) - np.abs(v0) ** 2 / circ.source.r_source))
    p_src += np.sum(weights * np.real(vn * np.conj(prob.source[-1])))  # bias-tee return (dc only)
    p_load = np.sum(weights * np.abs(vn) ** 2 / circ.r_load)
    return float(p_src), float(p_load)


def ripple_spacing(frequencies, gain_db) -> float:
    """Dominant period (Hz) of the gain ripple after removing a smooth trend."""
    f = np.asarray(frequencies, float)
    g = np.asarray(gain_db, float)
    ok = np.isfinite(g)
    f, g = f[ok], g[ok]
    if f.size < 8:
        raise ValueError("too few points to resolve a ripple")
    trend = np.polyval(np.polyfit(f - f.mean(), g, 3), f - f.mean())
    r = g - trend
    df = np.median(np.diff(f))
    n = 16 * f.size
    spec = np.abs(np.fft.rfft(r * np.hanning(r.size), n))
    freqs = np.fft.rfftfreq(n, df)
    lo = 2.0 / (f[-1] - f[0])  # ignore periods longer than half the span
    sel = freqs >= lo
    j = int(np.argmax(np.where(sel, spec, 0.0)))
    return float(1.0 / freqs[j])
