"""Harmonic-balance solver for chains of Josephson/SNAIL branches.

The circuit is split into a linear part (capacitors, resistors, sources),
handled per frequency through nodal admittances, and the nonlinear
branches, evaluated in time on the grid's sampling lattice.

Unknowns are node-voltage phasors stored node-major with real and
imaginary parts interleaved: ``x[2 * (node * B + b) + {0, 1}]`` for ``B``
grid bins, giving ``2 N B`` reals for ``N`` nodes.  The dc bin has no
imaginary part, so its imaginary slot is reused: the slot of node ``k + 1``
holds the dc phase of branch ``k`` (the 1/(j w) relation between phase and
voltage is singular at dc).  The matching residual row enforces zero dc
voltage across that branch.  Slots without a branch are pinned to zero.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres, splu

from .circuit import GROUND, Circuit, Netlist
from .devices import KAPPA
from .spectral import (
    BOX, DEFAULT_OVERSAMPLING, MixIndex, ToneGrid, build_tone_grid, lattice_to_phasors,
    spectrum_to_waveform,
)

log = logging.getLogger(__name__)

METHODS = ("auto", "direct_lu", "gmres")
_METHOD_ALIASES = {"lu": "direct_lu", "direct": "direct_lu"}


class SingularJacobian(RuntimeError):
    pass


class MaxIterations(RuntimeError):
    """Newton stopped before meeting the tolerance; ``solution`` holds the best iterate."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


@dataclass(frozen=True)
class SolverOptions:
    harmonics: int | tuple[int, int] = 7
    truncation: str = BOX
    method: str = "auto"
    abs_tol_factor: float = 1e-15  # times the circuit current scale
    current_floor: float = 1e-12  # A
    rel_tol: float = 1e-9
    max_iterations: int = 50
    damping: float = 1.0  # first trial step scale
    backtrack: float = 0.5
    max_halvings: int = 12
    oversampling: int = DEFAULT_OVERSAMPLING
    initial_guess: str = "dc"  # dc | transient | prior
    gmres_restart: int = 60
    gmres_maxiter: int = 2000
    gmres_tol: float = 1e-12
    direct_threshold: int = 5000  # unknowns below which "auto" always picks LU
    direct_fill_limit: float = 5e7  # above the threshold, LU while the banded fill estimate stays below this
    fd_validation: bool = False

    def __post_init__(self):
        method = _METHOD_ALIASES.get(self.method, self.method)
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.abs_tol_factor > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        h = self.harmonics if isinstance(self.harmonics, tuple) else (self.harmonics,)
        if any(int(k) < 1 for k in h):
            raise ValueError("harmonic orders must be >= 1")
        if self.initial_guess not in ("dc", "transient", "prior"):
            raise ValueError(f"unknown initial guess {self.initial_guess!r}")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# problem assembly


@dataclass
class HBProblem:
    circuit: Circuit | None
    netlist: Netlist
    grid: ToneGrid
    shape: tuple[int, ...]
    g: sp.csr_matrix
    c: sp.csr_matrix
    source: np.ndarray  # (N, B) complex Norton injection phasors
    branch_nodes: np.ndarray  # (nb, 2) node indices, -1 for ground
    devices: tuple
    slot_node: np.ndarray  # node whose dc-imaginary slot stores branch k's dc phase
    g_ref: float  # scales the dc branch-voltage constraint rows
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.netlist.n_nodes

    @property
    def n_bins(self) -> int:
        return self.grid.size

    @property
    def n_branches(self) -> int:
        return len(self.devices)

    @property
    def n_unknowns(self) -> int:
        return 2 * self.n_nodes * self.n_bins

    @property
    def omega(self) -> np.ndarray:
        return 2 * math.pi * self.grid.frequencies

    @property
    def current_scale(self) -> float:
        return float(np.max(np.abs(self.source))) if self.source.size else 0.0

    def with_source_scale(self, scale: float, dc_scale: float = 1.0) -> "HBProblem":
        """Copy with ac injections scaled by ``scale`` (power continuation)."""
        src = self.source * scale
        src[:, 0] = self.source[:, 0] * dc_scale
        out = replace(self, source=src)
        out._cache = self._cache  # structure is unchanged
        return out

    # -- structure shared by residual and Jacobian ---------------------------

    def _structure(self):
        s = self._cache.get("structure")
        if s is not None:
            return s
        grid, shape = self.grid, self.shape
        pos = np.stack([grid.orders[:, a] % shape[a] for a in range(grid.ndim)])
        diff = np.stack([(pos[a][:, None] - pos[a][None, :]) % shape[a] for a in range(grid.ndim)])
        summ = np.stack([(pos[a][:, None] + pos[a][None, :]) % shape[a] for a in range(grid.ndim)])
        d_minus = np.ravel_multi_index(tuple(diff), shape)
        d_plus = np.ravel_multi_index(tuple(summ), shape)
        groups: dict = {}
        for k, dev in enumerate(self.devices):
            groups.setdefault(dev, []).append(k)
        s = {
            "d_minus": d_minus,
            "d_plus": d_plus,
            "groups": [(np.array(v), dev) for dev, v in groups.items()],
            "lin": self._linear_triplets(),
            "nl": self._nonlinear_pattern(),
        }
        self._cache["structure"] = s
        return s

    def _linear_triplets(self):
        """COO triplets of the frequency-domain linear part and the dc constraint rows."""
        n, nb, two_b = self.n_nodes, self.n_bins, 2 * self.n_bins
        w = self.omega
        g_coo = self.g.tocoo()
        rows, cols, vals = [], [], []
        # dc bin: conductances on the real rows only
        rows.append(g_coo.row * two_b)
        cols.append(g_coo.col * two_b)
        vals.append(g_coo.data)
        # harmonic bins: [[Re y, -Im y], [Im y, Re y]]
        pattern = (abs(self.g) + abs(self.c)).tocoo()
        r, cidx = pattern.row, pattern.col
        gv = np.asarray(self.g[r, cidx]).ravel()
        cv = np.asarray(self.c[r, cidx]).ravel()
        for b in range(1, nb):
            re = gv
            im = cv * w[b]
            base_r = r * two_b + 2 * b
            base_c = cidx * two_b + 2 * b
            rows += [base_r, base_r, base_r + 1, base_r + 1]
            cols += [base_c, base_c + 1, base_c, base_c + 1]
            vals += [re, -im, im, re]
        # dc constraint rows live in each node's dc-imaginary slot
        used = np.zeros(n, dtype=bool)
        for k, (a, b_) in enumerate(self.branch_nodes):
            row = self.slot_node[k] * two_b + 1
            used[self.slot_node[k]] = True
            if a != GROUND:
                rows.append(np.array([row])); cols.append(np.array([a * two_b])); vals.append(np.array([self.g_ref]))
            if b_ != GROUND:
                rows.append(np.array([row])); cols.append(np.array([b_ * two_b])); vals.append(np.array([-self.g_ref]))
        free = np.nonzero(~used)[0]
        rows.append(free * two_b + 1)
        cols.append(free * two_b + 1)
        vals.append(np.full(free.size, self.g_ref))
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals).astype(float)

    def _nonlinear_pattern(self):
        """Index arrays placing each branch's dense conversion block into the Jacobian."""
        two_b = 2 * self.n_bins
        loc = np.arange(two_b)
        blk_rows, blk_cols, blk_src, blk_sign = [], [], [], []
        slot_rows, slot_cols, slot_src, slot_sign = [], [], [], []
        for k, (a, b) in enumerate(self.branch_nodes):
            terminals = [(a, 1.0), (b, -1.0)]
            for r_node, r_sign in terminals:
                if r_node == GROUND:
                    continue
                for c_node, c_sign in terminals:
                    if c_node == GROUND:
                        continue
                    blk_rows.append(r_node * two_b)
                    blk_cols.append(c_node * two_b)
                    blk_src.append(k)
                    blk_sign.append(r_sign * c_sign)
                slot_rows.append(r_node * two_b)
                slot_cols.append(self.slot_node[k] * two_b + 1)
                slot_src.append(k)
                slot_sign.append(r_sign)
        blk_rows = np.array(blk_rows)[:, None, None] + loc[None, :, None]
        blk_cols = np.array(blk_cols)[:, None, None] + loc[None, None, :]
        blk_rows, blk_cols = np.broadcast_arrays(blk_rows, blk_cols)
        slot_rows = np.array(slot_rows)[:, None] + loc[None, :]
        slot_cols = np.broadcast_to(np.array(slot_cols)[:, None], slot_rows.shape)
        return {
            "blk": (blk_rows.ravel(), blk_cols.ravel(), np.array(blk_src), np.array(blk_sign)),
            "slot": (slot_rows.ravel(), slot_cols.ravel(), np.array(slot_src), np.array(slot_sign)),
        }


def build_problem(circuit: Circuit | Netlist, grid: ToneGrid, oversampling: int = DEFAULT_OVERSAMPLING,
                  samples: Sequence[int] | None = None) -> HBProblem:
    """Assemble the linear admittances, source phasors and branch bindings."""
    net = circuit.to_netlist() if isinstance(circuit, Circuit) else circuit
    n, nb = net.n_nodes, grid.size
    if len(net.branches) >= n:
        raise ValueError("harmonic balance needs fewer nonlinear branches than nodes")
    shape = grid.lattice_shape(oversampling) if samples is None else tuple(int(s) for s in samples)
    source = np.zeros((n, nb), dtype=complex)
    for s in net.sources:
        inj = np.zeros(nb, dtype=complex)
        inj[0] += s.dc
        if s.ramp:
            raise ValueError("ramp sources are not periodic; use the transient engine")
        for tone in s.tones:
            inj[_bin_of(grid, tone.frequency)] += tone.amplitude * np.exp(1j * tone.phase)
        if s.pos != GROUND:
            source[s.pos] += inj
        if s.neg != GROUND:
            source[s.neg] -= inj
    branch_nodes = np.array([(a, b) for a, b, _ in net.branches], dtype=int).reshape(-1, 2)
    devices = tuple(dev for _, _, dev in net.branches)
    slot_node = np.arange(1, len(devices) + 1)
    r_ref = [r for *_, r in net.resistors]
    g_ref = 1.0 / (min(r_ref) if r_ref else 50.0)
    circ = circuit if isinstance(circuit, Circuit) else None
    return HBProblem(circ, net, grid, shape, net.conductance_matrix().tocsr(),
                     net.capacitance_matrix().tocsr(), source, branch_nodes, devices, slot_node, g_ref)


def _bin_of(grid: ToneGrid, f: float) -> int:
    i = int(np.argmin(np.abs(grid.frequencies - f)))
    if abs(grid.frequencies[i] - f) > grid.collision_tol:
        raise ValueError(f"source tone at {f:g} Hz is not on the tone grid")
    return i


def grid_for_circuit(circuit: Circuit, harmonics: int | tuple[int, int], truncation: str = BOX,
                     signal_frequency: float | None = None) -> ToneGrid:
    """Pump-only grid from the circuit's first tone, or a signal+pump grid."""
    tones = circuit.source.tones
    if not tones:
        raise ValueError("circuit has no ac tone to define a grid")
    f_pump = max(tones, key=lambda t: abs(t.amplitude)).frequency
    if signal_frequency is None:
        k = harmonics if isinstance(harmonics, int) else harmonics[-1]
        return build_tone_grid([f_pump], [k], truncation)
    ks, kp = (1, harmonics) if isinstance(harmonics, int) else harmonics
    return build_tone_grid([signal_frequency, f_pump], [ks, kp], truncation)


# ---------------------------------------------------------------------------
# unknown-vector helpers


def unpack(problem: HBProblem, x: np.ndarray):
    """Node voltage phasors (N, B) and branch dc phases (nb,)."""
    xr = x.reshape(problem.n_nodes, problem.n_bins, 2)
    v = xr[..., 0] + 1j * xr[..., 1]
    psi_dc = xr[problem.slot_node, 0, 1].copy()
    v[:, 0] = xr[:, 0, 0]
    return v, psi_dc


def pack(problem: HBProblem, v: np.ndarray, psi_dc: np.ndarray) -> np.ndarray:
    xr = np.zeros((problem.n_nodes, problem.n_bins, 2))
    xr[..., 0] = v.real
    xr[..., 1] = v.imag
    xr[:, 0, 1] = 0.0
    xr[problem.slot_node, 0, 1] = psi_dc
    return xr.ravel()


def branch_voltages(problem: HBProblem, v: np.ndarray) -> np.ndarray:
    a, b = problem.branch_nodes[:, 0], problem.branch_nodes[:, 1]
    va = np.where((a != GROUND)[:, None], v[a], 0.0)
    vb = np.where((b != GROUND)[:, None], v[b], 0.0)
    return va - vb


def branch_phases(problem: HBProblem, x: np.ndarray) -> np.ndarray:
    """Branch phase phasors (nb, B): kappa V / (j w) above dc, the dc unknown at dc."""
    v, psi_dc = unpack(problem, x)
    dv = branch_voltages(problem, v)
    psi = np.zeros_like(dv)
    w = problem.omega
    psi[:, 1:] = KAPPA * dv[:, 1:] / (1j * w[1:])
    psi[:, 0] = psi_dc
    return psi


def _device_eval(problem: HBProblem, psi_t: np.ndarray, deriv: bool):
    out = np.empty_like(psi_t)
    for idx, dev in problem._structure()["groups"]:
        out[idx] = dev.dcurrent(psi_t[idx]) if deriv else dev.current(psi_t[idx])
    return out


def nonlinear_currents(problem: HBProblem, psi: np.ndarray) -> np.ndarray:
    """Branch current phasors from branch phase phasors (time-domain evaluation)."""
    psi_t = spectrum_to_waveform(psi, problem.grid, problem.shape)
    i_t = _device_eval(problem, psi_t, deriv=False)
    axes = tuple(range(-problem.grid.ndim, 0))
    return lattice_to_phasors(problem.grid, np.fft.fftn(i_t, axes=axes, norm="forward"))


# ---------------------------------------------------------------------------
# residual and Jacobian


def _kcl(problem: HBProblem, x: np.ndarray):
    v, psi_dc = unpack(problem, x)
    w = problem.omega
    lin = (problem.g @ v) + 1j * (problem.c @ v) * w[None, :]
    psi = branch_phases(problem, x)
    i_br = nonlinear_currents(problem, psi)
    inc = np.zeros_like(v)
    a, b = problem.branch_nodes[:, 0], problem.branch_nodes[:, 1]
    ma, mb = a != GROUND, b != GROUND
    np.add.at(inc, a[ma], i_br[ma])
    np.add.at(inc, b[mb], -i_br[mb])
    return lin, inc, v, psi_dc


def residual(problem: HBProblem, x: np.ndarray) -> np.ndarray:
    """Spectral KCL error ``Y V + I_NL(V) - I_s`` in the packed real layout."""
    lin, inc, v, psi_dc = _kcl(problem, x)
    f = lin + inc - problem.source
    fr = np.zeros((problem.n_nodes, problem.n_bins, 2))
    fr[..., 0] = f.real
    fr[..., 1] = f.imag
    # dc-imaginary rows: zero dc voltage across each branch, pins elsewhere
    fr[:, 0, 1] = problem.g_ref * np.asarray(x).reshape(problem.n_nodes, problem.n_bins, 2)[:, 0, 1]
    dv_dc = branch_voltages(problem, v)[:, 0].real
    fr[problem.slot_node, 0, 1] = problem.g_ref * dv_dc
    return fr.ravel()


def _conversion_blocks(problem: HBProblem, psi: np.ndarray, diagonal_only: bool = False) -> np.ndarray:
    """Real (nb, 2B, 2B) blocks mapping packed branch-phase perturbations to current phasors."""
    s = problem._structure()
    nbins = problem.n_bins
    psi_t = spectrum_to_waveform(psi, problem.grid, problem.shape)
    g_t = _device_eval(problem, psi_t, deriv=True)
    axes = tuple(range(-problem.grid.ndim, 0))
    gc = np.fft.fftn(g_t, axes=axes, norm="forward").reshape(len(psi), -1)
    if diagonal_only:
        keep = np.zeros(gc.shape[1], dtype=bool)
        keep[0] = True
        gc = np.where(keep[None, :], gc, 0.0)
    w_out = np.full(nbins, 2.0)
    w_out[0] = 1.0
    amat = 0.5 * w_out[None, :, None] * gc[:, s["d_minus"]]
    bmat = 0.5 * w_out[None, :, None] * gc[:, s["d_plus"]]
    spl, dif = amat + bmat, amat - bmat
    r = np.empty((len(psi), 2 * nbins, 2 * nbins))
    r[:, 0::2, 0::2] = spl.real
    r[:, 0::2, 1::2] = -dif.imag
    r[:, 1::2, 0::2] = spl.imag
    r[:, 1::2, 1::2] = dif.real
    r[:, :, 1] = 0.0  # the phase has no imaginary dc part
    r[:, 1, :] = 0.0  # dc current is real; the row is a constraint row
    return r


def _phase_map(problem: HBProblem) -> np.ndarray:
    """Diagonal 2x2 blocks of d(packed phase)/d(packed branch voltage) above dc."""
    w = problem.omega
    k = np.zeros(problem.n_bins)
    k[1:] = KAPPA / w[1:]
    return k  # Re psi = k Im dv, Im psi = -k Re dv


def jacobian(problem: HBProblem, x: np.ndarray, diagonal_only: bool = False) -> sp.csc_matrix:
    """Analytic Jacobian: linear admittances plus conversion-matrix blocks."""
    s = problem._structure()
    psi = branch_phases(problem, x)
    r = _conversion_blocks(problem, psi, diagonal_only)
    k = _phase_map(problem)
    # column transform by the phase map: col 2b <- -k R[:, 2b+1], col 2b+1 <- k R[:, 2b]
    rp = np.zeros_like(r)
    rp[:, :, 0::2] = -k[None, None, :] * r[:, :, 1::2]
    rp[:, :, 1::2] = k[None, None, :] * r[:, :, 0::2]
    rp[:, :, 0] = 0.0
    rp[:, :, 1] = 0.0
    lr, lc, lv = s["lin"]
    br, bc, bsrc, bsign = s["nl"]["blk"]
    vals_blk = (rp[bsrc] * bsign[:, None, None]).ravel()
    sr, sc, ssrc, ssign = s["nl"]["slot"]
    vals_slot = (r[ssrc, :, 0] * ssign[:, None]).ravel()
    rows = np.concatenate([lr, br, sr])
    cols = np.concatenate([lc, bc, sc])
    vals = np.concatenate([lv, vals_blk, vals_slot])
    n = problem.n_unknowns
    return sp.csc_matrix((vals, (rows, cols)), shape=(n, n))


def jacobian_fd(problem: HBProblem, x: np.ndarray, step: float | None = None) -> np.ndarray:
    """Dense central finite-difference Jacobian (validation path)."""
    x = np.asarray(x, float)
    n = x.size
    out = np.empty((n, n))
    scale = np.maximum(np.abs(x), _unknown_scale(problem))
    for j in range(n):
        h = (step if step is not None else 1e-6) * scale[j]
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        out[:, j] = (residual(problem, xp) - residual(problem, xm)) / (2 * h)
    return out


def _unknown_scale(problem: HBProblem) -> np.ndarray:
    """Typical magnitude of each unknown (volts for voltages, 1 rad for dc phases)."""
    i_scale = max(problem.current_scale, 1e-9)
    v_scale = i_scale / problem.g_ref
    sc = np.full((problem.n_nodes, problem.n_bins, 2), v_scale)
    sc[:, 0, 1] = 1.0
    return sc.ravel()


# ---------------------------------------------------------------------------
# solution container


@dataclass
class HBSolution:
    problem: HBProblem
    x: np.ndarray
    residual_norm: float
    iterations: int
    method: str
    converged: bool
    wall_time: float
    history: list = field(default_factory=list)
    options: SolverOptions | None = None

    @property
    def grid(self) -> ToneGrid:
        return self.problem.grid

    @property
    def voltages(self) -> np.ndarray:
        return unpack(self.problem, self.x)[0]

    @property
    def phases(self) -> np.ndarray:
        return branch_phases(self.problem, self.x)

    def voltage(self, node: int, mix: MixIndex | int) -> complex:
        b = self._bin(mix)
        val = self.voltages[node, b]
        if isinstance(mix, MixIndex) and self.grid.is_conjugate(mix):
            val = np.conj(val)
        return complex(val)

    def _bin(self, mix) -> int:
        if isinstance(mix, (int, np.integer)):
            return self.grid.harmonic(int(mix))
        return self.grid.index_of(mix)

    def power_dbm(self, node: int, mix: MixIndex | int, r_ref: float | None = None) -> float:
        """Power of a bin into ``r_ref`` (load resistance by default), dBm."""
        if r_ref is None:
            r_ref = self.problem.circuit.r_load if self.problem.circuit is not None else 50.0
        return power_dbm(abs(self.voltage(node, mix)), r_ref)

    def input_impedance(self, mix: MixIndex | int = 1) -> complex:
        """First-harmonic input voltage over the current entering the chain at node 0."""
        circ = self.problem.circuit
        b = self._bin(mix)
        v0 = self.voltages[0, b]
        i_in = self.problem.source[0, b] - v0 / circ.source.r_source
        return complex(v0 / i_in)

    def check(self) -> "HBSolution":
        if not self.converged:
            raise MaxIterations(f"HB did not converge (|F| = {self.residual_norm:.3g} A)", self)
        return self

    def to_csv(self, nodes: Sequence[int] | None = None, header: str = "") -> str:
        """Per-node spectra: node, n, m, freq_hz, re_V, im_V."""
        buf = io.StringIO()
        if header:
            for line in header.splitlines():
                buf.write(f"# {line}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["node", "n", "m", "freq_hz", "re_V", "im_V"])
        v = self.voltages
        nodes = range(self.problem.n_nodes) if nodes is None else nodes
        for node in nodes:
            for b, mix in enumerate(self.grid.mix_indices):
                wr.writerow([node, mix.n, mix.m, repr(float(self.grid.frequencies[b])),
                             repr(float(v[node, b].real)), repr(float(v[node, b].imag))])
        return buf.getvalue()


def power_dbm(v_peak, r_ref: float = 50.0):
    """Cycle-mean power of a peak-amplitude phasor into ``r_ref``, in dBm."""
    p = np.asarray(v_peak, float) ** 2 / (2 * r_ref)
    with np.errstate(divide="ignore"):
        return 10 * np.log10(p / 1e-3)


def available_power_dbm(i_incident: float, r_source: float = 50.0) -> float:
    """Available power of an incident-wave amplitude (Norton current 2 I), dBm."""
    return float(10 * np.log10(i_incident ** 2 * r_source / 2 / 1e-3))


def incident_amplitude(p_dbm: float, r_source: float = 50.0) -> float:
    """Incident current amplitude delivering ``p_dbm`` of available power."""
    return math.sqrt(2 * 1e-3 * 10 ** (p_dbm / 10) / r_source)


# ---------------------------------------------------------------------------
# Newton solver


def dc_guess(problem: HBProblem) -> np.ndarray:
    """Zero ac voltages and the dc operating-point branch phases."""
    v = np.zeros((problem.n_nodes, problem.n_bins), dtype=complex)
    if problem.circuit is not None:
        psi_dc = problem.circuit.operating_phases()
    else:
        psi_dc = np.zeros(problem.n_branches)
    return pack(problem, v, psi_dc)


def _tolerances(problem: HBProblem, opts: SolverOptions):
    scale = max(problem.current_scale, opts.current_floor)
    return opts.abs_tol_factor * scale, scale


class _LinearSolver:
    def __init__(self, problem: HBProblem, opts: SolverOptions):
        self.problem = problem
        self.opts = opts
        method = opts.method
        if method == "auto":
            # node-major ordering keeps chain Jacobians banded, so sparse LU fill
            # grows only linearly with the cell count
            fill = problem.n_unknowns * 8.0 * problem.n_bins
            small = problem.n_unknowns < opts.direct_threshold
            method = "direct_lu" if small or fill < opts.direct_fill_limit else "gmres"
        self.method = method
        self.stats: dict = {}

    def solve(self, x: np.ndarray, f: np.ndarray) -> np.ndarray:
        jac = jacobian(self.problem, x)
        if self.method == "direct_lu":
            try:
                lu = splu(jac, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularJacobian(str(exc)) from exc
            dx = lu.solve(f)
            self.stats = {"solver": "direct_lu", "nnz_l": int(lu.L.nnz), "nnz_u": int(lu.U.nnz)}
        else:
            pre = jacobian(self.problem, x, diagonal_only=True)
            try:
                plu = splu(pre, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularJacobian(str(exc)) from exc
            m = LinearOperator(jac.shape, plu.solve)
            count = [0]

            def cb(_):
                count[0] += 1

            dx, info = gmres(jac, f, M=m, rtol=self.opts.gmres_tol, atol=0.0,
                             restart=self.opts.gmres_restart, maxiter=self.opts.gmres_maxiter,
                             callback=cb, callback_type="pr_norm")
            self.stats = {"solver": "gmres", "inner_iterations": count[0], "info": int(info)}
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("non-finite Newton step")
        return dx


def solve(problem: HBProblem, opts: SolverOptions = SolverOptions(), x0: np.ndarray | None = None,
          raise_on_failure: bool = False) -> HBSolution:
    """Damped Newton-Raphson on the spectral KCL residual."""
    t0 = time.perf_counter()
    x = dc_guess(problem) if x0 is None else np.asarray(x0, float).copy()
    abs_tol, i_scale = _tolerances(problem, opts)
    lin = _LinearSolver(problem, opts)
    f = residual(problem, x)
    fnorm = float(np.max(np.abs(f)))
    f2 = float(np.linalg.norm(f))
    best = (fnorm, x.copy())
    history = []
    converged = _converged(fnorm, abs_tol, i_scale, opts)
    it = 0
    while not converged and it < opts.max_iterations:
        it += 1
        dx = lin.solve(x, f)
        scale = opts.damping
        accepted = False
        for _ in range(opts.max_halvings + 1):
            x_try = x - scale * dx
            f_try = residual(problem, x_try)
            f2_try = float(np.linalg.norm(f_try))
            if np.isfinite(f2_try) and f2_try < f2:
                accepted = True
                break
            scale *= opts.backtrack
        if not accepted:
            # take the smallest step anyway; stalls are caught by the iteration cap
            if not np.isfinite(f2_try):
                break
        x, f, f2 = x_try, f_try, f2_try
        fnorm = float(np.max(np.abs(f)))
        if fnorm < best[0]:
            best = (fnorm, x.copy())
        rec = {"iteration": it, "residual": fnorm, "step": scale, **lin.stats}
        history.append(rec)
        log.debug("HB iter %d |F|=%.3e step=%.3g %s", it, fnorm, scale, lin.stats)
        converged = _converged(fnorm, abs_tol, i_scale, opts)
    if not converged:
        fnorm, x = best
    if opts.fd_validation:
        jac = jacobian(problem, x).toarray()
        fd = jacobian_fd(problem, x)
        err = np.max(np.abs(jac - fd)) / max(np.max(np.abs(fd)), 1e-300)
        history.append({"fd_validation": float(err)})
    sol = HBSolution(problem, x, fnorm, it, lin.method, converged, time.perf_counter() - t0, history, opts)
    if raise_on_failure:
        sol.check()
    return sol


def _converged(fnorm, abs_tol, i_scale, opts) -> bool:
    return fnorm < abs_tol or fnorm < opts.rel_tol * i_scale


# ---------------------------------------------------------------------------
# initial guesses and continuation


def hbahb_continue(prior: HBSolution, problem: HBProblem) -> np.ndarray:
    """Re-index a prior solution onto ``problem``'s grid (new bins start at zero)."""
    old = prior.problem
    if old.n_nodes != problem.n_nodes or old.n_branches != problem.n_branches:
        raise ValueError("prior solution belongs to a different circuit")
    if old.grid is problem.grid:
        return prior.x.copy()
    idx = old.grid.embed_map(problem.grid)
    v_old, psi_dc = unpack(old, prior.x)
    v = np.zeros((problem.n_nodes, problem.n_bins), dtype=complex)
    v[:, idx] = v_old
    return pack(problem, v, psi_dc)


def tahb_guess(circuit: Circuit, grid: ToneGrid, t_stop: float | None = None,
               min_steady_time: float = 0.0, steady_tol: float = 1e-4,
               samples_per_period: int | None = None, problem: HBProblem | None = None,
               turn_on: float = 20.0) -> np.ndarray:
    """Initial guess from the steady-state period of a transient run (single-tone grids).

    The tones are switched on over ``turn_on`` periods so that the start-up
    does not ring the chain near its cutoff.
    """
    from .transient import TransientOptions, simulate_circuit

    if grid.ndim != 1:
        raise ValueError("transient-assisted guesses need a single-tone grid")
    f = grid.fundamentals[0]
    spp = samples_per_period or max(40, 4 * (2 * grid.max_orders[0] + 1))
    period = 1.0 / f
    if t_stop is None:
        t_stop = max(200 * period, 2 * min_steady_time)
    opts = TransientOptions(t_stop=t_stop, dt_max=period / spp, period=period, steady_tol=steady_tol,
                            min_steady_time=min_steady_time, stop_at_steady=True,
                            probe_nodes=(0,), probe_branches=(), turn_on=turn_on * period)
    res = simulate_circuit(circuit, opts)
    problem = problem or build_problem(circuit, grid)
    v_t = res.last_period_voltages.T  # (N, S)
    coeffs = np.fft.fft(v_t, axis=-1, norm="forward")
    v = lattice_to_phasors(grid, coeffs)
    psi_dc = np.mean(res.last_period_phases, axis=0)
    return pack(problem, v, psi_dc)


def solve_continuation(problem: HBProblem, opts: SolverOptions = SolverOptions(),
                       steps: Sequence[float] | int = 8, x0: np.ndarray | None = None) -> HBSolution:
    """Power continuation: ramp the ac drive up, seeding each step with the last solution.

    A step that fails to converge is bisected (at most 6 times) before giving up.
    """
    if isinstance(steps, int):
        steps = np.linspace(1.0 / steps, 1.0, steps)
    schedule = list(steps)
    x = dc_guess(problem) if x0 is None else x0
    done = 0.0
    sol = None
    history = []
    total_it = 0
    t0 = time.perf_counter()
    splits = 0
    while schedule:
        s = schedule[0]
        sol = solve(problem.with_source_scale(s), opts, x)
        total_it += sol.iterations
        history.append({"scale": s, "iterations": sol.iterations, "residual": sol.residual_norm,
                        "converged": sol.converged})
        if sol.converged:
            x = sol.x
            done = s
            schedule.pop(0)
        else:
            if splits >= 6:
                break
            splits += 1
            schedule.insert(0, 0.5 * (done + s))
    final = replace(sol, problem=problem, iterations=total_it, wall_time=time.perf_counter() - t0,
                    history=history + sol.history)
    return final


def harmonic_continuation(circuit: Circuit, orders: Sequence[int], opts: SolverOptions = SolverOptions(),
                          power_steps: int = 1) -> HBSolution:
    """Solve on a small grid first, then re-seed progressively larger grids (HBAHB)."""
    sol = None
    for k in orders:
        grid = grid_for_circuit(circuit, k, opts.truncation)
        prob = build_problem(circuit, grid, opts.oversampling)
        if sol is None:
            sol = solve_continuation(prob, opts, power_steps) if power_steps > 1 else solve(prob, opts)
        else:
            sol = solve(prob, opts, hbahb_continue(sol, prob))
    return sol


def solve_circuit(circuit: Circuit, opts: SolverOptions = SolverOptions(),
                  signal_frequency: float | None = None, power_steps: int = 1,
                  x0: np.ndarray | None = None) -> HBSolution:
    grid = grid_for_circuit(circuit, opts.harmonics, opts.truncation, signal_frequency)
    prob = build_problem(circuit, grid, opts.oversampling)
    if x0 is None and opts.initial_guess == "transient" and grid.ndim == 1:
        x0 = tahb_guess(circuit, grid, problem=prob)
    if power_steps > 1:
        return solve_continuation(prob, opts, power_steps, x0)
    return solve(prob, opts, x0)
