"""Reduced coupled-mode model for the pump and its harmonics in a 3WM chain.

The normalized amplitudes ``a_1..a_M`` evolve along the effective length
``xi`` as

    da_m/dxi = m * ( sum_{n>m} a_n conj(a_{n-m}) e^{+i mu xi d(n-m, m)}
                     - 1/2 sum_{n<m} a_n a_{m-n} e^{-i mu xi d(n, m-n)} )

where ``d(p, q) = p q (p + q) / 2`` is the mismatch weight of the triplet
``p + q -> p + q``.  Up- and down-conversion carry opposite phases, which
makes ``sum |a_m|^2`` an exact invariant for any ``mu``.

Mapping to a circuit: ``xi`` per cell is ``c3 (w1 / w0)^2 A1(0) / 4`` with
``A1(0)`` the input node-phase amplitude of the pump, and ``|a_m|^2`` is the
power of harmonic ``m`` relative to the input pump power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .devices import KAPPA, JJParams, SNAILParams, extract_c3
from .linear import cell_linear_inductance, cell_wavenumber

DEFAULT_STEPS = 4096


@dataclass(frozen=True)
class CMParams:
    M: int = 2
    mu: float = 0.0
    c3: float = 1.0
    omega1: float = 1.0
    omega0: float = 2.0
    cell_pitch: float = 1.0
    A1_0: float = 1.0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("need at least two harmonics")
        if not self.omega0 > self.omega1:
            raise ValueError("pump must lie below the cell resonance")
        if not self.A1_0 > 0:
            raise ValueError("input amplitude must be positive")

    @property
    def xi_per_cell(self) -> float:
        return self.c3 * (self.omega1 / self.omega0) ** 2 * self.A1_0 / 4


@dataclass
class CMTrajectory:
    xi: np.ndarray
    a: np.ndarray  # (len(xi), M) complex
    params: CMParams

    @property
    def powers(self) -> np.ndarray:
        return np.abs(self.a) ** 2

    @property
    def total_power(self) -> np.ndarray:
        return self.powers.sum(axis=1)

    def at(self, xi) -> np.ndarray:
        """|a_m|^2 interpolated onto ``xi``."""
        xi = np.asarray(xi, float)
        return np.stack([np.interp(xi, self.xi, self.powers[:, m]) for m in range(self.params.M)], axis=-1)

    def columns(self):
        cols = {"xi": self.xi}
        xc = self.params.xi_per_cell
        if xc > 0:
            cols["cell_index"] = self.xi / xc
        for m in range(self.params.M):
            cols[f"abs_a{m + 1}_sq"] = self.powers[:, m]
        return cols


def mismatch_weight(p: int, q: int) -> float:
    return 0.5 * p * q * (p + q)


def cm_rhs(xi: float, a: np.ndarray, p: CMParams) -> np.ndarray:
    """da/dxi for the state ``a`` (length M, entry ``m - 1`` holds ``a_m``)."""
    M = p.M
    a = np.asarray(a, dtype=complex)
    out = np.zeros(M, dtype=complex)
    for m in range(1, M + 1):
        up = 0j
        for n in range(m + 1, M + 1):
            up += a[n - 1] * np.conj(a[n - m - 1]) * np.exp(1j * p.mu * xi * mismatch_weight(n - m, m))
        down = 0j
        for n in range(1, m):
            down += a[n - 1] * a[m - n - 1] * np.exp(-1j * p.mu * xi * mismatch_weight(n, m - n))
        out[m - 1] = m * (up - 0.5 * down)
    return out


def cm_integrate(p: CMParams, xi_end: float, init=None, steps: int = DEFAULT_STEPS) -> CMTrajectory:
    """Fixed-step RK4 from 0 to ``xi_end`` (default: the pump alone, a = (1, 0, ...))."""
    if not xi_end > 0:
        raise ValueError("xi_end must be positive")
    a = np.zeros(p.M, dtype=complex)
    if init is None:
        a[0] = 1.0
    else:
        init = np.asarray(init, dtype=complex)
        if init.shape != (p.M,):
            raise ValueError(f"initial state must have {p.M} entries")
        a[:] = init
    h = xi_end / steps
    xs = np.linspace(0.0, xi_end, steps + 1)
    traj = np.empty((steps + 1, p.M), dtype=complex)
    traj[0] = a
    for i in range(steps):
        x = xs[i]
        k1 = cm_rhs(x, a, p)
        k2 = cm_rhs(x + h / 2, a + h / 2 * k1, p)
        k3 = cm_rhs(x + h / 2, a + h / 2 * k2, p)
        k4 = cm_rhs(x + h, a + h * k3, p)
        a = a + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        traj[i + 1] = a
    return CMTrajectory(xs, traj, p)


def analytic_m2(xi) -> tuple[np.ndarray, np.ndarray]:
    """Phase-matched M = 2 solution from a pure pump: (sech xi, -tanh xi)."""
    xi = np.asarray(xi, float)
    return 1 / np.cosh(xi), -np.tanh(xi)


def conversion_distance() -> float:
    """xi where |a_1| = |a_2| for M = 2, mu = 0."""
    return math.asinh(1.0)


def xi_of_position(x, p: CMParams):
    """Effective length at physical position ``x`` (m)."""
    return p.c3 * p.omega1 ** 2 * p.A1_0 * np.asarray(x, float) / (4 * p.cell_pitch * p.omega0 ** 2)


def mu_of_dispersion(k1: float, k2: float, p: CMParams) -> float:
    """Effective mismatch from per-cell wavenumbers (rad/cell) of the pump and its second harmonic."""
    return (k2 - 2 * k1) / p.xi_per_cell


# ---------------------------------------------------------------------------
# circuit mapping


def _c3_of(device, i_dc: float) -> float:
    if isinstance(device, SNAILParams):
        return extract_c3(device, i_dc)
    if isinstance(device, JJParams):
        # U'''/U'' of a biased junction: -tan(phi0)
        return -math.tan(device.operating_phase(i_dc))
    raise TypeError(f"no 3WM coefficient for {type(device).__name__}")


def params_for_circuit(circuit, f_pump: float, v_in: float, M: int = 5) -> CMParams:
    """Coupled-mode parameters of a uniform chain driven at ``f_pump``.

    ``v_in`` is the first-harmonic voltage amplitude at the chain input
    (node 0), which sets ``A1(0) = kappa |V| / w1``.
    """
    cell = circuit.cells[0]
    i_dc = circuit.source.i_dc
    w1 = 2 * math.pi * f_pump
    l_lin = cell_linear_inductance(cell, i_dc)
    w0 = 1 / math.sqrt(l_lin * cell.c_shunt)
    pitch = circuit.cell_pitch or 1.0
    base = CMParams(M, 0.0, _c3_of(cell.device, i_dc), w1, w0, pitch, KAPPA * abs(v_in) / w1)
    k1 = float(cell_wavenumber(cell, f_pump, i_dc)[0])
    k2 = float(cell_wavenumber(cell, 2 * f_pump, i_dc)[0])
    return CMParams(M, mu_of_dispersion(k1, k2, base), base.c3, w1, w0, pitch, base.A1_0)


def hb_to_cm_profile(sol, M: int) -> np.ndarray:
    """HB node spectra as |a_m|^2 = |V_{n,m}|^2 / |V_{0,1}|^2, shape (N, M)."""
    v = sol.voltages
    bins = [sol.grid.harmonic(m) for m in range(1, M + 1)]
    return np.abs(v[:, bins]) ** 2 / abs(v[0, bins[0]]) ** 2


def first_period(profile, axis=None, smooth: int = 1) -> float:
    """Position of the first deep minimum of a profile that starts near zero.

    For the second harmonic this is one full oscillation period.  Shallow
    ripples are skipped: the minimum must follow a rise above half the
    profile maximum and fall below a quarter of it.  ``smooth > 1`` applies
    a moving average first, which removes the few-cell standing-wave
    ripple of HB profiles.  The discrete minimum is refined with a parabola
    through its neighbours.
    """
    y = np.asarray(profile, float)
    if smooth > 1:
        y = uniform_filter1d(y, smooth, mode="nearest")
    x = np.arange(y.size, dtype=float) if axis is None else np.asarray(axis, float)
    peak = np.max(y)
    above = np.nonzero(y > 0.5 * peak)[0]
    if above.size == 0:
        raise ValueError("flat profile")
    for j in range(max(int(above[0]), 1), y.size - 1):
        if y[j] < 0.25 * peak and y[j] <= y[j - 1] and y[j] <= y[j + 1]:
            y0, y1, y2 = y[j - 1], y[j], y[j + 1]
            den = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / den if den > 0 else 0.0
            return float(x[j] + shift * (x[j + 1] - x[j]))
    raise ValueError("profile has no deep interior minimum")


@dataclass
class CMComparison:
    cell_index: np.ndarray
    xi: np.ndarray
    hb: np.ndarray  # (N, M) |a_m|^2
    cm: np.ndarray  # (N, M) |a_m|^2
    rms: np.ndarray  # per harmonic
    period_hb: float
    period_cm: float

    @property
    def period_error(self) -> float:
        return abs(self.period_cm - self.period_hb) / self.period_hb

    def columns(self):
        cols = {"cell_index": self.cell_index, "xi": self.xi}
        for m in range(self.hb.shape[1]):
            cols[f"hb_a{m + 1}_sq"] = self.hb[:, m]
            cols[f"cm_a{m + 1}_sq"] = self.cm[:, m]
        return cols


def compare_cm_vs_hb(traj: CMTrajectory, hb_profile: np.ndarray, xi_per_cell: float | None = None,
                     smooth: int = 5) -> CMComparison:
    """Per-harmonic RMS deviation of |a_m|^2 after mapping cell index to xi.

    Periods come from the second harmonic; the HB profile is smoothed over
    ``smooth`` cells before locating its minimum.
    """
    hb_profile = np.asarray(hb_profile, float)
    M = traj.params.M
    if hb_profile.ndim != 2 or hb_profile.shape[1] != M:
        raise ValueError(f"HB profile must have shape (cells, {M})")
    xc = traj.params.xi_per_cell if xi_per_cell is None else xi_per_cell
    cells = np.arange(hb_profile.shape[0], dtype=float)
    xi = cells * xc
    if xi[-1] > traj.xi[-1] * (1 + 1e-12):
        raise ValueError("trajectory is shorter than the chain")
    cm = traj.at(xi)
    rms = np.sqrt(np.mean((cm - hb_profile) ** 2, axis=0))
    return CMComparison(cells, xi, hb_profile, cm, rms, first_period(hb_profile[:, 1], cells, smooth),
                        first_period(cm[:, 1], cells))
