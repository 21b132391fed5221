"""Josephson junction, SNAIL and SQUID constitutive relations.

Phase is the primitive branch state: a device returns its current and
``di/dphi`` for a branch phase ``phi = (2 pi / Phi0) * flux``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

#: Magnetic flux quantum h/2e (Wb), CODATA.
PHI0 = 2.067833848e-15
#: 2 pi / Phi0 (rad per V s); converts flux to phase.
KAPPA = 2.0 * math.pi / PHI0


class OverCritical(ValueError):
    """Bias at or above the critical current: the junction leaves the model."""


class NonInductive(ValueError):
    """The SNAIL's inverse inductance is not positive at this operating point."""


class NoSolution(ValueError):
    """No stable operating point carries the requested dc current."""


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class JJParams:
    i_c: float
    c_j: float = 0.0

    def __post_init__(self):
        if not self.i_c > 0:
            raise ValueError("critical current must be positive")
        if self.c_j < 0:
            raise ValueError("junction capacitance must be non-negative")

    @property
    def l_j0(self) -> float:
        return PHI0 / (2 * math.pi * self.i_c)

    @property
    def e_j(self) -> float:
        return PHI0 * self.i_c / (2 * math.pi)

    @property
    def capacitance(self) -> float:
        """Linear capacitance placed across the branch."""
        return self.c_j

    def current(self, phi):
        return jj_current(phi, self)

    def dcurrent(self, phi):
        return self.i_c * np.cos(phi)

    def operating_phase(self, i_dc: float) -> float:
        if abs(i_dc) >= self.i_c:
            raise OverCritical(f"|{i_dc}| >= i_c = {self.i_c}")
        return math.asin(i_dc / self.i_c)

    def inductance(self, i_dc: float = 0.0) -> float:
        return jj_inductance(i_dc, self)


@dataclass(frozen=True)
class SNAILParams:
    """SNAIL: one junction (branch 1) in a loop with ``n_series`` junctions (branch 2).

    ``flux_F`` is pi * Phi_ext / Phi0.  ``n_series=1`` with equal critical
    currents is a symmetric SQUID.
    """

    n_series: int
    i_c1: float
    i_c2: float
    flux_F: float = 0.0
    c_j1: float = 0.0
    c_j2: float = 0.0

    def __post_init__(self):
        if self.n_series < 1:
            raise ValueError("n_series must be >= 1")
        if not (self.i_c1 > 0 and self.i_c2 > 0):
            raise ValueError("critical currents must be positive")

    @classmethod
    def from_alpha(cls, n_series, i_c2, alpha, flux_quanta=0.0, c_j1=0.0, c_j2=0.0):
        """Build from ``alpha = i_c1 / i_c2`` and a flux bias in units of Phi0."""
        return cls(n_series, alpha * i_c2, i_c2, math.pi * flux_quanta, c_j1, c_j2)

    @property
    def alpha(self) -> float:
        return self.i_c1 / self.i_c2

    @property
    def flux_quanta(self) -> float:
        return self.flux_F / math.pi

    @property
    def l_j0_left(self) -> float:
        return PHI0 / (2 * math.pi * self.i_c1)

    @property
    def capacitance(self) -> float:
        return self.c_j1 + self.c_j2 / self.n_series

    def with_flux(self, flux_quanta: float) -> "SNAILParams":
        return SNAILParams(self.n_series, self.i_c1, self.i_c2, math.pi * flux_quanta, self.c_j1, self.c_j2)

    def current(self, phi):
        return snail_branch_currents(phi, self)[2]

    def dcurrent(self, phi):
        n = self.n_series
        return self.i_c1 * np.cos(phi) + (self.i_c2 / n) * np.cos((2 * self.flux_F + phi) / n)

    def energy(self, phi):
        return snail_energy(phi, self)

    def operating_phase(self, i_dc: float) -> float:
        return solve_snail_operating_point(i_dc, self)

    def inductance(self, i_dc: float = 0.0) -> float:
        return snail_inductance(self.operating_phase(i_dc), self)


@dataclass(frozen=True)
class LinearInductor:
    """Ordinary inductor written as a phase branch, i = phi / (kappa L)."""

    l: float
    capacitance: float = 0.0

    def current(self, phi):
        return np.asarray(phi) / (KAPPA * self.l)

    def dcurrent(self, phi):
        return np.full_like(np.asarray(phi, dtype=float), 1.0 / (KAPPA * self.l))

    def operating_phase(self, i_dc: float) -> float:
        return KAPPA * self.l * i_dc

    def inductance(self, i_dc: float = 0.0) -> float:
        return self.l


def jj_current(phi, p: JJParams):
    return p.i_c * np.sin(phi)


def jj_inductance(i_bias: float, p: JJParams) -> float:
    ratio = i_bias / p.i_c
    if abs(ratio) >= 1.0:
        raise OverCritical(f"bias {i_bias:g} A at or above i_c = {p.i_c:g} A")
    return p.l_j0 / math.sqrt(1.0 - ratio * ratio)


def jj_energy(phi, p: JJParams):
    return -p.e_j * np.cos(phi)


def snail_branch_currents(phi1, p: SNAILParams):
    """Branch currents ``(i1, i2, i1 + i2)``; the loop constraint fixes branch 2's phase."""
    i1 = p.i_c1 * np.sin(phi1)
    i2 = p.i_c2 * np.sin((2 * p.flux_F + phi1) / p.n_series)
    return i1, i2, i1 + i2


def snail_energy(phi1, p: SNAILParams):
    e1 = PHI0 * p.i_c1 / (2 * math.pi)
    e2 = PHI0 * p.i_c2 / (2 * math.pi)
    n = p.n_series
    return -e1 * np.cos(phi1) - n * e2 * np.cos((2 * p.flux_F + phi1) / n)


def snail_inductance(phi1: float, p: SNAILParams) -> float:
    inv = KAPPA * p.dcurrent(phi1)
    if not inv > 0:
        raise NonInductive(f"1/L = {inv:g} <= 0 at phi1 = {phi1:g}")
    return 1.0 / inv


def _scan_window(p: SNAILParams, points_per_2pi: int = 512):
    """One full 2 pi N period of the potential, centred on its global minimum."""
    n = p.n_series
    span = 2 * math.pi * n
    grid = np.linspace(-span / 2, span / 2, points_per_2pi * n + 1) - 2 * p.flux_F
    e = snail_energy(grid, p)
    centre = grid[int(np.argmin(e))]
    return np.linspace(centre - span / 2, centre + span / 2, points_per_2pi * n + 1)


def solve_snail_operating_point(i_dc: float, p: SNAILParams) -> float:
    """Stable branch phase carrying ``i_dc``; lowest-energy root within one period."""
    phis = _scan_window(p)
    f = p.current(phis) - i_dc
    roots = []
    for a, b, fa, fb in zip(phis[:-1], phis[1:], f[:-1], f[1:]):
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0:
            roots.append(brentq(lambda x: p.current(x) - i_dc, a, b, xtol=1e-15, rtol=1e-15))
    stable = [r for r in roots if p.dcurrent(r) > 0]
    if not stable:
        raise NoSolution(f"no stable SNAIL state carries {i_dc:g} A at F = {p.flux_F:g}")
    # tilted washboard: the source does work i_dc * Phi0 phi / 2 pi
    energies = [snail_energy(r, p) - i_dc * r / KAPPA for r in stable]
    return float(stable[int(np.argmin(energies))])


def snail_max_supercurrent(p: SNAILParams) -> float:
    phis = _scan_window(p, 4096)
    return float(np.max(p.current(phis)))


def _taylor_power(g: np.ndarray, power: float, order: int) -> np.ndarray:
    """Series coefficients of g(x)**power (g given by its coefficients)."""
    h = np.zeros(order + 1)
    h[0] = g[0] ** power
    for n in range(1, order + 1):
        acc = 0.0
        for k in range(1, min(n, len(g) - 1) + 1):
            acc += ((power + 1) * k - n) * g[k] * h[n - k]
        h[n] = acc / (n * g[0])
    return h


def taylor_voltage_harmonics(alpha_dc: float, beta_ac: float, order: int, l_j0: float = 1.0,
                             omega: float = 1.0, i_c: float = 1.0) -> np.ndarray:
    """Harmonic phasors of v(t) for a JJ driven by ``I_dc + I sin(wt)``, via the Taylor series.

    ``alpha_dc = I_dc/I_c`` and ``beta_ac = I/I_c``.  The series is truncated
    after ``order`` powers of ``beta sin(wt)``; the result holds harmonics
    ``0 .. order + 1`` in peak-phasor form (cosine reference).
    """
    if abs(alpha_dc) + abs(beta_ac) >= 1.0:
        raise OverCritical("|alpha| + |beta| must stay below 1")
    if abs(alpha_dc) + abs(beta_ac) > 0.9:
        warnings.warn("Taylor series converges slowly near |alpha|+|beta| = 1", ConvergenceWarning)
    g = np.array([1.0 - alpha_dc ** 2, -2.0 * alpha_dc, -1.0])
    coeffs = _taylor_power(g, -0.5, order)
    samples = 4 * (order + 2)
    theta = 2 * math.pi * np.arange(samples) / samples
    s = beta_ac * np.sin(theta)
    series = np.polynomial.polynomial.polyval(s, coeffs)
    v = l_j0 * omega * beta_ac * i_c * np.cos(theta) * series
    c = np.fft.rfft(v) / samples
    out = c[: order + 2].copy()
    out[1:] *= 2.0
    return out


def taylor_coefficients(alpha_dc: float, order: int) -> np.ndarray:
    """Coefficients of (1 - (alpha + x)^2)^(-1/2) in powers of x."""
    g = np.array([1.0 - alpha_dc ** 2, -2.0 * alpha_dc, -1.0])
    return _taylor_power(g, -0.5, order)


@dataclass(frozen=True)
class PotentialExpansion:
    """Taylor expansion of the SNAIL potential about its minimum.

    ``c2`` is U''/E_J1 (dimensionless); ``c3`` and ``c4`` are U'''/U'' and
    U''''/U'', so the branch current reads
    ``i = (psi + c3 psi^2/2 + c4 psi^3/6 + ...) / (kappa L)``.
    """

    phi_min: float
    c2: float
    c3: float
    c4: float


def snail_expansion(p: SNAILParams, i_dc: float = 0.0) -> PotentialExpansion:
    phi0 = solve_snail_operating_point(i_dc, p)
    n, f = p.n_series, p.flux_F
    arg = (2 * f + phi0) / n
    r = p.i_c2 / p.i_c1
    d2 = math.cos(phi0) + r / n * math.cos(arg)
    d3 = -math.sin(phi0) - r / n ** 2 * math.sin(arg)
    d4 = -math.cos(phi0) - r / n ** 3 * math.cos(arg)
    return PotentialExpansion(phi0, d2, d3 / d2, d4 / d2)


def extract_c3(p: SNAILParams, i_dc: float = 0.0) -> float:
    return snail_expansion(p, i_dc).c3


def snail_energy_minimum(p: SNAILParams) -> float:
    """Phase of the global potential minimum by direct 1-d minimisation."""
    phis = _scan_window(p)
    e = snail_energy(phis, p)
    i = int(np.argmin(e))
    res = minimize_scalar(lambda x: snail_energy(x, p) / (PHI0 * p.i_c1),
                          bracket=(phis[i - 1], phis[i], phis[i + 1]), tol=1e-12)
    return float(res.x)


def device_capacitance(device) -> float:
    return float(getattr(device, "capacitance", 0.0))
