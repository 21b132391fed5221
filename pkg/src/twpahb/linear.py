"""Small-signal two-port analysis: ABCD cascades, S-parameters, dispersion.

Matrices are stored batched over frequency with shape ``(F, 2, 2)``.
Nonlinear devices are replaced by their inductance at the dc operating
point (JJ inductance at the bias current, SNAIL inductance at the
operating phase for the cell's flux bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .circuit import Cell, Circuit

DEFAULT_POINTS = 2001


class IllTerminated(ZeroDivisionError):
    """The S-parameter denominator vanishes for the given references."""


@dataclass(frozen=True)
class TwoPortABCD:
    """Batched ABCD matrices ``exp(log_scale) * m``.

    The separate scale keeps long cascades finite in the stop band, where
    the entries grow exponentially with the number of cells.
    """

    m: np.ndarray  # (F, 2, 2) complex
    frequencies: np.ndarray | None = None
    log_scale: np.ndarray | None = None
    det: np.ndarray | None = None  # tracked multiplicatively; cancellation-free

    def __post_init__(self):
        m = np.asarray(self.m, dtype=complex)
        if m.ndim == 2:
            m = m[None]
        if m.shape[-2:] != (2, 2):
            raise ValueError("ABCD matrices must be 2x2")
        object.__setattr__(self, "m", m)
        ls = np.zeros(m.shape[0]) if self.log_scale is None else np.asarray(self.log_scale, float)
        object.__setattr__(self, "log_scale", ls)
        if self.det is None:
            det = (m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]) * np.exp(2 * ls)
            object.__setattr__(self, "det", det)
        if self.frequencies is not None:
            object.__setattr__(self, "frequencies", np.atleast_1d(np.asarray(self.frequencies, float)))

    def _entry(self, i, j):
        return self.m[:, i, j] * np.exp(self.log_scale)

    a = property(lambda self: self._entry(0, 0))
    b = property(lambda self: self._entry(0, 1))
    c = property(lambda self: self._entry(1, 0))
    d = property(lambda self: self._entry(1, 1))

    @property
    def determinant(self) -> np.ndarray:
        return self.det

    def __matmul__(self, other: "TwoPortABCD") -> "TwoPortABCD":
        f = self.frequencies if self.frequencies is not None else other.frequencies
        m = self.m @ other.m
        norm = np.max(np.abs(m), axis=(-2, -1))
        norm = np.where(norm > 0, norm, 1.0)
        return TwoPortABCD(m / norm[:, None, None], f, self.log_scale + other.log_scale + np.log(norm),
                           self.det * other.det)

    def power(self, n: int) -> "TwoPortABCD":
        if n < 1:
            raise ValueError("power must be >= 1")
        result, base = None, self
        while n:
            if n & 1:
                result = base if result is None else result @ base
            n >>= 1
            if n:
                base = base @ base
        return result

    def input_impedance(self, z_load) -> np.ndarray:
        """Impedance seen at port 1 with port 2 terminated in ``z_load``."""
        num = self.m[:, 0, 0] * z_load + self.m[:, 0, 1]
        den = self.m[:, 1, 0] * z_load + self.m[:, 1, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den == 0, np.inf, num / np.where(den == 0, 1, den))


@dataclass(frozen=True)
class SParams:
    s11: np.ndarray
    s21: np.ndarray
    s12: np.ndarray
    s22: np.ndarray
    z_ref_in: complex = 50.0
    z_ref_out: complex = 50.0
    frequencies: np.ndarray | None = None

    @property
    def s21_db(self) -> np.ndarray:
        return 20 * np.log10(np.maximum(np.abs(self.s21), 1e-300))

    def input_impedance(self) -> np.ndarray:
        return input_impedance_from_gamma(self.s11, self.z_ref_in)


def abcd_series(z, f=None) -> TwoPortABCD:
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    m = np.zeros(z.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = 1
    m[..., 0, 1] = z
    m[..., 1, 1] = 1
    return TwoPortABCD(m, f)


def abcd_shunt(y, f=None) -> TwoPortABCD:
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    m = np.zeros(y.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = 1
    m[..., 1, 0] = y
    m[..., 1, 1] = 1
    return TwoPortABCD(m, f)


def abcd_identity(f=None) -> TwoPortABCD:
    n = 1 if f is None else np.size(f)
    return TwoPortABCD(np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy(), f)


def abcd_cascade(parts: Iterable[TwoPortABCD]) -> TwoPortABCD:
    parts = list(parts)
    if not parts:
        raise ValueError("empty cascade")
    out = parts[0]
    for p in parts[1:]:
        out = out @ p
    return out


def abcd_to_s(m: TwoPortABCD, z_ref_in=50.0, z_ref_out=50.0) -> SParams:
    """Power-wave S-parameters for (possibly unequal, complex) references."""
    z1, z2 = complex(z_ref_in), complex(z_ref_out)
    if z1.real <= 0 or z2.real <= 0:
        raise ValueError("reference impedances need a positive real part")
    # work with the normalised entries; the scale cancels in the ratios
    a, b, c, d = (m.m[:, i, j] for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))
    den = a * z2 + b + c * z1 * z2 + d * z1
    if np.any(np.abs(den) == 0):
        raise IllTerminated("singular S-parameter denominator")
    k = 2 * math.sqrt(z1.real * z2.real)
    inv_scale = np.exp(-m.log_scale)
    s11 = (a * z2 + b - c * np.conj(z1) * z2 - d * np.conj(z1)) / den
    s21 = k * inv_scale / den
    s12 = s21 * m.det
    s22 = (-a * np.conj(z2) + b - c * z1 * np.conj(z2) + d * z1) / den
    return SParams(s11, s21, s12, s22, z_ref_in, z_ref_out, m.frequencies)


def input_impedance_from_gamma(gamma, z0=50.0) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=complex)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = z0 * (1 + gamma) / (1 - gamma)
    return np.where(gamma == 1, np.inf, z)


@dataclass(frozen=True)
class CellMetrics:
    z_char: float
    f_cutoff: float
    omega_0: float
    v_group: float | None
    delay_per_cell: float


def unit_cell_metrics(l: float, c: float, pitch: float | None = None) -> CellMetrics:
    """Lumped-line figures of merit: Z = sqrt(L/C), w_c = 2/sqrt(LC), v = a/sqrt(LC)."""
    if not (l > 0 and c > 0):
        raise ValueError("L and C must be positive")
    s = math.sqrt(l * c)
    return CellMetrics(
        z_char=math.sqrt(l / c),
        f_cutoff=2.0 / s / (2 * math.pi),
        omega_0=1.0 / s,
        v_group=None if pitch is None else pitch / s,
        delay_per_cell=s,
    )


def cell_linear_inductance(cell: Cell, i_dc: float = 0.0) -> float:
    return cell.device.inductance(i_dc)


def cell_abcd(cell: Cell, f, i_dc: float = 0.0) -> TwoPortABCD:
    """Series (device L parallel with junction C) followed by the shunt capacitor."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    w = 2 * math.pi * f
    l = cell_linear_inductance(cell, i_dc)
    cj = float(getattr(cell.device, "capacitance", 0.0))
    y_series = 1.0 / (1j * w * l) + 1j * w * cj
    y_shunt = 1j * w * cell.c_shunt
    if cell.r_shunt is not None:
        y_shunt = y_shunt + 1.0 / cell.r_shunt
    return abcd_series(1.0 / y_series, f) @ abcd_shunt(y_shunt, f)


def chain_abcd(circuit: Circuit, f) -> TwoPortABCD:
    f = np.atleast_1d(np.asarray(f, dtype=float))
    i_dc = circuit.source.i_dc
    first = circuit.cells[0]
    if all(c == first for c in circuit.cells):
        return cell_abcd(first, f, i_dc).power(circuit.n_cells)
    out = None
    cache: dict = {}
    for cell in circuit.cells:
        key = id(cell)
        if key not in cache:
            cache[key] = cell_abcd(cell, f, i_dc)
        out = cache[key] if out is None else out @ cache[key]
    return out


def chain_sparams(circuit: Circuit, f) -> SParams:
    return abcd_to_s(chain_abcd(circuit, f), circuit.source.r_source, circuit.r_load)


def input_impedance_smallsignal(circuit: Circuit, f) -> np.ndarray:
    """Small-signal input impedance of the loaded chain (from S11)."""
    return chain_sparams(circuit, f).input_impedance()


def nodal_s21(circuit: Circuit, f) -> np.ndarray:
    """S21 by solving the linearised nodal equations directly (cross-check path)."""
    from scipy.sparse import csc_matrix, diags
    from scipy.sparse.linalg import spsolve

    net = circuit.to_netlist()
    c_mat = net.capacitance_matrix()
    g_mat = net.conductance_matrix()
    a_inc = net.incidence()
    i_dc = circuit.source.i_dc
    inv_l = np.array([1.0 / c.device.inductance(i_dc) for c in circuit.cells])
    out = []
    for fi in np.atleast_1d(f):
        w = 2 * math.pi * fi
        y = g_mat + 1j * w * c_mat + a_inc @ diags(inv_l / (1j * w)) @ a_inc.T
        rhs = np.zeros(net.n_nodes, dtype=complex)
        rhs[0] = 1.0  # Norton current of 1 A: incident voltage R_s / 2
        v = spsolve(csc_matrix(y), rhs)
        r1, r2 = circuit.source.r_source, circuit.r_load
        out.append(v[-1] / (r1 / 2) * math.sqrt(r1 / r2))
    return np.array(out)


def bloch_wavenumber(abcd: TwoPortABCD) -> np.ndarray:
    """Phase advance per cell (rad) of the infinite periodic line.

    Real below cutoff; the imaginary part carries the stop-band attenuation.
    """
    half_trace = 0.5 * (abcd.a + abcd.d)
    return np.arccos(half_trace.astype(complex))


def cell_wavenumber(cell: Cell, f, i_dc: float = 0.0) -> np.ndarray:
    """Bloch phase per cell for the symmetric T-section of ``cell`` (rad)."""
    return np.real(bloch_wavenumber(cell_abcd(cell, f, i_dc)))


def cutoff_3db(frequencies, s21) -> float:
    """Lowest frequency above the passband where |S21| falls 3 dB below its passband maximum.

    The passband maximum is taken below the first crossing; the crossing is
    linearly interpolated in dB.
    """
    f = np.asarray(frequencies, float)
    db = 20 * np.log10(np.maximum(np.abs(s21), 1e-300))
    ref = db[0]
    below = np.nonzero(db < ref - 3.0)[0]
    # skip ripple dips: require the response to stay below for the rest of the sweep
    for i in below:
        if np.all(db[i:] < ref - 3.0 + 1e-9):
            if i == 0:
                return float(f[0])
            x0, x1, y0, y1 = f[i - 1], f[i], db[i - 1], db[i]
            return float(x0 + (ref - 3.0 - y0) * (x1 - x0) / (y1 - y0))
    raise ValueError("response never drops 3 dB below its low-frequency level")


@dataclass(frozen=True)
class SweepResult:
    frequencies: np.ndarray
    s: SParams

    def columns(self) -> tuple[list[str], np.ndarray]:
        names = ["frequency_hz"]
        cols = [self.frequencies]
        for name in ("s11", "s21", "s12", "s22"):
            v = getattr(self.s, name)
            names += [f"re_{name}", f"im_{name}"]
            cols += [v.real, v.imag]
        names.append("s21_db")
        cols.append(self.s.s21_db)
        return names, np.column_stack(cols)


def frequency_grid(f_start: float, f_stop: float, points: int = DEFAULT_POINTS) -> np.ndarray:
    if points < 1:
        raise ValueError("at least one frequency point required")
    return np.linspace(f_start, f_stop, points)


def sparams_sweep(circuit: Circuit, frequencies: Sequence[float]) -> SweepResult:
    f = np.asarray(frequencies, float)
    if f.size == 0:
        raise ValueError("empty frequency list")
    if np.any(f <= 0):
        raise ValueError("frequencies must be positive")
    return SweepResult(f, chain_sparams(circuit, f))


def flux_sweep_s21(cell_factory, flux_values: Sequence[float], f) -> np.ndarray:
    """|S21| on a (flux, frequency) grid; ``cell_factory(flux)`` builds the circuit."""
    return np.array([np.abs(chain_sparams(cell_factory(F), f).s21) for F in flux_values])
