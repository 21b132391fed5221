"""Tone grids, mix-index addressing and time <-> frequency conversion.

Phasor convention: a real waveform is ``x(t) = X0 + Re sum_b X_b exp(j w_b t)``
with peak amplitudes ``X_b`` and a real dc term stored once.  Two-tone grids
are sampled on a two-dimensional torus lattice (one angle per fundamental),
so incommensurate signal/pump pairs never need a common period.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BOX = "box"
DIAMOND = "diamond"

#: Two distinct mix products closer than this (Hz) are considered colliding.
DEFAULT_COLLISION_TOL = 1e3
#: Oversampling factor applied to the Nyquist minimum ``2k+1``.
DEFAULT_OVERSAMPLING = 4


class CollisionError(ValueError):
    """Two distinct mix products land on (nearly) the same frequency."""


class AliasError(ValueError):
    """The time lattice is too coarse for the highest grid order."""


@dataclass(frozen=True, order=True)
class MixIndex:
    """Mix product ``n*f_signal + m*f_pump``.

    Single-tone grids use ``n = 0`` and ``m`` as the harmonic number.
    """

    n: int
    m: int

    def frequency(self, f_signal: float, f_pump: float) -> float:
        return self.n * f_signal + self.m * f_pump

    def __neg__(self) -> "MixIndex":
        return MixIndex(-self.n, -self.m)


SIGNAL = MixIndex(1, 0)
IDLER = MixIndex(-1, 1)


def _nice_size(n: int) -> int:
    """Smallest 2^a 3^b >= n (fast FFT lengths)."""
    best = 1 << max(0, (n - 1).bit_length())
    p3 = 1
    while p3 < best:
        p2 = p3
        while p2 < n:
            p2 *= 2
        best = min(best, p2)
        p3 *= 3
    return best


@dataclass(frozen=True)
class ToneGrid:
    """Truncated set of non-negative mix frequencies, dc first.

    ``orders`` has one row per bin and one column per fundamental.  For two
    fundamentals the columns are ``(n, m)`` = (signal order, pump order).
    """

    fundamentals: tuple[float, ...]
    max_orders: tuple[int, ...]
    truncation: str
    orders: np.ndarray = field(repr=False)
    frequencies: np.ndarray = field(repr=False)
    collision_tol: float = DEFAULT_COLLISION_TOL

    def __post_init__(self):
        self.orders.setflags(write=False)
        self.frequencies.setflags(write=False)

    @property
    def ndim(self) -> int:
        return len(self.fundamentals)

    @property
    def size(self) -> int:
        return len(self.frequencies)

    def __len__(self) -> int:
        return self.size

    @property
    def mix_indices(self) -> list[MixIndex]:
        if self.ndim == 1:
            return [MixIndex(0, int(k)) for k in self.orders[:, 0]]
        return [MixIndex(int(n), int(m)) for n, m in self.orders]

    def _order_tuple(self, mix: MixIndex) -> tuple[int, ...]:
        if self.ndim == 1:
            if mix.n != 0:
                raise KeyError(f"{mix} not on a single-tone grid")
            return (mix.m,)
        return (mix.n, mix.m)

    def index_of(self, mix: MixIndex) -> int:
        """Bin index of ``mix``; negative-frequency indices are conjugate aliases."""
        key = self._order_tuple(mix)
        lookup = self._lookup()
        if key in lookup:
            return lookup[key]
        neg = tuple(-k for k in key)
        if neg in lookup:
            return lookup[neg]
        raise KeyError(f"{mix} is not on this grid")

    def is_conjugate(self, mix: MixIndex) -> bool:
        """True when ``mix`` is stored as its negative-frequency partner."""
        key = self._order_tuple(mix)
        return key not in self._lookup()

    def _lookup(self) -> dict:
        cache = self.__dict__.get("_lookup_cache")
        if cache is None:
            cache = {tuple(int(v) for v in row): i for i, row in enumerate(self.orders)}
            object.__setattr__(self, "_lookup_cache", cache)
        return cache

    def harmonic(self, m: int) -> int:
        """Bin of pump harmonic ``m`` (``{0, m}`` on a two-tone grid)."""
        return self.index_of(MixIndex(0, m))

    def lattice_shape(self, oversampling: int = DEFAULT_OVERSAMPLING) -> tuple[int, ...]:
        return tuple(_nice_size(oversampling * (2 * k + 1)) for k in self.max_orders)

    def embeds_in(self, other: "ToneGrid") -> bool:
        """True when every bin of this grid exists on ``other`` at the same frequency."""
        if self.ndim == other.ndim:
            if not np.allclose(self.fundamentals, other.fundamentals, rtol=0, atol=1e-3):
                return False
            return all(tuple(int(v) for v in row) in other._lookup() for row in self.orders)
        if self.ndim == 1 and other.ndim == 2:
            # pump-only grid embeds as the {0, m} column of a two-tone grid
            if abs(self.fundamentals[0] - other.fundamentals[1]) > 1e-3:
                return False
            return all((0, int(k)) in other._lookup() for k in self.orders[:, 0])
        return False

    def embed_map(self, other: "ToneGrid") -> np.ndarray:
        """Indices on ``other`` of each bin of this grid (see :meth:`embeds_in`)."""
        if not self.embeds_in(other):
            raise ValueError("grid does not embed into the target grid")
        if self.ndim == other.ndim:
            keys = [tuple(int(v) for v in row) for row in self.orders]
        else:
            keys = [(0, int(k)) for k in self.orders[:, 0]]
        lookup = other._lookup()
        return np.array([lookup[k] for k in keys], dtype=int)


def build_tone_grid(
    fundamentals: Sequence[float],
    max_orders: Sequence[int] | int,
    truncation: str = BOX,
    collision_tol: float = DEFAULT_COLLISION_TOL,
) -> ToneGrid:
    """Enumerate the canonical (non-negative frequency) mix products.

    Raises :class:`CollisionError` when two distinct products coincide
    within ``collision_tol``; offset one fundamental slightly to fix it.
    """
    fundamentals = tuple(float(f) for f in fundamentals)
    if not 1 <= len(fundamentals) <= 2:
        raise ValueError("1 or 2 fundamentals supported")
    if any(f <= 0 for f in fundamentals):
        raise ValueError("fundamentals must be positive")
    if isinstance(max_orders, (int, np.integer)):
        max_orders = (int(max_orders),) * len(fundamentals)
    max_orders = tuple(int(k) for k in max_orders)
    if len(max_orders) != len(fundamentals):
        raise ValueError("one max order per fundamental")
    if any(k < 1 for k in max_orders):
        raise ValueError("max orders must be >= 1")
    if truncation not in (BOX, DIAMOND):
        raise ValueError(f"unknown truncation {truncation!r}")

    if len(fundamentals) == 1:
        (k,) = max_orders
        orders = np.arange(k + 1)[:, None]
    else:
        ks, kp = max_orders
        kmax = max(max_orders)
        rows = []
        for n in range(-ks, ks + 1):
            for m in range(-kp, kp + 1):
                if truncation == DIAMOND and abs(n) + abs(m) > kmax:
                    continue
                rows.append((n, m))
        orders = np.array(rows, dtype=int)

    f = orders @ np.array(fundamentals)
    is_dc = ~orders.any(axis=1)
    near_zero = (np.abs(f) <= collision_tol) & ~is_dc
    if near_zero.any():
        bad = orders[near_zero][0]
        raise CollisionError(f"mix product {tuple(bad)} collides with dc")
    keep = is_dc | (f > 0)
    orders, f = orders[keep], f[keep]
    perm = np.lexsort((*orders.T[::-1], f))
    orders, f = orders[perm], f[perm]
    gaps = np.diff(f)
    if gaps.size and gaps.min() <= collision_tol:
        i = int(np.argmin(gaps))
        raise CollisionError(
            f"mix products {tuple(orders[i])} and {tuple(orders[i + 1])} "
            f"both at {f[i]:.6g} Hz; offset a fundamental"
        )
    return ToneGrid(fundamentals, max_orders, truncation, orders.astype(int), f, collision_tol)


def _check_lattice(grid: ToneGrid, shape: tuple[int, ...]) -> None:
    if len(shape) != grid.ndim:
        raise ValueError("lattice rank must equal the number of fundamentals")
    for s, k in zip(shape, grid.max_orders):
        if s < 2 * k + 1:
            raise AliasError(f"{s} samples cannot resolve order {k} (need >= {2 * k + 1})")


def _lattice_positions(grid: ToneGrid, shape: tuple[int, ...]):
    return tuple(grid.orders[:, a] % shape[a] for a in range(grid.ndim))


def _neg_positions(grid: ToneGrid, shape: tuple[int, ...]):
    return tuple((-grid.orders[:, a]) % shape[a] for a in range(grid.ndim))


def phasors_to_lattice(grid: ToneGrid, phasors: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Double-sided coefficient array (leading batch dims kept) for an inverse FFT."""
    phasors = np.asarray(phasors, dtype=complex)
    batch = phasors.shape[:-1]
    coeffs = np.zeros(batch + tuple(shape), dtype=complex)
    pos = _lattice_positions(grid, shape)
    neg = _neg_positions(grid, shape)
    half = phasors.copy()
    half[..., 1:] *= 0.5
    idx = (Ellipsis,) + pos
    coeffs[idx] = half
    nidx = (Ellipsis,) + tuple(p[1:] for p in neg)
    coeffs[nidx] = np.conj(half[..., 1:])
    return coeffs


def spectrum_to_waveform(
    phasors: "Spectrum | np.ndarray",
    grid: ToneGrid | None = None,
    samples_per_period: int | Sequence[int] | None = None,
) -> np.ndarray:
    """Sample the real waveform on the grid's time lattice.

    Accepts a :class:`Spectrum` or a raw phasor array (with ``grid``).  The
    last axes of the result are the lattice; leading axes follow the batch
    dimensions of the phasor array.
    """
    if isinstance(phasors, Spectrum):
        grid, phasors = phasors.grid, phasors.phasors
    if grid is None:
        raise ValueError("grid required for raw phasor arrays")
    shape = _resolve_shape(grid, samples_per_period)
    _check_lattice(grid, shape)
    coeffs = phasors_to_lattice(grid, phasors, shape)
    axes = tuple(range(-grid.ndim, 0))
    return np.fft.ifftn(coeffs, axes=axes, norm="forward").real


def waveform_to_spectrum(waveform: np.ndarray, grid: ToneGrid) -> np.ndarray:
    """Project a lattice-sampled real waveform onto the grid bins.

    Exact inverse of :func:`spectrum_to_waveform` for band-limited inputs.
    Returns the raw phasor array (batch dims preserved).
    """
    waveform = np.asarray(waveform)
    if waveform.ndim < grid.ndim:
        raise ValueError("waveform rank below grid rank")
    shape = waveform.shape[-grid.ndim:]
    _check_lattice(grid, shape)
    axes = tuple(range(-grid.ndim, 0))
    coeffs = np.fft.fftn(waveform, axes=axes, norm="forward")
    return lattice_to_phasors(grid, coeffs)


def lattice_to_phasors(grid: ToneGrid, coeffs: np.ndarray) -> np.ndarray:
    shape = coeffs.shape[-grid.ndim:]
    pos = _lattice_positions(grid, shape)
    out = coeffs[(Ellipsis,) + pos].copy()
    out[..., 1:] *= 2.0
    out[..., 0] = out[..., 0].real
    return out


def _resolve_shape(grid: ToneGrid, samples) -> tuple[int, ...]:
    if samples is None:
        return grid.lattice_shape()
    if isinstance(samples, (int, np.integer)):
        return (int(samples),) * grid.ndim
    return tuple(int(s) for s in samples)


def sample_times(grid: ToneGrid, samples: int) -> np.ndarray:
    """Time instants of a single-tone lattice over one pump period."""
    if grid.ndim != 1:
        raise ValueError("sample times only defined for single-tone grids")
    return np.arange(samples) / (samples * grid.fundamentals[0])


@dataclass(frozen=True)
class Spectrum:
    """Phasors of one node (or branch) quantity over a tone grid."""

    grid: ToneGrid
    phasors: np.ndarray

    def __post_init__(self):
        ph = np.array(self.phasors, dtype=complex)
        if ph.shape[-1:] != (self.grid.size,):
            raise ValueError("phasor length must equal the grid size")
        ph[..., 0] = ph[..., 0].real
        ph.setflags(write=False)
        object.__setattr__(self, "phasors", ph)

    def __getitem__(self, mix: MixIndex) -> complex:
        value = self.phasors[..., self.grid.index_of(mix)]
        return np.conj(value) if self.grid.is_conjugate(mix) else value

    def to_waveform(self, samples_per_period=None) -> np.ndarray:
        return spectrum_to_waveform(self, samples_per_period=samples_per_period)

    @classmethod
    def from_waveform(cls, waveform: np.ndarray, grid: ToneGrid) -> "Spectrum":
        return cls(grid, waveform_to_spectrum(waveform, grid))

    @classmethod
    def zeros(cls, grid: ToneGrid) -> "Spectrum":
        return cls(grid, np.zeros(grid.size, dtype=complex))

    @classmethod
    def from_items(cls, grid: ToneGrid, items: Iterable[tuple[MixIndex, complex]]) -> "Spectrum":
        ph = np.zeros(grid.size, dtype=complex)
        for mix, value in items:
            i = grid.index_of(mix)
            ph[i] = np.conj(value) if grid.is_conjugate(mix) else value
        return cls(grid, ph)


def mean_square(phasors: np.ndarray) -> np.ndarray:
    """Cycle-mean of x(t)^2 from phasors (Parseval)."""
    phasors = np.asarray(phasors)
    return phasors[..., 0].real ** 2 + 0.5 * np.sum(np.abs(phasors[..., 1:]) ** 2, axis=-1)
