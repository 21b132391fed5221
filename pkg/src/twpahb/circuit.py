"""Circuit descriptions: TWPA chains, presets, and a small generic netlist.

A TWPA chain with ``n`` cells has nodes ``0 .. n``.  Node 0 is the input
port (Norton source with resistance ``r_source``); cell ``j`` places its
nonlinear device (plus the device's junction capacitance) between nodes
``j-1`` and ``j`` and its shunt capacitor from node ``j`` to ground; the
load resistor terminates node ``n``.

The incident-wave convention: a tone of amplitude ``I`` drives a Norton
current of ``2 I`` so that ``I`` is the current the source would push into
a matched line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .devices import JJParams, LinearInductor, SNAILParams

Device = Union[JJParams, SNAILParams, LinearInductor]
GROUND = -1


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Tone:
    frequency: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("tone frequency must be positive")


@dataclass(frozen=True)
class Source:
    """Input drive: dc bias current and ac tones (incident amplitudes, A)."""

    i_dc: float = 0.0
    tones: tuple[Tone, ...] = ()
    r_source: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "tones", tuple(self.tones))
        if not self.r_source > 0:
            raise ValueError("source impedance must be positive")

    def with_tones(self, *tones: Tone) -> "Source":
        return replace(self, tones=tuple(tones))


@dataclass(frozen=True)
class Cell:
    device: Device
    c_shunt: float
    r_shunt: float | None = None  # optional substrate loss across the capacitor

    def __post_init__(self):
        if not self.c_shunt > 0:
            raise ValueError("shunt capacitance must be positive")
        if self.r_shunt is not None and not self.r_shunt > 0:
            raise ValueError("shunt resistance must be positive")


@dataclass(frozen=True)
class Circuit:
    cells: tuple[Cell, ...]
    source: Source = field(default_factory=Source)
    r_load: float = 50.0
    cell_pitch: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise TopologyError("a circuit needs at least one cell")
        if not self.r_load > 0:
            raise ValueError("load impedance must be positive")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def length(self) -> float | None:
        return None if self.cell_pitch is None else self.cell_pitch * self.n_cells

    def with_source(self, source: Source) -> "Circuit":
        return replace(self, source=source)

    def with_drive(self, *tones: Tone, i_dc: float | None = None) -> "Circuit":
        src = self.source.with_tones(*tones)
        if i_dc is not None:
            src = replace(src, i_dc=i_dc)
        return replace(self, source=src)

    def truncated(self, n_cells: int) -> "Circuit":
        return replace(self, cells=self.cells[:n_cells])

    def operating_phases(self) -> np.ndarray:
        """Dc branch phases; every device carries the bias current."""
        return np.array([c.device.operating_phase(self.source.i_dc) for c in self.cells])

    def to_netlist(self) -> "Netlist":
        caps, res, branches = [], [], []
        for j, cell in enumerate(self.cells, start=1):
            cj = float(getattr(cell.device, "capacitance", 0.0))
            if cj > 0:
                caps.append((j - 1, j, cj))
            caps.append((j, GROUND, cell.c_shunt))
            if cell.r_shunt is not None:
                res.append((j, GROUND, cell.r_shunt))
            branches.append((j - 1, j, cell.device))
        res.append((0, GROUND, self.source.r_source))
        res.append((self.n_cells, GROUND, self.r_load))
        src = self.source
        sources = [CurrentSource(GROUND, 0, dc=0.0,
                                 tones=tuple(Tone(t.frequency, 2 * t.amplitude, t.phase) for t in src.tones))]
        if src.i_dc != 0.0:
            # bias tee: the dc path runs through the junctions only
            sources.append(CurrentSource(GROUND, 0, dc=src.i_dc))
            sources.append(CurrentSource(self.n_cells, GROUND, dc=src.i_dc))
        return Netlist(self.n_nodes, tuple(caps), tuple(res), tuple(branches), tuple(sources))


@dataclass(frozen=True)
class CurrentSource:
    """Current flowing from node ``neg`` through the source into node ``pos``.

    ``i(t) = dc + ramp * t + sum A cos(2 pi f t + phase)``.
    """

    neg: int
    pos: int
    dc: float = 0.0
    tones: tuple[Tone, ...] = ()
    ramp: float = 0.0

    def value(self, t, ac_scale=1.0):
        t = np.asarray(t, dtype=float)
        out = self.dc + self.ramp * t
        for tone in self.tones:
            out = out + ac_scale * tone.amplitude * np.cos(2 * math.pi * tone.frequency * t + tone.phase)
        return out


@dataclass(frozen=True)
class Netlist:
    """Nodes ``0 .. n_nodes-1``; ``GROUND`` (-1) is the reference.

    capacitors and resistors are ``(a, b, value)``; branches are
    ``(a, b, device)`` carrying ``device.current(phi)`` from ``a`` to ``b``
    with ``d phi / dt = kappa (v_a - v_b)``.
    """

    n_nodes: int
    capacitors: tuple = ()
    resistors: tuple = ()
    branches: tuple = ()
    sources: tuple = ()

    def __post_init__(self):
        self._check()

    def _check(self):
        touched = set()
        for group in (self.capacitors, self.resistors, self.branches):
            for a, b, _ in group:
                for node in (a, b):
                    if not (node == GROUND or 0 <= node < self.n_nodes):
                        raise TopologyError(f"node {node} out of range")
                touched.update((a, b))
        for a, b, v in tuple(self.capacitors) + tuple(self.resistors):
            if not v > 0:
                raise ValueError("element values must be positive")
        floating = set(range(self.n_nodes)) - touched
        if floating:
            raise TopologyError(f"floating nodes {sorted(floating)}")
        # every node needs a dc path (resistor or branch) to ground
        parent = list(range(self.n_nodes + 1))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b, _ in tuple(self.resistors) + tuple(self.branches):
            parent[find(a % (self.n_nodes + 1))] = find(b % (self.n_nodes + 1))
        ground = find(self.n_nodes)
        loose = [n for n in range(self.n_nodes) if find(n) != ground]
        if loose:
            raise TopologyError(f"nodes {loose} have no dc path to ground")

    def capacitance_matrix(self):
        return _stamp(self.n_nodes, self.capacitors)

    def conductance_matrix(self):
        return _stamp(self.n_nodes, [(a, b, 1.0 / r) for a, b, r in self.resistors])

    def incidence(self):
        """Node-by-branch incidence: +1 at the branch's ``a`` node, -1 at ``b``."""
        from scipy.sparse import coo_matrix

        rows, cols, vals = [], [], []
        for k, (a, b, _) in enumerate(self.branches):
            if a != GROUND:
                rows.append(a); cols.append(k); vals.append(1.0)
            if b != GROUND:
                rows.append(b); cols.append(k); vals.append(-1.0)
        return coo_matrix((vals, (rows, cols)), shape=(self.n_nodes, len(self.branches))).tocsr()

    def source_current(self, t, ac_scale=1.0):
        """Injected node currents at time(s) ``t``: shape ``t.shape + (n_nodes,)``.

        ``ac_scale`` multiplies the tones only (used for soft turn-on).
        """
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.n_nodes,))
        for s in self.sources:
            i = s.value(t, ac_scale)
            if s.pos != GROUND:
                out[..., s.pos] += i
            if s.neg != GROUND:
                out[..., s.neg] -= i
        return out

    @property
    def state_count(self) -> int:
        """Dynamic states: branch phases plus nodes that carry capacitance."""
        c = self.capacitance_matrix()
        return len(self.branches) + int(np.count_nonzero(np.abs(c).sum(axis=1)))


def _stamp(n, elements):
    from scipy.sparse import coo_matrix

    rows, cols, vals = [], [], []
    for a, b, y in elements:
        if a != GROUND:
            rows.append(a); cols.append(a); vals.append(y)
        if b != GROUND:
            rows.append(b); cols.append(b); vals.append(y)
        if a != GROUND and b != GROUND:
            rows += [a, b]; cols += [b, a]; vals += [-y, -y]
    return coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# chains and presets


def uniform_chain(device: Device, c_shunt: float, n_cells: int, *, i_dc: float = 0.0,
                  tones: Sequence[Tone] = (), r_source: float = 50.0, r_load: float = 50.0,
                  cell_pitch: float | None = None, r_shunt: float | None = None) -> Circuit:
    cell = Cell(device, c_shunt, r_shunt)
    return Circuit((cell,) * n_cells, Source(i_dc, tuple(tones), r_source), r_load, cell_pitch)


def jj_chain_2000(n_cells: int = 2000) -> Circuit:
    """JJ line biased at half the critical current, 50 ohm with 108.6 fF shunts."""
    return uniform_chain(JJParams(1.4e-6), 108.6e-15, n_cells, i_dc=0.7e-6, cell_pitch=15e-6)


def jj_chain_4wm(n_cells: int = 1000) -> Circuit:
    """Unbiased four-wave-mixing JJ line."""
    return uniform_chain(JJParams(1.318e-6), 93e-15, n_cells, cell_pitch=15e-6)


def snail_3wm_device(flux_quanta: float = 0.4) -> SNAILParams:
    # one small junction (0.8 uA) against three 3 uA junctions; junction
    # capacitance scales with critical current from 8.2 fF at 3 uA
    return SNAILParams(3, 0.8e-6, 3e-6, math.pi * flux_quanta,
                       c_j1=8.2e-15 * 0.8 / 3.0, c_j2=8.2e-15)


def snail_chain_440(n_cells: int = 440, flux_quanta: float = 0.4) -> Circuit:
    return uniform_chain(snail_3wm_device(flux_quanta), 150e-15, n_cells)


def snail_osc_device(flux_quanta: float = 0.45) -> SNAILParams:
    # single 1.26 uA junction, three 2.53 uA junctions, 25 fF across the SNAIL
    return SNAILParams(3, 1.26e-6, 2.53e-6, math.pi * flux_quanta, c_j1=25e-15, c_j2=0.0)


def snail_chain_100(n_cells: int = 100, flux_quanta: float = 0.45) -> Circuit:
    return uniform_chain(snail_osc_device(flux_quanta), 159e-15, n_cells)


def snail13_lpf_cell(flux_quanta: float) -> Circuit:
    """Single SNAIL-13 low-pass section with a 100 fF shunt."""
    return uniform_chain(snail_3wm_device(flux_quanta), 100e-15, 1)


PRESETS = {
    "jj2000": jj_chain_2000,
    "jj1000_4wm": jj_chain_4wm,
    "snail440": snail_chain_440,
    "snail100": snail_chain_100,
}
