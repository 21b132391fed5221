"""Run configuration files: TOML with unit-suffixed physical quantities.

Every dimensional value is a string carrying its unit, e.g. ``ic = "1.4 uA"``,
``c_shunt = "108.6 fF"``, ``f_pump = "6.0102 GHz"``.  Dimensionless values
(cell counts, harmonic orders, flux in ``Phi0``) are plain numbers or use
their own suffix.  The whole file is validated before any solve starts.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .circuit import PRESETS, Cell, Circuit, Source, Tone
from .devices import JJParams, LinearInductor, SNAILParams
from .hb import METHODS, SolverOptions, incident_amplitude
from .spectral import BOX, DIAMOND


class ConfigError(ValueError):
    pass


_PREFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "µ": 1e-6, "m": 1e-3, "": 1.0,
           "k": 1e3, "M": 1e6, "G": 1e9, "T": 1e12}
_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*((?:[a-zA-Zµ][a-zA-Zµ0-9]*)?)\s*$")

ANALYSES = ("sparams", "transient", "hb", "gain-sweep", "coupled-mode", "compare")


def parse_quantity(value: Any, unit: str, key: str = "value") -> float:
    """SI value of ``"<number> <prefix><unit>"``; bare numbers are rejected for dimensional units."""
    if isinstance(value, bool) or not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string with unit '{unit}', got {value!r}")
    m = _QTY.match(value)
    if not m:
        raise ConfigError(f"{key}: cannot parse quantity {value!r}")
    number, suffix = float(m.group(1)), m.group(2)
    if unit == "dBm":
        if suffix != "dBm":
            raise ConfigError(f"{key}: expected dBm, got {value!r}")
        return number
    if unit == "Phi0":
        if suffix != "Phi0":
            raise ConfigError(f"{key}: expected flux in Phi0, got {value!r}")
        return number
    if not suffix.endswith(unit):
        raise ConfigError(f"{key}: expected unit '{unit}', got {value!r}")
    prefix = suffix[: len(suffix) - len(unit)]
    if prefix not in _PREFIX:
        raise ConfigError(f"{key}: unknown SI prefix {prefix!r} in {value!r}")
    return number * _PREFIX[prefix]


def _get(block: dict, key: str, unit: str | None, where: str, default=None, required=False):
    if key not in block:
        if required:
            raise ConfigError(f"[{where}] missing required key '{key}'")
        return default
    if unit is None:
        return block[key]
    return parse_quantity(block[key], unit, f"{where}.{key}")


def _int(block, key, where, default=None, minimum=None, required=False):
    v = _get(block, key, None, where, default, required)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"[{where}] '{key}' must be an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"[{where}] '{key}' must be >= {minimum}")
    return v


def _frequencies(block: dict, where: str, required: bool = True) -> np.ndarray | None:
    if "frequencies" in block:
        raw = block["frequencies"]
        if not isinstance(raw, list):
            raise ConfigError(f"[{where}] 'frequencies' must be a list")
        f = np.array([parse_quantity(v, "Hz", f"{where}.frequencies") for v in raw])
    elif "f_start" in block or "f_stop" in block:
        start = _get(block, "f_start", "Hz", where, required=True)
        stop = _get(block, "f_stop", "Hz", where, required=True)
        points = _int(block, "points", where, 101, minimum=0)
        f = np.linspace(start, stop, points)
    elif required:
        raise ConfigError(f"[{where}] needs 'frequencies' or 'f_start'/'f_stop'")
    else:
        return None
    if f.size == 0:
        raise ConfigError(f"[{where}] empty frequency list")
    if np.any(f <= 0):
        raise ConfigError(f"[{where}] frequencies must be positive")
    return f


def _drive_amplitude(block: dict, where: str, amp_key: str, power_key: str, r_source: float,
                     required: bool = True):
    if amp_key in block and power_key in block:
        raise ConfigError(f"[{where}] give either '{amp_key}' or '{power_key}', not both")
    if amp_key in block:
        return _get(block, amp_key, "A", where)
    if power_key in block:
        return incident_amplitude(_get(block, power_key, "dBm", where), r_source)
    if required:
        raise ConfigError(f"[{where}] needs '{amp_key}' (A) or '{power_key}' (dBm)")
    return None


# ---------------------------------------------------------------------------
# circuit


def build_device(block: dict, where: str = "circuit"):
    kind = block.get("device", "jj")
    if kind == "jj":
        return JJParams(_get(block, "ic", "A", where, required=True),
                        _get(block, "cj", "F", where, 0.0))
    if kind == "snail":
        flux = _get(block, "flux", "Phi0", where, 0.0)
        return SNAILParams(_int(block, "n_series", where, 3, minimum=1),
                           _get(block, "ic1", "A", where, required=True),
                           _get(block, "ic2", "A", where, required=True),
                           math.pi * flux, _get(block, "cj1", "F", where, 0.0), _get(block, "cj2", "F", where, 0.0))
    if kind == "inductor":
        return LinearInductor(_get(block, "l", "H", where, required=True), _get(block, "cj", "F", where, 0.0))
    raise ConfigError(f"[{where}] unknown device kind {kind!r} (jj, snail, inductor)")


def build_circuit(block: dict) -> Circuit:
    where = "circuit"
    try:
        if "preset" in block:
            name = block["preset"]
            if name not in PRESETS:
                raise ConfigError(f"[circuit] unknown preset {name!r}; choose from {sorted(PRESETS)}")
            factory = PRESETS[name]
            kwargs = {}
            if "cells" in block:
                kwargs["n_cells"] = _int(block, "cells", where, minimum=1)
            if "flux" in block:
                kwargs["flux_quanta"] = _get(block, "flux", "Phi0", where)
            try:
                circ = factory(**kwargs)
            except TypeError as exc:
                raise ConfigError(f"[circuit] preset {name!r} does not accept {sorted(kwargs)}") from exc
        else:
            dev = build_device(block)
            n = _int(block, "cells", where, required=True, minimum=1)
            cell = Cell(dev, _get(block, "c_shunt", "F", where, required=True), _get(block, "r_shunt", "ohm", where))
            circ = Circuit((cell,) * n, Source(), 50.0, _get(block, "pitch", "m", where))
        src = circ.source
        r_source = _get(block, "r_source", "ohm", where, src.r_source)
        i_dc = _get(block, "i_dc", "A", where, src.i_dc)
        r_load = _get(block, "r_load", "ohm", where, circ.r_load)
        pitch = _get(block, "pitch", "m", where, circ.cell_pitch)
        return Circuit(circ.cells, Source(i_dc, (), r_source), r_load, pitch)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[circuit] {exc}") from exc


def build_solver(block: dict, harmonics=None, method=None) -> tuple[SolverOptions, int]:
    where = "solver"
    k = harmonics if harmonics is not None else _int(block, "harmonics", where, 7, minimum=1)
    m = method if method is not None else block.get("method", "auto")
    if m not in METHODS and m not in ("lu", "direct", "gmres"):
        raise ConfigError(f"[solver] unknown method {m!r}")
    trunc = block.get("truncation", BOX)
    if trunc not in (BOX, DIAMOND):
        raise ConfigError(f"[solver] truncation must be '{BOX}' or '{DIAMOND}'")
    opts = SolverOptions(harmonics=k, truncation=trunc, method=m,
                         max_iterations=_int(block, "max_iterations", where, 50, minimum=1),
                         rel_tol=float(block.get("rel_tol", 1e-9)),
                         initial_guess=block.get("initial_guess", "dc"))
    return opts, _int(block, "power_steps", where, 1, minimum=1)


# ---------------------------------------------------------------------------
# whole file


@dataclass
class RunConfig:
    raw: dict
    analysis: str
    circuit: Circuit | None
    solver: SolverOptions
    power_steps: int
    blocks: dict = field(default_factory=dict)  # parsed analysis-specific settings
    source_path: str | None = None

    @property
    def digest(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_tones(block: dict, where: str, r_source: float) -> tuple[Tone, ...]:
    tones = []
    for i, t in enumerate(block.get("tones", [])):
        if not isinstance(t, dict):
            raise ConfigError(f"[{where}] tones[{i}] must be a table")
        tw = f"{where}.tones[{i}]"
        f = _get(t, "frequency", "Hz", tw, required=True)
        amp = _drive_amplitude(t, tw, "amplitude", "power", r_source)
        phase = float(t.get("phase_deg", 0.0)) * math.pi / 180
        tones.append(Tone(f, amp, phase))
    return tuple(tones)


def _parse_block(analysis: str, raw: dict, circuit: Circuit | None) -> dict:
    key = analysis.replace("-", "_")
    block = raw.get(key, {})
    if not isinstance(block, dict):
        raise ConfigError(f"[{key}] must be a table")
    r_src = circuit.source.r_source if circuit is not None else 50.0
    out: dict = {}
    if analysis == "sparams":
        out["frequencies"] = _frequencies(block, key)
        if "fluxes" in block:
            out["fluxes"] = [parse_quantity(v, "Phi0", f"{key}.fluxes") for v in block["fluxes"]]
    elif analysis == "transient":
        exp = block.get("experiment", "drive")
        out["experiment"] = exp
        if exp == "vco":
            out["voltages"] = [parse_quantity(v, "V", f"{key}.voltages") for v in block.get("voltages", ["2 uV"])]
            out["ic"] = _get(block, "ic", "A", key, 1e-6)
        elif exp == "squid":
            out["loop_l"] = _get(block, "loop_l", "H", key, 100e-12)
            out["ic"] = _get(block, "ic", "A", key, 10e-6)
            out["i_stop"] = _get(block, "i_stop", "A", key, 120e-6)
        elif exp in ("delay", "drive"):
            out["f_pump"] = _get(block, "f_pump", "Hz", key, required=True)
            out["i_pump"] = _drive_amplitude(block, key, "i_pump", "p_pump", r_src)
            out["t_stop"] = _get(block, "t_stop", "s", key, required=True)
            out["dt_max"] = _get(block, "dt_max", "s", key)
            probes = block.get("probes")
            out["probes"] = tuple(int(p) for p in probes) if probes is not None else None
            out["final_window"] = _get(block, "final_window", "s", key)
        else:
            raise ConfigError(f"[{key}] unknown experiment {exp!r} (vco, squid, delay, drive)")
    elif analysis == "hb" and "input_powers" in block:
        # harmonic output power versus available input power (seeded sweep)
        out["f_pump"] = _get(block, "f_pump", "Hz", key, required=True)
        raw_p = block["input_powers"]
        if isinstance(raw_p, dict):
            start = _get(raw_p, "start", "dBm", f"{key}.input_powers", required=True)
            stop = _get(raw_p, "stop", "dBm", f"{key}.input_powers", required=True)
            step = _get(raw_p, "step", "dBm", f"{key}.input_powers", required=True)
            if step == 0:
                raise ConfigError(f"[{key}] input power step must be nonzero")
            out["input_powers"] = np.arange(start, stop + 0.5 * step, step)
        elif isinstance(raw_p, list):
            out["input_powers"] = np.array([parse_quantity(v, "dBm", f"{key}.input_powers") for v in raw_p])
        else:
            raise ConfigError(f"[{key}] 'input_powers' must be a list or a start/stop/step table")
        if out["input_powers"].size == 0:
            raise ConfigError(f"[{key}] empty input power list")
        out["n_harmonics"] = _int(block, "n_harmonics", key, 3, minimum=1)
    elif analysis == "hb":
        tones = _parse_tones(block, key, r_src)
        if not tones:
            raise ConfigError(f"[{key}] needs at least one tone")
        out["tones"] = tones
        out["signal"] = _get(block, "signal_frequency", "Hz", key)
        nodes = block.get("nodes")
        out["nodes"] = None if nodes is None else [int(n) for n in nodes]
    elif analysis == "gain-sweep":
        out["f_pump"] = _get(block, "f_pump", "Hz", key, required=True)
        out["i_pump"] = _drive_amplitude(block, key, "i_pump", "p_pump", r_src)
        out["i_signal"] = _drive_amplitude(block, key, "i_signal", "p_signal", r_src, required=False)
        out["frequencies"] = _frequencies(block, key)
    elif analysis in ("coupled-mode", "compare"):
        out["M"] = _int(block, "M", key, 5 if analysis == "compare" else 2, minimum=2)
        out["mu"] = block.get("mu")
        out["xi_end"] = block.get("xi_end")
        out["f_pump"] = _get(block, "f_pump", "Hz", key, required=analysis == "compare")
        out["i_pump"] = _drive_amplitude(block, key, "i_pump", "p_pump", r_src, required=analysis == "compare")
        out["smooth"] = _int(block, "smooth", key, 5, minimum=1)
        if out["mu"] is not None and not isinstance(out["mu"], (int, float)):
            raise ConfigError(f"[{key}] 'mu' must be a number")
        if out["xi_end"] is not None and not (isinstance(out["xi_end"], (int, float)) and out["xi_end"] > 0):
            raise ConfigError(f"[{key}] 'xi_end' must be a positive number")
    return out


def parse_config(raw: dict, analysis: str | None = None, harmonics=None, method=None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a table")
    analysis = analysis or raw.get("analysis")
    if analysis not in ANALYSES:
        raise ConfigError(f"analysis must be one of {ANALYSES}, got {analysis!r}")
    circuit = build_circuit(raw["circuit"]) if "circuit" in raw else None
    if circuit is None and analysis not in ("coupled-mode",) and not (
            analysis == "transient" and raw.get("transient", {}).get("experiment") in ("vco", "squid")):
        raise ConfigError("[circuit] table is required for this analysis")
    try:
        solver, steps = build_solver(raw.get("solver", {}), harmonics, method)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[solver] {exc}") from exc
    blocks = _parse_block(analysis, raw, circuit)
    return RunConfig(raw, analysis, circuit, solver, steps, blocks)


def load_config(path: str | Path, analysis: str | None = None, harmonics=None, method=None) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = parse_config(raw, analysis, harmonics, method)
    cfg.source_path = str(path)
    return cfg
