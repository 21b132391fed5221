"""Command-line front end: ``twpa-hb <subcommand> --config run.toml --out results/``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 partial
sweep (some points failed).  Every CSV starts with ``#`` header lines giving
the tool version, the configuration hash and the solver options, and carries
no timestamps, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import gain_spectrum, harmonic_profile_along_chain, harmonics_vs_input_power
from .config import ConfigError, RunConfig, load_config
from .coupled_mode import (
    CMParams, analytic_m2, cm_integrate, compare_cm_vs_hb, hb_to_cm_profile, params_for_circuit,
)
from .devices import JJParams, SNAILParams
from .hb import MaxIterations, SingularJacobian, solve_circuit
from .linear import chain_sparams, input_impedance_smallsignal, sparams_sweep
from .transient import (
    NewtonFailure, NoSteadyState, ThresholdNotCrossed, jj_voltage_oscillation,
    measure_wavefront, pump_delay_run, squid_flux_staircase,
)

log = logging.getLogger("twpahb")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PARTIAL = 0, 2, 3, 4
SOLVER_ERRORS = (MaxIterations, SingularJacobian, NoSteadyState, NewtonFailure, ThresholdNotCrossed)


class SolverFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def header_lines(cfg: RunConfig | None, extra: dict | None = None) -> list[str]:
    lines = [f"twpahb {__version__}"]
    if cfg is not None:
        lines.append(f"analysis {cfg.analysis}")
        lines.append(f"config_sha256 {cfg.digest}")
        opts = cfg.solver.as_dict()
        lines.append("solver " + json.dumps(opts, sort_keys=True, default=str))
        lines.append(f"power_steps {cfg.power_steps}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    return lines


def write_csv(path: Path, columns: dict, header: list[str]) -> Path:
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    rows = len(cols[0]) if cols else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names)
        for i in range(rows):
            wr.writerow([_fmt(c[i]) for c in cols])
    return path


def _summary(out: Path, name: str, items: dict, header: list[str]) -> None:
    write_csv(out / name, {"key": list(items), "value": [_fmt(v) for v in items.values()]}, header)
    for k, v in items.items():
        print(f"{k} = {_fmt(v)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_sparams(cfg: RunConfig, out: Path, jobs: int) -> int:
    f = cfg.blocks["frequencies"]
    hdr = header_lines(cfg)
    names, table = sparams_sweep(cfg.circuit, f).columns()
    write_csv(out / "sparams.csv", dict(zip(names, table.T)), hdr)
    if "fluxes" in cfg.blocks:
        rows = {"flux_phi0": [], "f_hz": [], "s21_db": []}
        for flux in cfg.blocks["fluxes"]:
            circ = _with_flux(cfg.circuit, flux)
            s21 = chain_sparams(circ, f).s21
            rows["flux_phi0"] += [flux] * f.size
            rows["f_hz"] += list(f)
            rows["s21_db"] += list(20 * np.log10(np.maximum(np.abs(s21), 1e-300)))
        write_csv(out / "flux_s21.csv", rows, hdr)
    print(f"wrote {out / 'sparams.csv'}")
    return EXIT_OK


def _with_flux(circuit, flux_quanta: float):
    cells = []
    for c in circuit.cells:
        if not isinstance(c.device, SNAILParams):
            raise ConfigError("flux sweeps need SNAIL devices")
        cells.append(replace(c, device=replace(c.device, flux_F=math.pi * flux_quanta)))
    return replace(circuit, cells=tuple(cells))


def cmd_transient(cfg: RunConfig, out: Path, jobs: int) -> int:
    b = cfg.blocks
    hdr = header_lines(cfg)
    exp = b["experiment"]
    if exp == "vco":
        res = [jj_voltage_oscillation(v, JJParams(b["ic"])) for v in b["voltages"]]
        write_csv(out / "vco.csv", {"v_dc_v": b["voltages"], "f_hz": [r.frequency for r in res],
                                    "f_expected_hz": [r.expected for r in res]}, hdr)
        for v, r in zip(b["voltages"], res):
            print(f"V_dc = {v:.4g} V -> f = {r.frequency:.6g} Hz")
        return EXIT_OK
    if exp == "squid":
        r = squid_flux_staircase(loop_l=b["loop_l"], junction=JJParams(b["ic"]), i_stop=b["i_stop"])
        write_csv(out / "squid_trace.csv", {"t_s": r.time, "i_ramp_a": r.ramp_current, "v_v": r.voltage}, hdr)
        write_csv(out / "squid_pulses.csv", {"pulse": np.arange(r.pulse_currents.size),
                                             "i_ramp_a": r.pulse_currents}, hdr)
        _summary(out, "summary.csv", {"delta_i_a": r.delta_i, "delta_i_times_l_wb": r.delta_i * b["loop_l"],
                                      "mean_area_wb": float(np.mean(r.areas))}, hdr)
        return EXIT_OK
    circ = cfg.circuit
    res = pump_delay_run(circ, b["f_pump"], b["i_pump"], b["t_stop"], b["dt_max"], b["probes"])
    cols = {"t_s": res.time}
    for j, nd in enumerate(res.probe_nodes):
        cols[f"v_node{nd}"] = res.voltages[:, j]
    write_csv(out / "trace.csv", cols, hdr)
    if exp == "delay":
        wf = measure_wavefront(res, res.probe_nodes, pitch=circ.cell_pitch, final_window=b["final_window"])
        write_csv(out / "wavefront.csv", {"node": list(wf.nodes), "arrival_s": wf.arrival}, hdr)
        _summary(out, "summary.csv", {"delay_s": wf.delay, "velocity_m_per_s": wf.velocity or float("nan")}, hdr)
    return EXIT_OK


def cmd_hb(cfg: RunConfig, out: Path, jobs: int) -> int:
    b = cfg.blocks
    if "input_powers" in b:
        return _hb_power_sweep(cfg, out)
    circ = cfg.circuit.with_drive(*b["tones"])
    sol = solve_circuit(circ, cfg.solver, signal_frequency=b["signal"], power_steps=cfg.power_steps)
    hdr = header_lines(cfg, {"converged": sol.converged, "iterations": sol.iterations,
                             "residual_a": repr(sol.residual_norm), "method": sol.method})
    out.mkdir(parents=True, exist_ok=True)
    (out / "spectrum.csv").write_text(sol.to_csv(b["nodes"], "\n".join(hdr)))
    hist = [h for h in sol.history if "iteration" in h]
    write_csv(out / "convergence.csv", {"iteration": [h["iteration"] for h in hist],
                                        "residual_a": [h["residual"] for h in hist],
                                        "step": [h["step"] for h in hist]}, hdr)
    z = sol.input_impedance()
    print(f"converged={sol.converged} iterations={sol.iterations} |F|={sol.residual_norm:.3e} A method={sol.method}")
    print(f"Z_in(fundamental) = {z.real:.6g} {z.imag:+.6g}j ohm")
    if not sol.converged:
        raise SolverFailure(f"HB did not converge (|F| = {sol.residual_norm:.3e} A)")
    return EXIT_OK


def _hb_power_sweep(cfg: RunConfig, out: Path) -> int:
    b = cfg.blocks
    try:
        prof = harmonics_vs_input_power(cfg.circuit, b["f_pump"], b["input_powers"], b["n_harmonics"], cfg.solver)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cols = prof.columns()
    cols["converged"] = prof.converged
    hdr = header_lines(cfg, {"f_pump_hz": repr(b["f_pump"])})
    write_csv(out / "harmonics_vs_power.csv", cols, hdr)
    ok = int(np.count_nonzero(prof.converged))
    print(f"wrote {out / 'harmonics_vs_power.csv'}: {ok}/{prof.axis.size} powers converged")
    if ok == 0:
        raise SolverFailure("no input power converged")
    return EXIT_PARTIAL if ok < prof.axis.size else EXIT_OK


def cmd_gain_sweep(cfg: RunConfig, out: Path, jobs: int) -> int:
    b = cfg.blocks
    sweep = gain_spectrum(cfg.circuit, b["f_pump"], b["i_pump"], b["frequencies"], b["i_signal"], cfg.solver,
                          jobs=jobs)
    hdr = header_lines(cfg, {"f_pump_hz": repr(b["f_pump"]), "i_pump_a": repr(b["i_pump"]),
                             "i_signal_a": repr(sweep.i_signal), "idler": f"{{{sweep.idler.n},{sweep.idler.m}}}"})
    write_csv(out / "gain.csv", sweep.columns(), hdr)
    failed = int(np.count_nonzero(~sweep.converged))
    for f, note in zip(sweep.frequencies, sweep.notes):
        if note:
            log.info("f_s = %.6g Hz: %s", f, note)
    print(f"wrote {out / 'gain.csv'}: {sweep.frequencies.size - failed}/{sweep.frequencies.size} points converged")
    if failed == sweep.frequencies.size:
        raise SolverFailure("no sweep point converged")
    return EXIT_PARTIAL if failed else EXIT_OK


def _cm_params(cfg: RunConfig | None, M: int, mu) -> tuple[CMParams, float]:
    b = cfg.blocks if cfg is not None else {}
    circ = cfg.circuit if cfg is not None else None
    if circ is not None and b.get("f_pump") is not None:
        f_p, i_p = b["f_pump"], b["i_pump"]
        # input voltage of the weakly driven chain: Norton 2 I into R_s || Z_in
        z_in = input_impedance_smallsignal(circ, [f_p])[0]
        r_s = circ.source.r_source
        v_in = abs(2 * i_p * z_in * r_s / (z_in + r_s))
        p = params_for_circuit(circ, f_p, v_in, M)
        if mu is not None:
            p = replace(p, mu=float(mu))
        xi_end = b.get("xi_end") or circ.n_cells * p.xi_per_cell
    else:
        p = CMParams(M=M, mu=float(mu or 0.0))
        xi_end = b.get("xi_end") or 3.0
    return p, float(xi_end)


def cmd_coupled_mode(cfg: RunConfig | None, out: Path, jobs: int, M=None, mu=None) -> int:
    b = cfg.blocks if cfg is not None else {}
    M = M or b.get("M", 2)
    mu = mu if mu is not None else b.get("mu")
    p, xi_end = _cm_params(cfg, M, mu)
    traj = cm_integrate(p, xi_end)
    cols = traj.columns()
    extra = {"M": M, "mu": repr(p.mu), "xi_end": repr(xi_end)}
    if cfg is not None and cfg.circuit is not None and b.get("f_pump") is not None:
        extra["xi_per_cell"] = repr(p.xi_per_cell)
    else:
        cols.pop("cell_index", None)
    if M == 2 and p.mu == 0:
        a1, a2 = analytic_m2(traj.xi)
        cols["sech_sq"] = a1 ** 2
        cols["tanh_sq"] = a2 ** 2
    hdr = header_lines(cfg, extra)
    stride = max(1, traj.xi.size // 1024)
    write_csv(out / "coupled_mode.csv", {k: np.asarray(v)[::stride] for k, v in cols.items()}, hdr)
    drift = float(np.max(np.abs(traj.total_power - traj.total_power[0])))
    print(f"wrote {out / 'coupled_mode.csv'}: M={M} mu={p.mu:.6g} xi_end={xi_end:.6g} power drift={drift:.2e}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out: Path, jobs: int, M=None, mu=None) -> int:
    b = cfg.blocks
    M = M or b["M"]
    steps = max(cfg.power_steps, 1)
    prof = harmonic_profile_along_chain(cfg.circuit, b["f_pump"], b["i_pump"], M, cfg.solver, steps)
    sol = prof.solutions[0]
    if not sol.converged:
        raise SolverFailure(f"HB did not converge (|F| = {sol.residual_norm:.3e} A)")
    p = params_for_circuit(cfg.circuit, b["f_pump"], abs(sol.voltages[0, sol.grid.harmonic(1)]), M)
    if mu is not None:
        p = replace(p, mu=float(mu))
    traj = cm_integrate(p, (cfg.circuit.n_cells + 1) * p.xi_per_cell)
    cmp = compare_cm_vs_hb(traj, hb_to_cm_profile(sol, M), smooth=b["smooth"])
    hdr = header_lines(cfg, {"M": M, "mu": repr(p.mu), "xi_per_cell": repr(p.xi_per_cell)})
    write_csv(out / "compare.csv", cmp.columns(), hdr)
    write_csv(out / "hb_profile.csv", prof.columns(), hdr)
    _summary(out, "summary.csv", {"period_hb_cells": cmp.period_hb, "period_cm_cells": cmp.period_cm,
                                  "period_rel_diff": cmp.period_error,
                                  **{f"rms_a{m + 1}_sq": cmp.rms[m] for m in range(M)}}, hdr)
    return EXIT_OK


def cmd_validate(cfg: RunConfig, out: Path, jobs: int) -> int:
    print(f"ok {cfg.analysis} config_sha256={cfg.digest}")
    return EXIT_OK


COMMANDS = {
    "sparams": cmd_sparams,
    "transient": cmd_transient,
    "hb": cmd_hb,
    "gain-sweep": cmd_gain_sweep,
    "coupled-mode": cmd_coupled_mode,
    "compare": cmd_compare,
    "validate-config": cmd_validate,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twpa-hb", description="Harmonic-balance TWPA simulator")
    ap.add_argument("--version", action="version", version=f"twpahb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name not in ("coupled-mode",))
        p.add_argument("--out", type=Path, default=Path("results"))
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--harmonics", type=int, default=None)
        p.add_argument("--method", choices=("lu", "gmres"), default=None)
        p.add_argument("--verbose", "-v", action="store_true")
        if name in ("coupled-mode", "compare"):
            p.add_argument("--M", type=int, default=None, dest="M")
            p.add_argument("--mu", type=float, default=None)
    return ap


def _jobs(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("TWPA_HB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"TWPA_HB_THREADS must be an integer, got {env!r}")
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    try:
        jobs = _jobs(args.jobs)
        if args.harmonics is not None and args.harmonics < 1:
            raise ConfigError("--harmonics must be >= 1")
        if args.config is None:
            cfg = None
        else:
            analysis = None if cmd == "validate-config" else cmd
            cfg = load_config(args.config, analysis, args.harmonics, args.method)
        if cmd in ("coupled-mode", "compare"):
            if args.M is not None and args.M < 2:
                raise ConfigError("--M must be >= 2")
            return COMMANDS[cmd](cfg, args.out, jobs, args.M, args.mu)
        return COMMANDS[cmd](cfg, args.out, jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, *SOLVER_ERRORS) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
