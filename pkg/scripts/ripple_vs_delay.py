"""Compare the gain-ripple spacing of a sweep with the transient round-trip delay.

Reads ``gain.csv`` written by ``twpa-hb gain-sweep`` for the 440-cell SNAIL
amplifier, estimates the ripple period over a band, then launches a weak pump
into the same chain and times the wavefront between the two ends.

    python scripts/ripple_vs_delay.py results/fig_gain_snail440/gain.csv
"""

import argparse
from pathlib import Path

import numpy as np

from twpahb.analysis import ripple_spacing
from twpahb.circuit import snail_chain_440
from twpahb.transient import measure_wavefront, pump_delay_run


def read_gain(path: Path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    data = np.genfromtxt(lines, delimiter=",", names=True)
    return data["f_signal_hz"], data["gain_db"]


def round_trip_delay(n_cells: int = 440, f: float = 6e9, amp: float = 20e-9) -> float:
    circ = snail_chain_440(n_cells)
    res = pump_delay_run(circ, f, amp, 8e-9, probes=(0, n_cells))
    return 2 * measure_wavefront(res, (0, n_cells), final_window=1e-9).delay


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("gain_csv", type=Path)
    ap.add_argument("--band", nargs=2, type=float, default=(5e9, 8e9), metavar=("F_LO", "F_HI"))
    args = ap.parse_args()
    f, g = read_gain(args.gain_csv)
    sel = (f >= args.band[0]) & (f <= args.band[1])
    df = ripple_spacing(f[sel], g[sel])
    td = round_trip_delay()
    print(f"ripple spacing      {df / 1e6:.1f} MHz  (1/df = {1e9 / df:.3f} ns)")
    print(f"round-trip delay    {td * 1e9:.3f} ns")
    print(f"relative mismatch   {abs(1 / df - td) / td:.3f}")
