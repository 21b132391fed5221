"""Run every bundled config (or a subset) through the command-line front end.

Each config writes its CSV files into ``<out>/<config stem>/``.  The analysis
type stored in the config selects the subcommand.

    python scripts/run_configs.py                 # all configs
    python scripts/run_configs.py fig_s21 fig_vco # names containing these substrings
    python scripts/run_configs.py --skip-slow     # leave out the long gain sweeps
"""

import argparse
import sys
import time
from pathlib import Path

from twpahb.cli import main
from twpahb.config import load_config

ROOT = Path(__file__).resolve().parents[1]
SLOW = {"fig_gain_jj1000", "fig_gain_snail440", "fig_harm123_snail", "fig_delay_jj2000"}


def run(paths, out: Path, jobs: int | None) -> int:
    worst = 0
    for path in paths:
        cfg = load_config(path)
        argv = [cfg.analysis, "--config", str(path), "--out", str(out / path.stem)]
        if jobs:
            argv += ["--jobs", str(jobs)]
        t0 = time.perf_counter()
        code = main(argv)
        print(f"{path.stem}: exit {code} in {time.perf_counter() - t0:.1f} s", flush=True)
        worst = max(worst, code)
    return worst


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="substrings of config names to run")
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    ap.add_argument("--jobs", type=int, default=None)
    ap.add_argument("--skip-slow", action="store_true")
    return ap.parse_args(argv)


if __name__ == "__main__":
    args = parse_args()
    paths = sorted((ROOT / "configs").glob("*.toml"))
    if args.names:
        paths = [p for p in paths if any(n in p.stem for n in args.names)]
    if args.skip_slow:
        paths = [p for p in paths if p.stem not in SLOW]
    sys.exit(run(paths, args.out, args.jobs))
