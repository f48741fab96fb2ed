"""Run the convergence studies for one or more presets and print the fitted rates.

    python3 scripts/run_convergence.py                       # all four, full scale
    python3 scripts/run_convergence.py 2d_checkerboard --scaled
    python3 scripts/run_convergence.py 1d_matern_gig --samples 50 --seed 3

``--scaled`` runs the 2D presets on levels 1..4 with reference level 6, the
cheaper substitute used by the acceptance tests. Each run writes
``report.csv``, ``samples.csv`` and ``run.json`` under ``<out>/<preset>``.
"""
import argparse
import csv
import os
import sys
import time
from pathlib import Path

from jumpfem.cli import main as cli_main
from jumpfem.experiment import experiment_presets


def run_one(name, args):
    out = Path(args.out) / (name + ("_scaled" if args.scaled and name.startswith("2d") else ""))
    argv = ["run", "--preset", name, "--samples", str(args.samples), "--seed", str(args.seed),
            "--threads", str(args.threads), "--out", str(out)]
    if args.scaled and name.startswith("2d"):
        argv += ["--levels", "1-4", "--ref-level", "6"]
    t0 = time.perf_counter()
    code = cli_main(argv)
    if code != 0:
        return code
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows[:-1]:
        print(f"  level {r['level']}: adapted {float(r['rmse_adapted']):.4e} +- {float(r['se_adapted']):.1e}"
              f"   non-adapted {float(r['rmse_nonadapted']):.4e} +- {float(r['se_nonadapted']):.1e}")
    k = rows[-1]
    print(f"{name}: kappa adapted {float(k['rmse_adapted']):.3f}, non-adapted "
          f"{float(k['rmse_nonadapted']):.3f} ({time.perf_counter() - t0:.0f} s)")
    return 0


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("presets", nargs="*", default=list(experiment_presets()))
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="results")
    p.add_argument("--scaled", action="store_true")
    args = p.parse_args()
    for name in args.presets:
        code = run_one(name, args)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
