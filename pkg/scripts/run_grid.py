"""Run a (sub)grid of methods x training fractions and print a mean-F1 table.

    python scripts/run_grid.py --methods BCE BCE+Tr-DWS --fractions 0.125 1.0 --seeds 0 1 2 --workers 4
"""

import argparse
import logging
import os
import time

from mitodml import io
from mitodml.experiment import ExperimentConfig, ExperimentGrid, run_experiment
from mitodml.trainer import METHODS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--methods", nargs="+", default=list(METHODS))
    p.add_argument("--fractions", nargs="+", type=float, default=[0.125, 0.25, 0.5, 1.0])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    p.add_argument("--out", default=str(io.output_root() / "grid"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    cfg = ExperimentConfig(grid=ExperimentGrid(args.methods, args.fractions, args.seeds), workers=args.workers)
    io.write_json(cfg, os.path.join(args.out, "config.json"))
    t0 = time.perf_counter()
    _, agg = run_experiment(cfg, args.out)

    cells = {(a["method"], a["fraction"]): a for a in agg}
    print(f"{'method':<12}" + "".join(f"{f:>16.3f}" for f in args.fractions))
    for m in args.methods:
        row = "".join(f"{cells[m, f]['mean_f1']:>9.3f} +-{cells[m, f]['std_f1']:.3f}" for f in args.fractions)
        print(f"{m:<12}{row}")
    print(f"{time.perf_counter() - t0:.0f}s, metrics in {args.out}")


if __name__ == "__main__":
    main()
