"""Brute-force reproduction: 100/100 graphs, 5-fold CV, R-GCN schedule.

    python3 scripts/reproduce_bruteforce.py --scale 0.01
"""

import argparse
import logging
import sys
import time

from provgraph.synth import generate_dataset
from provgraph.trainer import cross_validate, report, schedule_for


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scale", type=float, default=0.01, help="node/edge size factor (default: 0.01)")
    p.add_argument("--n", type=int, default=100, help="graphs per class")
    p.add_argument("--folds", type=int, default=5)
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    t = time.time()
    ds = generate_dataset("brute-force", a.n, a.n, a.seed, scale=a.scale)
    summary = cross_validate(schedule_for("brute-force", seed=a.seed), ds, a.folds, a.seed, name="R-GCN")
    sys.stdout.buffer.write(report(summary, "text"))
    logging.info("done in %.0fs", time.time() - t)


if __name__ == "__main__":
    main()
