"""Cross-validated F1 of the injection vectors over several dataset seeds.

    python3 scripts/hardness_ordering.py --scale 0.003 --seeds 1 2 3
"""

import argparse
import json
import logging
import sys
import time

import numpy as np

from provgraph.synth import generate_dataset
from provgraph.trainer import cross_validate, schedule_for

VECTORS = ("xss-stored", "xss-reflected", "xss-dom")


def run(vectors, seeds, scale, n, folds, hidden_dim):
    scores = {v: [] for v in vectors}
    for v in vectors:
        for seed in seeds:
            t = time.time()
            ds = generate_dataset(v, n, n, seed, scale=scale)
            args = schedule_for(v, seed=seed, hidden_dim=hidden_dim)
            summary = cross_validate(args, ds, folds, seed, callbacks=[])
            scores[v].append(summary.mean("f1"))
            logging.info("%s seed %d: F1 %.4f (%.0fs)", v, seed, scores[v][-1], time.time() - t)
    return scores


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vectors", nargs="+", default=list(VECTORS))
    p.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    p.add_argument("--scale", type=float, default=0.003)
    p.add_argument("--n", type=int, default=100, help="graphs per class")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--hidden-dim", type=int, default=256)
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    scores = run(a.vectors, a.seeds, a.scale, a.n, a.folds, a.hidden_dim)
    out = {v: {"per_seed": s, "mean": float(np.mean(s))} for v, s in scores.items()}
    print(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
