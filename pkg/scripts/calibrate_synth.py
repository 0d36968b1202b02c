"""Mean generated graph statistics per (vector, class) against the targets.

    python3 scripts/calibrate_synth.py --n 100
"""

import argparse
import json

import numpy as np

from provgraph.hetgraph import stats
from provgraph.synth import TARGET_STATS, ScenarioSpec, generate_scenario, graph_seed


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=100, help="graphs per row")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scale", type=float, default=1.0)
    a = p.parse_args(argv)
    rows = []
    for (vector, label), target in TARGET_STATS.items():
        sts = np.array([stats(generate_scenario(ScenarioSpec(vector, label, graph_seed(a.seed, i), scale=a.scale)))
                        .as_tuple() for i in range(a.n)], dtype=float)
        mean = sts.mean(axis=0)
        want = np.array(target, dtype=float) * [a.scale, a.scale, 1.0]
        rows.append({
            "vector": vector.value, "label": label.name, "mean": mean.round(2).tolist(), "target": want.tolist(),
            "rel_error": ((mean[:2] - want[:2]) / want[:2]).round(4).tolist(),
            "relation_delta": round(float(mean[2] - want[2]), 2),
        })
        print(f"{vector.value:14s} {label.name:7s} nodes {mean[0]:9.1f}/{want[0]:9.1f}  "
              f"edges {mean[1]:10.1f}/{want[1]:10.1f}  relations {mean[2]:5.2f}/{want[2]:.0f}")
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
