"""Pilot runs that fix the finite-N bounds stored in ``nhgrem/data/calibration.json``.

Pilot seeds (``PILOT_SEED`` and up) never overlap the acceptance seeds,
which start at 0.
"""

import argparse
import json
import os
import time

import numpy as np

from nhgrem.chain import solve
from nhgrem.gibbs import ultrametric_batch
from nhgrem.model import builtin_model

PILOT_SEED = 10_000
OUT = os.path.join(os.path.dirname(__file__), "..", "src", "nhgrem", "data", "calibration.json")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batches", type=int, default=3)
    ap.add_argument("--replicas", type=int, default=100)
    ap.add_argument("--triples", type=int, default=10 ** 4)
    args = ap.parse_args()

    spec = builtin_model("paradigmatic")
    chain, levels, _ = solve(spec)
    beta = 2.0 * float(levels.beta[-1])
    sizes = (12, 18, 24)
    fr = {N: [] for N in sizes}
    t0 = time.time()
    for b in range(args.batches):
        for N in sizes:
            fr[N].append(ultrametric_batch(spec, chain, levels, beta, N, args.replicas, args.triples,
                                           PILOT_SEED + b))
        print(f"batch {b}: " + ", ".join(f"N={N}: {fr[N][-1]:.5f}" for N in sizes),
              f"({time.time() - t0:.0f}s)", flush=True)
    last = np.array(fr[sizes[-1]])
    # batch-to-batch spread plus a margin for the pilot's own uncertainty
    sd = float(last.std(ddof=1)) if last.size > 1 else float(last.mean())
    bound = float(last.mean() + 4.0 * sd)
    data = {
        "ultrametric_paradigmatic": {
            "beta": beta, "sizes": list(sizes), "replicas": args.replicas, "triples": args.triples,
            "pilot_seeds": [PILOT_SEED + b for b in range(args.batches)],
            "pilot_fractions": {str(N): fr[N] for N in sizes},
            "bound_final": bound,
            "rule": "pilot mean at the largest N plus 4 batch standard deviations",
        }
    }
    with open(OUT, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(data, indent=2))


if __name__ == "__main__":
    main()
