"""Paired desk-scale ablations: CAA vs linear-only fusion, or self-prompting p=0.2 vs p=0."""

import argparse
import json
from dataclasses import replace

import numpy as np

from context_forge.experiments import ABLATION_RUN, ablation_cell, desk_data

STUDIES = {"caa": [("linear_only", 0.2), ("caa", 0.2)],
           "selfprompt": [("caa", 0.0), ("caa", 0.2)]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("study", choices=sorted(STUDIES))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=ABLATION_RUN.epochs)
    ap.add_argument("--samples", type=int, default=ABLATION_RUN.samples)
    ap.add_argument("--queries", type=int, default=100)
    args = ap.parse_args()
    base = replace(ABLATION_RUN, epochs=args.epochs, samples=args.samples)
    data = desk_data(base.samples, base.data_seed)
    cells = []
    for seed in args.seeds:
        for fusion, p in STUDIES[args.study]:
            cell = ablation_cell(fusion, p, seed, base, args.queries, data)
            cells.append(cell)
            print(json.dumps(cell), flush=True)
    for fusion, p in STUDIES[args.study]:
        arm = [c for c in cells if c["fusion"] == fusion and c["self_prompt_p"] == p]
        print(json.dumps({"arm": f"{fusion}/p={p}", "fgiou": float(np.mean([c["fgiou"] for c in arm])),
                          "fgiou_gap": float(np.mean([c["fgiou_gap"] for c in arm])),
                          "psnr": float(np.mean([c["psnr"] for c in arm]))}))


if __name__ == "__main__":
    main()
