"""Fit the toy model to one self-prompted scene per seed and report removal PSNR."""

import argparse
import json
import time

from context_forge.model import TOY_CONFIG, ContextModel
from context_forge.synthdata import SceneSpec, generate_dataset
from context_forge.training import overfit_probe, probe_psnr
from dataclasses import replace


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=800)
    ap.add_argument("--eval-every", type=int, default=20)
    ap.add_argument("--stop-above", type=float, default=25.0, help="early-stop PSNR; <= 0 disables")
    args = ap.parse_args()
    for seed in args.seeds:
        sample = generate_dataset(SceneSpec(), 1, seed)[0]
        model = ContextModel(replace(TOY_CONFIG, seed=seed))
        start = probe_psnr(model, sample)
        t0 = time.perf_counter()
        final, history = overfit_probe(sample, model, args.steps, eval_every=args.eval_every,
                                       stop_above=args.stop_above if args.stop_above > 0 else None)
        print(json.dumps({"seed": seed, "initial_psnr": start, "final_psnr": final,
                          "steps": history[-1]["step"] if history else 0,
                          "seconds": time.perf_counter() - t0, "history": history}), flush=True)


if __name__ == "__main__":
    main()
