"""Compare k=1 against k-demonstration feature ensembles and report the double-inference change."""

import argparse
import json

import numpy as np

from context_forge.experiments import desk_data, ensemble_comparison
from context_forge.inference import InferenceRequest, infer, infer_double
from context_forge.metrics import fgiou_fscore
from context_forge.model import ContextModel
from context_forge.rng import derive_rng
from context_forge.training import random_demo


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--samples", type=int, default=2000, help="desk dataset size the model was trained on")
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    model = ContextModel.load(args.checkpoint)
    train_pool, val_pool = desk_data(args.samples)
    queries = val_pool[:args.queries]
    for seed in args.seeds:
        one, many = ensemble_comparison(model, queries, train_pool, args.k, seed)
        print(json.dumps({"seed": seed, "k1_fgiou": one, f"k{args.k}_fgiou": many}), flush=True)
    rng = derive_rng(0, "double")
    delta = []
    for q in queries:
        req = InferenceRequest(q.input, [random_demo(train_pool, q, rng)])
        first = fgiou_fscore(infer(req, model).mask, q.seg[0])[0]
        second = fgiou_fscore(infer_double(req, model).mask, q.seg[0])[0]
        delta.append(second - first)
    print(json.dumps({"double_inference_fgiou_delta": float(np.mean(delta))}))


if __name__ == "__main__":
    main()
