"""Train the desk-scale model on freshly generated synthetic data and save checkpoint plus logs."""

import argparse
import json
from pathlib import Path

from context_forge.experiments import DeskRun, demo_gap, train_desk


def main():
    d = DeskRun()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=d.samples)
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--lr", type=float, default=d.lr)
    ap.add_argument("--fusion", choices=["none", "linear_only", "caa"], default=d.fusion)
    ap.add_argument("--self-prompt-p", type=float, default=d.self_prompt_p)
    ap.add_argument("--infer-mask-p", type=float, default=d.infer_mask_p)
    ap.add_argument("--seed", type=int, default=d.seed)
    ap.add_argument("--val-limit", type=int, default=None)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    run = DeskRun(args.samples, args.epochs, args.lr, args.fusion, args.self_prompt_p, args.infer_mask_p,
                  args.seed, val_limit=args.val_limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, log, train_pool, val_pool, seconds = train_desk(
        run, on_epoch=lambda rec: print(json.dumps(rec), flush=True))
    model.save(out / "model.ctckpt", {"run": vars(run)})
    log.to_jsonl(out / "trainlog.jsonl")
    gap = demo_gap(model, val_pool[:50], train_pool, args.seed)
    summary = {"seconds": seconds, "final": log.epochs[-1] if log.epochs else None, "demo_gap": gap}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
