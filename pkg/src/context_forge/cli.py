"""``context-forge`` command line: data generation, training, evaluation, inference, benchmarks.

Exit codes: 0 success, 1 contract/config errors, 2 runtime failures.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .compositor import SampleTriple, inference_plan
from .errors import ContractError, GenerationError, ModelError, ShapeError, TrainingDiverged
from .flops import flop_breakdown, flop_estimate
from .imaging import load_png, save_png
from .inference import InferenceRequest, predict, query_grid
from .metrics import GaussianStats, ToyEmbedder, aggregate, evaluate_pair, format_table, frechet_distance
from .model import TOY_CONFIG, ContextModel, ModelConfig
from .rng import derive_rng
from .synthdata import (PromptTextSpec, SceneSpec, default_split, generate_dataset, generate_prompttext,
                        prompttext_metadata, read_manifest, write_dataset)
from .training import TrainConfig, Trainer

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SceneSpec, "prompttext": PromptTextSpec}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config

def _coerce(value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    if isinstance(default, tuple) and isinstance(value, list):
        value = tuple(value)
    return value


def build_config(file_values, overrides):
    """Merge flat dotted keys (``model.dim`` ...) into per-section dataclass instances.

    Override values win over file values; unknown keys raise ContractError.
    """
    merged = dict(file_values)
    merged.update(overrides)
    per = {name: {} for name in SECTIONS}
    for key, value in merged.items():
        section, _, fname = key.partition(".")
        if section not in SECTIONS:
            raise ContractError(f"unknown config key {key!r}")
        known = {f.name: f for f in dataclasses.fields(SECTIONS[section]) if not f.name.startswith("_")}
        if fname not in known:
            raise ContractError(f"unknown config key {key!r}")
        default = getattr(SECTIONS[section](), fname)
        per[section][fname] = _coerce(value, default)
    try:
        return {name: cls(**per[name]) for name, cls in SECTIONS.items()}
    except TypeError as exc:
        raise ContractError(str(exc)) from exc


def _load_config_file(path):
    if not path:
        return {}
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ContractError("config file must hold a flat JSON object")
    return values


def _overrides(args):
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ContractError(f"--set expects KEY=VALUE, got {item!r}")
        out[key] = value
    seed = getattr(args, "seed", None)
    if seed is not None:
        for key in ("model.seed", "train.seed", "data.seed", "prompttext.seed"):
            out[key] = seed
    named = {"ratio": "train.mask_ratio", "self_prompt_p": "train.self_prompt_p",
             "mode": "model.mode", "fusion": "model.fusion", "epochs": "train.epochs",
             "lr": "train.lr", "manifest": "train.manifest"}
    for attr, key in named.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def _configs(args):
    return build_config(_load_config_file(args.config), _overrides(args))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    spec = cfg["data"]
    triples = generate_dataset(spec, args.count, spec.seed)
    out = Path(args.out)
    manifest = write_dataset(out, triples, [default_split(i) for i in range(len(triples))])
    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(triples)} samples to {manifest}")


def cmd_gen_prompttext(args, cfg):
    spec = cfg["prompttext"]
    if args.count is not None:
        spec = dataclasses.replace(spec, count=args.count)
    samples = generate_prompttext(spec)
    triples = [s.as_triple() for s in samples]
    out = Path(args.out)
    manifest = write_dataset(out, triples, ["test"] * len(triples),
                             [prompttext_metadata(s) for s in samples])
    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(samples)} samples ({spec.count} images x {len(spec.erase_probabilities)} levels) "
          f"to {manifest}")


def _pools(manifest):
    records = read_manifest(manifest)
    train = [t for t, r in records if r.get("split") == "train"]
    val = [t for t, r in records if r.get("split") == "val"]
    return train, val


def cmd_train(args, cfg):
    tc = cfg["train"]
    if not tc.manifest:
        raise ContractError("train needs --manifest (or train.manifest in the config)")
    train_pool, val_pool = _pools(tc.manifest)
    if not train_pool:
        raise ContractError("manifest holds no training samples")
    h, w = train_pool[0].hw
    mc = dataclasses.replace(cfg["model"], panel_h=h, panel_w=w) if (h, w) != (
        cfg["model"].panel_h, cfg["model"].panel_w) else cfg["model"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if tc.checkpoint_dir is None:
        tc = dataclasses.replace(tc, checkpoint_dir=str(out))
    model = ContextModel(mc)
    trainer = Trainer(model, tc, train_pool, val_pool)
    trainer.fit(lambda rec: print(json.dumps(rec, sort_keys=True), flush=True))
    trainer.log.to_jsonl(out / "trainlog.jsonl")
    path = model.save(out / "model.ctckpt", {"steps": trainer.step,
                                             "train": dataclasses.asdict(tc)})
    print(f"saved {path}")


def _query_records(manifest, split):
    records = read_manifest(manifest)
    queries = [(t, r) for t, r in records if split is None or r.get("split") == split]
    pool = [t for t, r in records if r.get("split") == "train"] or [t for t, _ in records]
    return queries, pool, {t.sample_id: t for t, _ in records}


def _demos_for(query, rec, pool, by_id, k, rng):
    if rec.get("demo_ids"):
        return [by_id[i] for i in rec["demo_ids"]]
    demos = []
    candidates = [t for t in pool if t.sample_id != query.sample_id]
    if len(candidates) < k:
        raise ContractError(f"pool has {len(candidates)} demonstrations, {k} requested")
    for i in rng.choice(len(candidates), size=k, replace=False):
        demos.append(candidates[int(i)])
    return demos


def _run_inference(model, manifest, split, k, double, threshold, seed, out):
    queries, pool, by_id = _query_records(manifest, split)
    rng = derive_rng(seed, "demo")
    out = Path(out)
    index = []
    preds = {}
    for q, rec in queries:
        demos = _demos_for(q, rec, pool, by_id, k, rng)
        res = predict(InferenceRequest(q.input, demos, double_inference=double, seg_threshold=threshold), model)
        entry = {"sample_id": q.sample_id, "demo_ids": [d.sample_id for d in demos]}
        if res.removal is not None:
            entry["removal_path"] = f"pred/{q.sample_id}_removal.png"
            save_png(out / entry["removal_path"], res.removal)
        if res.mask is not None:
            entry["seg_path"] = f"pred/{q.sample_id}_seg.png"
            save_png(out / entry["seg_path"], res.mask.astype(np.float32))
        preds[q.sample_id] = res
        index.append(entry)
    (out / "results.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return queries, preds


def cmd_infer(args, cfg):
    if not args.checkpoint or not args.manifest:
        raise ContractError("infer needs --checkpoint and --manifest")
    model = ContextModel.load(args.checkpoint)
    queries, _ = _run_inference(model, args.manifest, args.split, args.demos, args.double,
                                args.threshold, cfg["train"].seed, args.out)
    print(f"wrote predictions for {len(queries)} queries to {Path(args.out) / 'results.json'}")


def _load_predictions(pred_dir, sid):
    pred_dir = Path(pred_dir)
    rem = pred_dir / f"{sid}_removal.png"
    seg = pred_dir / f"{sid}_seg.png"
    removal = load_png(rem) if rem.exists() else None
    mask = (load_png(seg)[0] > 0.5).astype(np.uint8) if seg.exists() else None
    if removal is None and mask is None:
        raise FileNotFoundError(f"no predictions for {sid} in {pred_dir}")
    return removal, mask


def cmd_eval(args, cfg):
    if not args.manifest:
        raise ContractError("eval needs --manifest")
    if bool(args.predictions) == bool(args.checkpoint):
        raise ContractError("eval needs exactly one of --predictions or --checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        model = ContextModel.load(args.checkpoint)
        queries, preds = _run_inference(model, args.manifest, args.split, args.demos, args.double,
                                        args.threshold, cfg["train"].seed, out)
        pairs = [(q, preds[q.sample_id].removal, preds[q.sample_id].mask) for q, _ in queries]
    else:
        queries = [(t, r) for t, r in read_manifest(args.manifest)
                   if args.split is None or r.get("split") == args.split]
        pairs = [(q, *_load_predictions(args.predictions, q.sample_id)) for q, _ in queries]
    if not pairs:
        raise ContractError("no queries to evaluate")
    reports = [evaluate_pair(rem, q.removal if rem is not None else None,
                             mask, q.seg[0] if mask is not None else None) for q, rem, mask in pairs]
    fid = None
    rems = [(rem, q.removal) for q, rem, _ in pairs if rem is not None]
    if len(rems) >= 2:
        h, w = rems[0][1].shape[1:]
        if h % 8 == 0 and w % 8 == 0:
            emb = ToyEmbedder()
            fid = frechet_distance(GaussianStats.from_features(emb(np.stack([r for r, _ in rems]))),
                                   GaussianStats.from_features(emb(np.stack([g for _, g in rems]))))
    summary = aggregate(reports, frechet=fid)
    name = Path(args.manifest).parent.name or "dataset"
    (out / "report.json").write_text(json.dumps({name: summary.to_dict()}, indent=1, sort_keys=True) + "\n")
    table = format_table({name: summary})
    (out / "table.txt").write_text(table + "\n")
    print(table)


def cmd_bench(args, cfg):
    mc = cfg["model"] if args.config or args.set or args.fusion or args.mode else TOY_CONFIG
    model = ContextModel(mc)
    rng = derive_rng(mc.seed, "bench")
    h, w = mc.panel_h, mc.panel_w
    demo = SampleTriple(rng.random((3, h, w)), rng.random((3, h, w)), np.zeros((3, h, w)))
    grid = query_grid(demo, rng.random((3, h, w)).astype(np.float32), mc.mode)
    plan = inference_plan(mc.lattice, mc.patch, mc.label_kinds)
    times = []
    with T.no_grad():
        for _ in range(args.repeats + 1):
            t0 = time.perf_counter()
            model.forward([grid], [plan], pixel_head=False)
            times.append(time.perf_counter() - t0)
    on, off = flop_estimate(mc, True), flop_estimate(mc, False)
    result = {"params": model.num_parameters(), "params_with_pixel_head": model.num_parameters(True),
              "forward_ms": 1000 * float(np.median(times[1:])),
              "flops_caa_on": on, "flops_caa_off": off, "caa_delta_pct": 100 * (on - off) / off,
              "flop_breakdown": flop_breakdown(mc), "config": mc.to_dict()}
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.json").write_text(text + "\n")
    print(text)


COMMANDS = {"gen-data": cmd_gen_data, "gen-prompttext": cmd_gen_prompttext, "train": cmd_train,
            "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench}


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="context-forge", description="In-context text removal and segmentation.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON file of flat dotted keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=None, help="root seed for every random stream")
        p.add_argument("--out", required=out_required, default=None, help="output directory")

    def model_flags(p):
        p.add_argument("--mode", choices=["baseline_seg", "baseline_rem", "chained"], default=None,
                       help="grid layout")
        p.add_argument("--fusion", choices=["none", "linear_only", "caa"], default=None, help="fusion")

    def infer_flags(p):
        p.add_argument("--checkpoint", default=None, help="trained .ctckpt model")
        p.add_argument("--manifest", default=None, help="dataset manifest.jsonl")
        p.add_argument("--split", default=None, help="restrict queries to one split")
        p.add_argument("--demos", type=int, default=1, help="demonstrations per query (k)")
        p.add_argument("--double", action="store_true", help="double inference")
        p.add_argument("--threshold", type=float, default=0.5, help="segmentation threshold")

    p = sub.add_parser("gen-data", help="generate a synthetic triple dataset", formatter_class=fmt)
    common(p)
    p.add_argument("--count", type=int, default=100, help="number of samples")
    p = sub.add_parser("gen-prompttext", help="generate the marker-prompted evaluation set",
                       formatter_class=fmt)
    common(p)
    p.add_argument("--count", type=int, default=None, help="number of source images (default 429)")
    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    common(p)
    model_flags(p)
    p.add_argument("--manifest", default=None, help="training manifest.jsonl")
    p.add_argument("--ratio", type=float, default=None, help="masking ratio")
    p.add_argument("--self-prompt-p", dest="self_prompt_p", type=float, default=None,
                   help="self-prompting probability")
    p.add_argument("--epochs", type=int, default=None, help="training epochs")
    p.add_argument("--lr", type=float, default=None, help="base learning rate")
    p = sub.add_parser("eval", help="score predictions or a checkpoint", formatter_class=fmt)
    common(p)
    infer_flags(p)
    p.add_argument("--predictions", default=None, help="directory of <id>_removal.png / <id>_seg.png")
    p = sub.add_parser("infer", help="run in-context inference", formatter_class=fmt)
    common(p)
    infer_flags(p)
    p = sub.add_parser("bench", help="latency, parameter count and FLOP estimate", formatter_class=fmt)
    common(p, out_required=False)
    model_flags(p)
    p.add_argument("--repeats", type=int, default=3, help="timed forward passes")
    return parser


def _apply_thread_cap():
    value = os.environ.get("CONTEXT_FORGE_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError as exc:
        raise ContractError(f"CONTEXT_FORGE_THREADS must be an integer, got {value!r}") from exc
    if n < 1:
        raise ContractError("CONTEXT_FORGE_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        limiter = _apply_thread_cap()
        try:
            COMMANDS[args.command](args, _configs(args))
        finally:
            if limiter is not None:
                limiter.unregister()
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, GenerationError, ModelError, OSError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
