"""Desk-scale experiment recipes shared by the scripts and the acceptance suite."""

import time
from dataclasses import dataclass, replace

import numpy as np

from .inference import InferenceRequest, infer, infer_ensemble
from .metrics import fgiou_fscore, psnr
from .model import DESK_CONFIG, ContextModel
from .rng import derive_rng
from .synthdata import SceneSpec, default_split, generate_dataset
from .training import TrainConfig, Trainer, random_demo


@dataclass
class DeskRun:
    samples: int = 2000
    epochs: int = 20
    lr: float = 5e-4
    fusion: str = "caa"
    self_prompt_p: float = 0.2
    infer_mask_p: float = 0.5
    seed: int = 0
    data_seed: int = 0
    val_limit: int = None


def desk_scene(model_config=DESK_CONFIG):
    # a 32x32 panel holds at most two short words at glyph scale 2
    return SceneSpec(height=model_config.panel_h, width=model_config.panel_w,
                     word_count=(1, 2), word_length=(1, 3))


def split_dataset(triples):
    train = [t for i, t in enumerate(triples) if default_split(i) == "train"]
    val = [t for i, t in enumerate(triples) if default_split(i) == "val"]
    return train, val


def desk_data(samples, seed=0, model_config=DESK_CONFIG):
    return split_dataset(generate_dataset(desk_scene(model_config), samples, seed))


def train_desk(run, model_config=DESK_CONFIG, on_epoch=None, data=None):
    """Train one desk-scale model; returns ``(model, log, train_pool, val_pool, seconds)``."""
    train_pool, val_pool = data if data is not None else desk_data(run.samples, run.data_seed, model_config)
    cfg = replace(model_config, fusion=run.fusion, seed=run.seed)
    model = ContextModel(cfg)
    tc = TrainConfig(epochs=run.epochs, lr=run.lr, self_prompt_p=run.self_prompt_p,
                     infer_mask_p=run.infer_mask_p, seed=run.seed, val_limit=run.val_limit)
    t0 = time.perf_counter()
    trainer = Trainer(model, tc, train_pool, val_pool)
    log = trainer.fit(on_epoch)
    return model, log, train_pool, val_pool, time.perf_counter() - t0


def demo_gap(model, queries, pool, seed=0):
    """Mean fgIoU and PSNR with the query's own triple as demonstration versus a random one."""
    rng = derive_rng(seed, "gap")
    out = {"gt_fgiou": [], "rand_fgiou": [], "gt_psnr": [], "rand_psnr": []}
    for q in queries:
        for tag, demo in (("gt", q), ("rand", random_demo(pool, q, rng))):
            res = infer(InferenceRequest(q.input, [demo]), model)
            out[f"{tag}_fgiou"].append(fgiou_fscore(res.mask, q.seg[0])[0])
            out[f"{tag}_psnr"].append(psnr(res.removal, q.removal))
    means = {k: float(np.mean(v)) for k, v in out.items()}
    means["fgiou_gap"] = means["gt_fgiou"] - means["rand_fgiou"]
    means["psnr_gap"] = means["gt_psnr"] - means["rand_psnr"]
    return means


def ensemble_comparison(model, queries, pool, k=5, seed=0):
    """Mean fgIoU with one random demonstration versus a ``k``-demonstration feature ensemble.

    The single demonstration is the first of the ``k`` drawn for each query.
    """
    rng = derive_rng(seed, "ensemble")
    one, many = [], []
    for q in queries:
        demos = []
        while len(demos) < k:
            d = random_demo(pool, q, rng)
            if all(d is not e for e in demos):
                demos.append(d)
        r1 = infer(InferenceRequest(q.input, demos[:1]), model)
        rk = infer_ensemble(InferenceRequest(q.input, demos), model)
        one.append(fgiou_fscore(r1.mask, q.seg[0])[0])
        many.append(fgiou_fscore(rk.mask, q.seg[0])[0])
    return float(np.mean(one)), float(np.mean(many))


# reduced per-run budget for the paired ablations (six runs per comparison)
ABLATION_RUN = DeskRun(samples=2000, epochs=6, val_limit=100)


def ablation_cell(fusion, self_prompt_p, seed, base=ABLATION_RUN, queries=100, data=None):
    """Train one ablation arm and score it on validation queries with random and GT demonstrations."""
    run = replace(base, fusion=fusion, self_prompt_p=self_prompt_p, seed=seed)
    model, log, train_pool, val_pool, seconds = train_desk(run, data=data)
    gap = demo_gap(model, val_pool[:queries], train_pool, seed)
    return {"fusion": fusion, "self_prompt_p": self_prompt_p, "seed": seed, "seconds": seconds,
            "fgiou": gap["rand_fgiou"], "psnr": gap["rand_psnr"], **gap}
