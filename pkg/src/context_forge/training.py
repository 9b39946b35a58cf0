"""Masked-label training: losses, gradient accumulation, self-prompting and validation."""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .compositor import (DemonstrationPolicy, compose_grid, inference_plan, sample_mask_plan,
                         select_demonstration)
from .errors import ContractError, NonFiniteError, TrainingDiverged
from .inference import InferenceRequest, infer
from .metrics import fgiou_fscore, psnr
from .optim import AdamWState, CosineSchedule, adamw_step, lr_at
from .rng import derive_rng


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    accum_steps: int = 2
    mask_ratio: float = 0.85
    self_prompt_p: float = 0.2
    infer_mask_p: float = 0.5   # chance a composite uses the inference plan (query labels fully masked)
    w_rem: float = 0.3
    w_seg: float = 1.0
    w_pix: float = 1.0
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.05
    seed: int = 0
    manifest: str = None
    checkpoint_every: int = 0   # epochs between checkpoints; 0 disables
    checkpoint_dir: str = None
    val_limit: int = None       # cap on validation queries per epoch
    log_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ContractError("mask_ratio must lie in [0, 1]")
        if not 0.0 <= self.self_prompt_p <= 1.0:
            raise ContractError("self_prompt_p must lie in [0, 1]")
        if not 0.0 <= self.infer_mask_p <= 1.0:
            raise ContractError("infer_mask_p must lie in [0, 1]")
        if min(self.w_rem, self.w_seg, self.w_pix) < 0:
            raise ContractError("loss weights must be >= 0")
        if self.accum_steps < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("need accum_steps >= 1, batch_size >= 1 and epochs >= 0")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ContractError("warmup_frac must lie in [0, 1]")

    @property
    def samples_per_step(self):
        return self.batch_size * self.accum_steps


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def append(self, entry):
        if self.steps and entry["step"] <= self.steps[-1]["step"]:
            raise ContractError("training log steps must be strictly increasing")
        self.steps.append(entry)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for e in self.steps:
                fh.write(json.dumps({"kind": "step", **e}, sort_keys=True) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **e}, sort_keys=True) + "\n")


# -------------------------------------------------------------------- losses

@dataclass
class MicroBatch:
    grids: list
    plans: list
    target_rem: np.ndarray   # [B, 2, 3, h, w]
    target_seg: np.ndarray   # [B, 2, 3, h, w]
    loss_mask: np.ndarray    # [B, 2, 3, h, w] masked label pixels
    self_prompted: list


def total_loss(pred_rem, pred_seg, seg_logits, batch, weights):
    """Weighted masked smooth-L1 on both label panels plus pixel cross-entropy.

    Returns ``(loss tensor, {component: float})``; absent heads contribute nothing.
    """
    w_rem, w_seg, w_pix = weights
    terms, parts = [], {}
    if pred_rem is not None:
        l = T.smooth_l1(pred_rem, batch.target_rem, batch.loss_mask)
        parts["rem"] = l.item()
        terms.append(T.scale(l, w_rem))
    if pred_seg is not None:
        l = T.smooth_l1(pred_seg, batch.target_seg, batch.loss_mask)
        parts["seg"] = l.item()
        terms.append(T.scale(l, w_seg))
    if seg_logits is not None:
        labels = (batch.target_seg[:, :, 0] > 0.5).astype(np.int64)
        l = T.pixel_cross_entropy(seg_logits, labels)
        parts["pix"] = l.item()
        terms.append(T.scale(l, w_pix))
    if not terms:
        raise ContractError("no loss terms: model produced no predictions")
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    return loss, parts


def prepare_micro_batch(queries, pool, policy, mask_rng, ratio, model_config, infer_mask_p=0.0):
    cfg = model_config
    grids, plans, rem, seg, masks, flags = [], [], [], [], [], []
    for q in queries:
        demo = select_demonstration(policy, pool, q)
        flags.append(demo is q)
        grid = compose_grid(demo, q, cfg.mode)
        if infer_mask_p > 0 and mask_rng.random() < infer_mask_p:
            plan = inference_plan(cfg.lattice, cfg.patch, cfg.label_kinds)
        else:
            plan = sample_mask_plan(mask_rng, ratio, cfg.lattice, "train", cfg.patch, cfg.label_kinds)
        grids.append(grid)
        plans.append(plan)
        rem.append(np.stack([demo.removal, q.removal]))
        seg.append(np.stack([demo.seg, q.seg]))
        # the removal and segmentation columns share one pattern
        pm = plan.pixel_mask(cfg.label_kinds[0])
        masks.append(np.repeat(pm[:, None], 3, axis=1))
    return MicroBatch(grids, plans, np.stack(rem), np.stack(seg), np.stack(masks), flags)


def active_tasks(weights):
    """Label panels that need decoding for the given ``(w_rem, w_seg, w_pix)``."""
    tasks = []
    if weights[0] > 0:
        tasks.append("O")
    if weights[1] > 0 or weights[2] > 0:
        tasks.append("Y")
    return tuple(tasks)


def micro_batch_loss(model, batch, weights):
    # heads with zero weight are skipped entirely rather than multiplied by 0
    out = model.forward(batch.grids, batch.plans, pixel_head=weights[2] > 0,
                        tasks=active_tasks(weights))
    return total_loss(out.removal, out.seg, out.seg_logits, batch, weights)


def accumulate_gradients(model, micro_batches, weights):
    """Average gradients of the per-micro-batch losses; returns ``(grads, mean loss, parts)``."""
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    n = len(micro_batches)
    total, parts = 0.0, {}
    for mb in micro_batches:
        loss, comp = micro_batch_loss(model, mb, weights)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError("loss is not finite")
        T.backward(T.scale(loss, 1.0 / n))
        total += value / n
        for k, v in comp.items():
            parts[k] = parts.get(k, 0.0) + v / n
    grads = {k: p.grad for k, p in params.items()}
    return grads, total, parts


def decay_mask(model):
    # biases, norms, embeddings-as-vectors and fusion scalars are not decayed
    return {k: p.ndim >= 2 for k, p in model.parameters().items()}


class Trainer:
    """Owns the optimizer, schedule, sampling streams and log for one training run."""

    def __init__(self, model, config, train_pool, val_pool=None, steps_per_epoch=None):
        self.model = model
        self.config = config
        self.pool = list(train_pool)
        self.val_pool = list(val_pool or [])
        if not self.pool:
            raise ContractError("training pool is empty")
        c = config
        self.steps_per_epoch = steps_per_epoch or max(1, len(self.pool) // c.samples_per_step)
        total = max(1, c.epochs * self.steps_per_epoch)
        self.schedule = CosineSchedule(c.lr, c.min_lr, int(round(c.warmup_frac * total)), total)
        self.opt = AdamWState(c.beta1, c.beta2, c.eps, c.weight_decay)
        self.policy = DemonstrationPolicy("self_prompt_mixture", c.self_prompt_p,
                                          _rng=derive_rng(c.seed, "demo"))
        self.mask_rng = derive_rng(c.seed, "mask")
        self.order_rng = derive_rng(c.seed, "order")
        self.decay = decay_mask(model)
        self.weights = (c.w_rem, c.w_seg, c.w_pix)
        self.log = TrainLog()
        self.step = 0
        self._last_good = model.state_dict()

    def train_step(self, queries):
        """One optimizer step over ``accum_steps`` micro-batches drawn from ``queries``."""
        c = self.config
        if len(queries) != c.samples_per_step:
            raise ContractError(f"expected {c.samples_per_step} queries, got {len(queries)}")
        micro = [prepare_micro_batch(queries[i * c.batch_size:(i + 1) * c.batch_size], self.pool,
                                     self.policy, self.mask_rng, c.mask_ratio, self.model.config,
                                     c.infer_mask_p)
                 for i in range(c.accum_steps)]
        try:
            grads, loss, parts = accumulate_gradients(self.model, micro, self.weights)
        except NonFiniteError as exc:
            raise self._diverged(str(exc)) from exc
        lr = lr_at(self.schedule, min(self.step, self.schedule.total_steps))
        params = {k: p.data for k, p in self.model.parameters().items()}
        adamw_step(params, grads, self.opt, lr, self.decay)
        if not all(np.isfinite(p).all() for p in params.values()):
            raise self._diverged("parameters became non-finite")
        self._last_good = self.model.state_dict()
        ratio = float(np.mean([p.realized_ratio() for mb in micro for p in mb.plans]))
        entry = {"step": self.step, "lr": lr, "loss": loss, "mask_ratio": ratio,
                 "self_prompted": int(sum(sum(mb.self_prompted) for mb in micro)),
                 **{f"loss_{k}": v for k, v in parts.items()}}
        self.log.append(entry)
        self.step += 1
        return entry

    def _diverged(self, reason):
        path = None
        if self.config.checkpoint_dir:
            self.model.load_state_dict(self._last_good)
            path = str(Path(self.config.checkpoint_dir) / "last_good.ctckpt")
            self.model.save(path, {"step": self.step, "reason": reason})
        return TrainingDiverged(f"training diverged at step {self.step}: {reason}", self.step, path)

    def run_epoch(self, epoch):
        c = self.config
        order = self.order_rng.permutation(len(self.pool))
        n = self.steps_per_epoch * c.samples_per_step
        if n > len(order):
            order = np.resize(order, n)
        for s in range(self.steps_per_epoch):
            idx = order[s * c.samples_per_step:(s + 1) * c.samples_per_step]
            self.train_step([self.pool[i] for i in idx])

    def fit(self, on_epoch=None):
        c = self.config
        for epoch in range(c.epochs):
            t0 = time.perf_counter()
            self.run_epoch(epoch)
            record = {"epoch": epoch, "step": self.step, "seconds": time.perf_counter() - t0}
            if self.val_pool:
                record.update(validate(self.model, self.val_pool, self.pool, c.seed, c.val_limit))
            # wall time goes to the callback only so the log stays reproducible
            self.log.epochs.append({k: v for k, v in record.items() if k != "seconds"})
            if c.checkpoint_every and c.checkpoint_dir and (epoch + 1) % c.checkpoint_every == 0:
                self.model.save(Path(c.checkpoint_dir) / f"epoch{epoch + 1:03d}.ctckpt",
                                {"epoch": epoch + 1, "step": self.step})
            if on_epoch is not None:
                on_epoch(record)
        return self.log


def train(model, config, train_pool, val_pool=None, on_epoch=None):
    return Trainer(model, config, train_pool, val_pool).fit(on_epoch)


def random_demo(pool, query, rng):
    """A uniformly random pool triple other than the query."""
    candidates = [t for t in pool if t is not query and not (query.sample_id and t.sample_id == query.sample_id)]
    if not candidates:
        raise ContractError("no demonstration other than the query")
    return candidates[int(rng.integers(len(candidates)))]


def validate(model, queries, demo_pool, seed=0, limit=None, self_demo=False):
    """Mean removal PSNR and fgIoU on ``queries`` with random-pool (or self) demonstrations."""
    rng = derive_rng(seed, "val")
    queries = queries[:limit] if limit else queries
    ps, ious = [], []
    for q in queries:
        demo = q if self_demo else random_demo(demo_pool, q, rng)
        res = infer(InferenceRequest(q.input, [demo]), model)
        if res.removal is not None:
            ps.append(psnr(res.removal, q.removal))
        if res.mask is not None:
            ious.append(fgiou_fscore(res.mask, q.seg[0])[0])
    out = {"n": len(queries)}
    if ps:
        out["psnr"] = float(np.mean(ps))
    if ious:
        out["fgiou"] = float(np.mean(ious))
    return out


# --------------------------------------------------------------- overfit probe

def probe_psnr(model, sample):
    res = infer(InferenceRequest(sample.input, [sample]), model)
    return psnr(res.removal, sample.removal)


def overfit_probe(sample, model, steps, config=None, eval_every=50, stop_above=None):
    """Fit one self-prompted composite; return ``(final PSNR, history)``.

    PSNR is measured on the query removal panel under the full inference mask.
    With ``stop_above`` set, training stops at the first evaluation exceeding it.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    # removal-only loss by default: the probe scores removal, and the seg terms compete for the shared decoder
    c = config or TrainConfig(lr=3e-4, weight_decay=0.0, warmup_frac=0.0, mask_ratio=0.85,
                              w_rem=1.0, w_seg=0.0, w_pix=0.0)
    cfg = model.config
    schedule = CosineSchedule(c.lr, c.lr, 0, max(steps, 1))
    opt = AdamWState(c.beta1, c.beta2, c.eps, c.weight_decay)
    mask_rng = derive_rng(c.seed, "probe-mask")
    grid = compose_grid(sample, sample, cfg.mode)
    decay = decay_mask(model)
    weights = (c.w_rem, c.w_seg, c.w_pix)
    history = []
    target = np.stack([sample.removal, sample.removal])[None]
    seg = np.stack([sample.seg, sample.seg])[None]
    for step in range(steps):
        if c.infer_mask_p > 0 and mask_rng.random() < c.infer_mask_p:
            plan = inference_plan(cfg.lattice, cfg.patch, cfg.label_kinds)
        else:
            plan = sample_mask_plan(mask_rng, c.mask_ratio, cfg.lattice, "train", cfg.patch, cfg.label_kinds)
        pm = plan.pixel_mask(cfg.label_kinds[0])
        mb = MicroBatch([grid], [plan], target, seg, np.repeat(pm[:, None], 3, axis=1)[None], [True])
        grads, loss, _ = accumulate_gradients(model, [mb], weights)
        adamw_step({k: p.data for k, p in model.parameters().items()}, grads, opt,
                   lr_at(schedule, step), decay)
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            value = probe_psnr(model, sample)
            history.append({"step": step + 1, "loss": loss, "psnr": value})
            if stop_above is not None and value > stop_above:
                break
    final = history[-1]["psnr"] if history else probe_psnr(model, sample)
    return final, history


def config_dict(config):
    return asdict(config)
