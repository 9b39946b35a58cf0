"""Query-side inference: single demonstration, feature ensembles and double inference."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .compositor import LAYOUTS, CompositeGrid, SampleTriple, inference_plan
from .errors import ContractError, ShapeError

PLACEHOLDER = 0.5


@dataclass
class InferenceRequest:
    query: np.ndarray
    demos: list
    ensemble_layers: tuple = None  # post-fusion blocks to average after; None means all
    double_inference: bool = False
    seg_threshold: float = 0.5

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float32)
        if isinstance(self.demos, SampleTriple):
            self.demos = [self.demos]
        self.demos = list(self.demos)
        if not self.demos:
            raise ContractError("inference needs at least one demonstration")
        if not 0.0 < self.seg_threshold < 1.0:
            raise ContractError(f"seg_threshold must lie in (0, 1), got {self.seg_threshold}")
        for d in self.demos:
            if d.input.shape != self.query.shape:
                raise ShapeError(f"demonstration panels {d.input.shape} != query {self.query.shape}")


@dataclass
class InferenceResult:
    removal: np.ndarray = None      # [3, h, w] in [0, 1]
    mask: np.ndarray = None         # [h, w] uint8 in {0, 1}
    probability: np.ndarray = None  # [h, w] in [0, 1]
    extras: dict = field(default_factory=dict)


def query_grid(demo, query, mode="chained", placeholder=PLACEHOLDER):
    """Grid with ``demo`` on top and the query input beside constant label placeholders."""
    kinds = LAYOUTS[mode]
    fill = np.full_like(query, placeholder, dtype=np.float32)
    top = np.concatenate([demo.panel(k) for k in kinds], axis=2)
    bottom = np.concatenate([query] + [fill] * (len(kinds) - 1), axis=2)
    return CompositeGrid(np.concatenate([top, bottom], axis=1).astype(np.float32), mode)


def _result_from(out, threshold):
    res = InferenceResult()
    if out.removal is not None:
        res.removal = np.clip(out.removal.data[0, 0], 0.0, 1.0)
    if out.seg is not None:
        prob = out.seg.data[0, 0].astype(np.float64).mean(axis=0)
        res.probability = prob
        res.mask = (prob >= threshold).astype(np.uint8)
    return res


def _plan(model):
    cfg = model.config
    return inference_plan(cfg.lattice, cfg.patch, cfg.label_kinds)


def infer(request, model, placeholder=PLACEHOLDER):
    """Predict the query labels from the first demonstration."""
    model.check_weights()
    grid = query_grid(request.demos[0], request.query, model.config.mode, placeholder)
    with T.no_grad():
        out = model.forward([grid], [_plan(model)], pixel_head=False, rows=(1,))
    return _result_from(out, request.seg_threshold)


def infer_ensemble(request, model, placeholder=PLACEHOLDER):
    """Average the query-position features of one grid per demonstration after each post-fusion block."""
    k = len(request.demos)
    if k == 0:
        raise ContractError("ensemble needs k >= 1 demonstrations")
    model.check_weights()
    mode = model.config.mode
    plan = _plan(model)
    layers = range(len(model.post_blocks)) if request.ensemble_layers is None else request.ensemble_layers
    layers = set(layers)
    q = model.query_slice()
    with T.no_grad():
        feats = [model.encode([query_grid(d, request.query, mode, placeholder)], [plan]).data
                 for d in request.demos]
        for i in range(len(model.post_blocks)):
            feats = [model.post_block(i, T.Tensor(x)).data for x in feats]
            if i in layers:
                mean = np.mean(np.stack([x[:, q] for x in feats]).astype(np.float64), axis=0)
                for x in feats:
                    x[:, q] = mean.astype(x.dtype)
        x = model.finish_encoder(T.Tensor(feats[0]))
        out = model.decode(x, rows=(1,), pixel_head=False)
    return _result_from(out, request.seg_threshold)


def as_demonstration(query, result, sample_id=""):
    """Turn a prediction into a demonstration triple for a second pass."""
    h, w = query.shape[1:]
    removal = result.removal if result.removal is not None else np.zeros_like(query)
    mask = result.mask if result.mask is not None else np.zeros((h, w), dtype=np.uint8)
    seg = np.repeat(mask[None].astype(np.float32), 3, axis=0)
    return SampleTriple(query, removal, seg, sample_id)


def infer_double(request, model):
    """Re-run inference with the first pass's prediction as the demonstration."""
    first = predict_once(request, model)
    demo = as_demonstration(request.query, first)
    second = InferenceRequest(request.query, [demo], request.ensemble_layers,
                              False, request.seg_threshold)
    res = infer(second, model)
    res.extras["first_pass"] = first
    return res


def predict_once(request, model):
    if len(request.demos) > 1:
        return infer_ensemble(request, model)
    return infer(request, model)


def predict(request, model):
    """Dispatch on the request flags: ensemble for several demonstrations, optional second pass."""
    if request.double_inference:
        return infer_double(request, model)
    return predict_once(request, model)
