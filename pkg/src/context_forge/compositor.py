"""Composite prompt grids, patch mask plans and demonstration selection.

A chained grid stacks a demonstration row over a query row, each row being
``[input | removal | segmentation]``; the baseline layouts keep only one
label panel per row.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .imaging import save_png

LAYOUTS = {
    "chained": ("I", "O", "Y"),
    "baseline_seg": ("I", "Y"),
    "baseline_rem": ("I", "O"),
}
LABEL_PANELS = {mode: panels[1:] for mode, panels in LAYOUTS.items()}


@dataclass
class SampleTriple:
    """Input scene, text-free background and stroke mask, each ``[3, h, w]``."""

    input: np.ndarray
    removal: np.ndarray
    seg: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float32)
        self.removal = np.asarray(self.removal, dtype=np.float32)
        self.seg = np.asarray(self.seg, dtype=np.float32)
        shape = self.input.shape
        if len(shape) != 3 or shape[0] != 3:
            raise ShapeError(f"panels must be [3, h, w], got {shape}")
        if self.removal.shape != shape or self.seg.shape != shape:
            raise ShapeError("input, removal and seg panels must share one shape")
        if not (np.all(self.seg[0] == self.seg[1]) and np.all(self.seg[0] == self.seg[2])):
            raise ContractError("segmentation channels must be identical")
        if not np.all((self.seg == 0) | (self.seg == 1)):
            raise ContractError("segmentation values must be 0 or 1")

    @property
    def hw(self):
        return self.input.shape[1:]

    def panel(self, kind):
        return {"I": self.input, "O": self.removal, "Y": self.seg}[kind]


@dataclass
class CompositeGrid:
    pixels: np.ndarray
    layout: str

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ContractError(f"unknown layout {self.layout!r}")
        p = self.pixels
        ncol = len(LAYOUTS[self.layout])
        if p.ndim != 3 or p.shape[0] != 3 or p.shape[1] % 2 or p.shape[2] % ncol:
            raise ShapeError(f"grid of shape {p.shape} does not fit layout {self.layout}")

    @property
    def panel_hw(self):
        return self.pixels.shape[1] // 2, self.pixels.shape[2] // len(LAYOUTS[self.layout])

    def panel(self, kind, row):
        panels = LAYOUTS[self.layout]
        if kind not in panels:
            raise ContractError(f"layout {self.layout} has no {kind} panel")
        if row not in (0, 1):
            raise ContractError(f"row must be 0 or 1, got {row}")
        h, w = self.panel_hw
        c = panels.index(kind)
        return self.pixels[:, row * h:(row + 1) * h, c * w:(c + 1) * w]


def compose_grid(demo, query, mode="chained"):
    if mode not in LAYOUTS:
        raise ContractError(f"unknown mode {mode!r}")
    if demo.input.shape != query.input.shape:
        raise ShapeError(f"demo panels {demo.input.shape} != query panels {query.input.shape}")
    kinds = LAYOUTS[mode]
    rows = [np.concatenate([t.panel(k) for k in kinds], axis=2) for t in (demo, query)]
    return CompositeGrid(np.concatenate(rows, axis=1).astype(np.float32), mode)


def decompose_grid(grid):
    """Panels keyed by ``(kind, row)``; row 0 is the demonstration."""
    return {(kind, row): grid.panel(kind, row).copy()
            for row in (0, 1) for kind in LAYOUTS[grid.layout]}


def save_grid_png(path, grid):
    save_png(path, grid.pixels)


# ----------------------------------------------------------------- mask plans

@dataclass
class MaskPlan:
    """One boolean patch pattern per grid row, shared by every masked label column.

    ``pattern[row, i, j]`` is true where the label patch ``(i, j)`` of that
    row is replaced by the mask token.  Storing a single pattern per row is
    what keeps removal and segmentation masks spatially identical.
    """

    patch_size: int
    pattern: np.ndarray
    ratio: float
    columns: tuple = ("O", "Y")
    phase: str = "train"

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=bool)
        if self.pattern.ndim != 3 or self.pattern.shape[0] != 2:
            raise ShapeError(f"mask pattern must be [2, gh, gw], got {self.pattern.shape}")
        self.columns = tuple(self.columns)

    @property
    def lattice(self):
        return self.pattern.shape[1:]

    def column_mask(self, kind):
        if kind in self.columns:
            return self.pattern
        return np.zeros_like(self.pattern)

    def pixel_mask(self, kind):
        """``[2, h, w]`` float mask of masked pixels for a label column."""
        p = self.patch_size
        m = self.column_mask(kind)
        return np.repeat(np.repeat(m, p, axis=1), p, axis=2).astype(np.float32)

    def realized_ratio(self):
        return float(self.pattern.mean())

    def to_json(self):
        gh, gw = self.lattice
        flat = np.stack([self.column_mask(k) for k in ("O", "Y")]).reshape(-1)
        return json.dumps({"patch_size": self.patch_size, "lattice": [gh, gw],
                           "ratio": self.ratio, "phase": self.phase,
                           "columns": list(self.columns),
                           "mask": [bool(v) for v in flat]})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        gh, gw = d["lattice"]
        flat = np.asarray(d["mask"], dtype=bool).reshape(2, 2, gh, gw)
        columns = tuple(d["columns"])
        pattern = flat[0] if "O" in columns else flat[1]
        for idx, kind in enumerate(("O", "Y")):
            expect = pattern if kind in columns else np.zeros_like(pattern)
            if not np.array_equal(flat[idx], expect):
                raise ContractError("serialized mask violates the shared removal/segmentation pattern")
        return cls(d["patch_size"], pattern, d["ratio"], columns, d["phase"])


def masked_count(ratio, n):
    # Python's round() is round-half-to-even
    return int(round(ratio * n))


def sample_mask_plan(rng, ratio, panel_patch_grid, phase="train", patch_size=8,
                     columns=("O", "Y")):
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"masking ratio must lie in [0, 1], got {ratio}")
    if phase not in ("train", "infer"):
        raise ContractError(f"phase must be 'train' or 'infer', got {phase!r}")
    gh, gw = panel_patch_grid
    n = gh * gw
    pattern = np.zeros((2, n), dtype=bool)
    if phase == "train":
        k = masked_count(ratio, n)
        for row in range(2):
            pattern[row, rng.choice(n, size=k, replace=False)] = True
    else:
        pattern[1] = True
    return MaskPlan(patch_size, pattern.reshape(2, gh, gw), float(ratio), tuple(columns), phase)


def inference_plan(panel_patch_grid, patch_size, columns=("O", "Y")):
    return sample_mask_plan(None, 1.0, panel_patch_grid, "infer", patch_size, columns)


# ------------------------------------------------------- demonstration choice

@dataclass
class DemonstrationPolicy:
    strategy: str = "self_prompt_mixture"
    self_prompt_probability: float = 0.2
    rng_seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.strategy not in ("random_pool", "self_prompt_mixture"):
            raise ContractError(f"unknown demonstration strategy {self.strategy!r}")
        if not 0.0 <= self.self_prompt_probability <= 1.0:
            raise ContractError("self-prompt probability must lie in [0, 1]")
        if self._rng is None:
            self._rng = np.random.default_rng(self.rng_seed)

    @property
    def rng(self):
        return self._rng


def select_demonstration(policy, pool, query, rng=None):
    """The query itself with the self-prompt probability, else a random other pool item."""
    if not pool:
        raise ContractError("demonstration pool is empty")
    rng = policy.rng if rng is None else rng
    p = policy.self_prompt_probability if policy.strategy == "self_prompt_mixture" else 0.0
    # always draw both numbers so the stream advances identically for every p
    u = rng.random()
    qid = query.sample_id
    candidates = [t for t in pool if t is not query and not (qid and t.sample_id == qid)]
    pick = rng.integers(len(candidates)) if candidates else None
    if u < p:
        return query
    if pick is None:
        raise ContractError("pool holds no demonstration other than the query")
    return candidates[pick]
