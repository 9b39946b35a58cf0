"""Synthetic text scenes with exact ground truth, and the PromptText marker benchmark.

All pixel values are multiples of 1/255 so that datasets survive an 8-bit
PNG round trip bit-exactly.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .compositor import SampleTriple
from .errors import ContractError, GenerationError, ShapeError
from .font import ALPHABET, render_word, word_skeleton
from .imaging import gray, load_png, save_png
from .rng import derive_rng

BACKGROUNDS = ("solid", "gradient", "noise")
MARKER_KINDS = ("stroke", "box", "circle")
MARKER_COLORS = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255)}
MAX_RETRIES = 100


def _q(ints):
    """uint8-valued array to float32 in [0, 1], matching what load_png returns."""
    return np.asarray(ints, dtype=np.float32) / np.float32(255.0)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    backgrounds: tuple = BACKGROUNDS
    word_count: tuple = (1, 3)
    word_length: tuple = (1, 4)
    glyph_scale: tuple = (1, 2)
    noise_amplitude: int = 6  # in 1/255 units
    min_contrast: int = 40  # in 1/255 units, grayscale
    seed: int = 0

    def __post_init__(self):
        self.backgrounds = tuple(self.backgrounds)
        for kind in self.backgrounds:
            if kind not in BACKGROUNDS:
                raise ContractError(f"unknown background kind {kind!r}")
        for name in ("word_count", "word_length", "glyph_scale"):
            lo, hi = getattr(self, name)
            if lo > hi or (lo < 1 and name != "word_count") or lo < 0:
                raise ContractError(f"invalid {name} range ({lo}, {hi})")
            setattr(self, name, (int(lo), int(hi)))


@dataclass
class TextInstance:
    text: str
    top: int
    left: int
    scale: int
    color: tuple
    coverage: np.ndarray = field(repr=False)  # full-panel boolean glyph mask

    @property
    def bbox(self):
        rows = np.nonzero(self.coverage.any(axis=1))[0]
        cols = np.nonzero(self.coverage.any(axis=0))[0]
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def make_background(kind, h, w, rng, noise_amplitude=6):
    """Integer-valued ``[3, h, w]`` background in 0..255."""
    if kind == "solid":
        color = rng.integers(0, 256, size=3)
        return np.broadcast_to(color[:, None, None], (3, h, w)).astype(np.int64)
    if kind == "gradient":
        a = rng.integers(0, 256, size=3).astype(np.float64)
        b = np.clip(a + rng.integers(-80, 81, size=3), 0, 255)
        direction = rng.integers(3)
        yy, xx = np.mgrid[0:h, 0:w]
        t = [xx / max(w - 1, 1), yy / max(h - 1, 1), (xx + yy) / max(h + w - 2, 1)][direction]
        bg = a[:, None, None] + (b - a)[:, None, None] * t[None]
        return np.floor(bg + 0.5).astype(np.int64)
    if kind == "noise":
        base = rng.integers(noise_amplitude, 256 - noise_amplitude, size=3)
        noise = rng.integers(-noise_amplitude, noise_amplitude + 1, size=(3, h, w))
        return (base[:, None, None] + noise).astype(np.int64)
    raise ContractError(f"unknown background kind {kind!r}")


def _place_words(spec, bg, rng, n_words, h, w, gap=1):
    """Place ``n_words`` random words without overlap; returns TextInstances."""
    bg_gray = gray(bg / 255.0) * 255.0
    occupied = np.zeros((h, w), dtype=bool)
    placed = []
    for _ in range(n_words):
        for _attempt in range(MAX_RETRIES):
            length = int(rng.integers(spec.word_length[0], spec.word_length[1] + 1))
            scale = int(rng.integers(spec.glyph_scale[0], spec.glyph_scale[1] + 1))
            text = "".join(rng.choice(list(ALPHABET), size=length))
            cov = render_word(text, scale)
            gh, gw = cov.shape
            color = rng.integers(0, 256, size=3)
            if gh > h or gw > w:
                continue
            top = int(rng.integers(0, h - gh + 1))
            left = int(rng.integers(0, w - gw + 1))
            r0, r1 = max(top - gap, 0), min(top + gh + gap, h)
            c0, c1 = max(left - gap, 0), min(left + gw + gap, w)
            if occupied[r0:r1, c0:c1].any():
                continue
            local = bg_gray[top:top + gh, left:left + gw][cov]
            cgray = float(gray(color[:, None, None] / 255.0)[0, 0] * 255.0)
            if np.min(np.abs(local - cgray)) < spec.min_contrast:
                continue
            full = np.zeros((h, w), dtype=bool)
            full[top:top + gh, left:left + gw] = cov
            occupied[top:top + gh, left:left + gw] = True
            placed.append(TextInstance(text, top, left, scale, tuple(int(c) for c in color), full))
            break
        else:
            raise GenerationError(f"could not place word {len(placed) + 1} after {MAX_RETRIES} retries")
    return placed


def generate_scene(spec, rng, sample_id=""):
    """Return ``(SampleTriple, instances)``."""
    h, w = spec.height, spec.width
    kind = spec.backgrounds[int(rng.integers(len(spec.backgrounds)))]
    bg = make_background(kind, h, w, rng, spec.noise_amplitude)
    n_words = int(rng.integers(spec.word_count[0], spec.word_count[1] + 1))
    instances = _place_words(spec, bg, rng, n_words, h, w)
    img = bg.copy()
    cover = np.zeros((h, w), dtype=bool)
    for inst in instances:
        img[:, inst.coverage] = np.asarray(inst.color)[:, None]
        cover |= inst.coverage
    seg = np.broadcast_to(cover.astype(np.float32), (3, h, w))
    return SampleTriple(_q(img), _q(bg), seg, sample_id), instances


def generate_triple(spec, rng, sample_id=""):
    return generate_scene(spec, rng, sample_id)[0]


def generate_dataset(spec, count, seed=None):
    """``count`` triples, each drawn from its own sub-stream of ``seed``."""
    seed = spec.seed if seed is None else seed
    return [generate_triple(spec, derive_rng(seed, "data", i), f"s{i:05d}") for i in range(count)]


def seg_from_removal(input_img, removal_img, tau=25 / 255):
    """Binary ``[h, w]`` mask where the gray-level difference exceeds ``tau``."""
    a = np.asarray(input_img)
    b = np.asarray(removal_img)
    if a.shape != b.shape:
        raise ShapeError(f"input {a.shape} and removal {b.shape} differ")
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    return (np.abs(gray(a) - gray(b)) > tau).astype(np.uint8)


# ----------------------------------------------------------------- PromptText

@dataclass
class PromptTextSpec:
    height: int = 128
    width: int = 128
    erase_probabilities: tuple = (0.3, 0.5, 0.7)
    marker_kinds: tuple = MARKER_KINDS
    marker_colors: tuple = tuple(MARKER_COLORS)
    word_count: tuple = (3, 6)
    word_length: tuple = (2, 5)
    glyph_scale: tuple = (1, 2)
    count: int = 429
    seed: int = 0

    def __post_init__(self):
        self.erase_probabilities = tuple(float(p) for p in self.erase_probabilities)
        if any(not 0.0 <= p <= 1.0 for p in self.erase_probabilities):
            raise ContractError("erase probabilities must lie in [0, 1]")
        for k in self.marker_kinds:
            if k not in MARKER_KINDS:
                raise ContractError(f"unknown marker kind {k!r}")
        for c in self.marker_colors:
            if c not in MARKER_COLORS:
                raise ContractError(f"unknown marker color {c!r}")


@dataclass
class PromptTextSample:
    sample_id: str
    image_index: int
    erase_probability: float
    marked_input: np.ndarray
    target_removal: np.ndarray
    target_seg: np.ndarray
    marker_kind: str
    marker_color: str
    instances: list  # per-instance dicts: text, bbox, marked

    def as_triple(self):
        return SampleTriple(self.marked_input, self.target_removal, self.target_seg, self.sample_id)

    @property
    def marked_flags(self):
        return [inst["marked"] for inst in self.instances]


def box_ring(bbox, h, w, thickness=2):
    r0, c0, r1, c1 = bbox
    out = np.zeros((h, w), dtype=bool)
    out[max(r0 - thickness, 0):min(r1 + thickness + 1, h), max(c0 - thickness, 0):min(c1 + thickness + 1, w)] = True
    out[r0:r1 + 1, c0:c1 + 1] = False
    return out


def circle_geometry(bbox):
    """Centre and radius of the circle circumscribing the pixel box."""
    r0, c0, r1, c1 = bbox
    cy, cx = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    radius = 0.5 * np.hypot(r1 - r0 + 1, c1 - c0 + 1)
    return cy, cx, radius


def circle_ring(bbox, h, w, thickness=2):
    cy, cx, radius = circle_geometry(bbox)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - cy, xx - cx)
    return (dist >= radius) & (dist < radius + thickness)


def stroke_marker(inst, h, w):
    skel = word_skeleton(inst.text, inst.scale)
    full = np.zeros((h, w), dtype=bool)
    sh, sw = skel.shape
    full[inst.top:inst.top + sh, inst.left:inst.left + sw] = skel
    return binary_dilation(full, structure=np.ones((3, 3), dtype=bool))


def marker_pixels(kind, inst, h, w):
    if kind == "stroke":
        return stroke_marker(inst, h, w)
    if kind == "box":
        return box_ring(inst.bbox, h, w)
    return circle_ring(inst.bbox, h, w)


def generate_prompttext(spec):
    """``spec.count`` images, each expanded into one sample per erase probability."""
    scene = SceneSpec(height=spec.height, width=spec.width, word_count=spec.word_count,
                      word_length=spec.word_length, glyph_scale=spec.glyph_scale)
    h, w = spec.height, spec.width
    out = []
    for idx in range(spec.count):
        rng = derive_rng(spec.seed, "prompttext", idx)
        base, instances = generate_scene(scene, rng, f"pt{idx:04d}")
        src = np.floor(base.input * 255.0 + 0.5).astype(np.int64)
        bg = np.floor(base.removal * 255.0 + 0.5).astype(np.int64)
        for level, p in enumerate(spec.erase_probabilities):
            marked = [bool(rng.random() >= p) for _ in instances]
            kind = spec.marker_kinds[int(rng.integers(len(spec.marker_kinds)))]
            color = spec.marker_colors[int(rng.integers(len(spec.marker_colors)))]
            protected = np.zeros((h, w), dtype=bool)
            for inst, m in zip(instances, marked):
                if not m:
                    protected |= inst.coverage
            target_rem = src.copy()
            seg = np.zeros((h, w), dtype=bool)
            painted = np.zeros((h, w), dtype=bool)
            for inst, m in zip(instances, marked):
                if m:
                    target_rem[:, inst.coverage] = bg[:, inst.coverage]
                    seg |= inst.coverage
                    painted |= marker_pixels(kind, inst, h, w)
            painted &= ~protected
            marked_in = src.copy()
            marked_in[:, painted] = np.asarray(MARKER_COLORS[color])[:, None]
            records = [{"text": inst.text, "bbox": list(inst.bbox), "marked": m}
                       for inst, m in zip(instances, marked)]
            out.append(PromptTextSample(
                f"pt{idx:04d}_l{level}", idx, p, _q(marked_in), _q(target_rem),
                np.broadcast_to(seg.astype(np.float32), (3, h, w)).copy(), kind, color, records))
    return out


# ------------------------------------------------------------------- storage

def write_dataset(root, triples, splits=None, metadata=None):
    """Write PNGs and ``manifest.jsonl`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, t in enumerate(triples):
        sid = t.sample_id or f"s{i:05d}"
        rec = {"sample_id": sid,
               "input_path": f"images/{sid}_input.png",
               "removal_path": f"images/{sid}_removal.png",
               "seg_path": f"images/{sid}_seg.png",
               "split": splits[i] if splits else "train"}
        if metadata is not None:
            rec["marker_metadata"] = metadata[i]
        save_png(root / rec["input_path"], t.input)
        save_png(root / rec["removal_path"], t.removal)
        save_png(root / rec["seg_path"], t.seg[0])
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def default_split(index):
    return "val" if index % 10 == 9 else "train"


def read_manifest(path, split=None):
    """Load ``(SampleTriple, record)`` pairs, optionally restricted to one split."""
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if split is not None and rec.get("split") != split:
            continue
        seg = load_png(base / rec["seg_path"])
        triple = SampleTriple(load_png(base / rec["input_path"]), load_png(base / rec["removal_path"]),
                              (seg > 0.5).astype(np.float32), rec["sample_id"])
        out.append((triple, rec))
    return out


def prompttext_metadata(sample):
    return {"image_index": sample.image_index, "erase_probability": sample.erase_probability,
            "kind": sample.marker_kind, "color": sample.marker_color, "instances": sample.instances}


def spec_dict(spec):
    return asdict(spec)
