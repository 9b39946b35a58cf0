import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from context_forge.errors import ContractError, GenerationError, ShapeError
from context_forge.font import ALPHABET, GLYPH_H, GLYPH_W, GLYPHS, render_word, word_skeleton
from context_forge.imaging import gray, load_png, save_png
from context_forge.metrics import fgiou_fscore
from context_forge.rng import derive_rng
from context_forge.synthdata import (PromptTextSpec, SceneSpec, box_ring, circle_geometry, circle_ring,
                                     default_split, generate_dataset, generate_prompttext, generate_scene,
                                     read_manifest, seg_from_removal, write_dataset)


def test_font_covers_letters_and_digits():
    assert len(ALPHABET) == 36
    assert all(g.shape == (GLYPH_H, GLYPH_W) and g.any() for g in GLYPHS.values())


def test_render_word_geometry():
    cov = render_word("AB", 2)
    assert cov.shape == (14, 22)
    assert not cov[:, 10:12].any()  # the scaled spacing column
    np.testing.assert_array_equal(cov[::2, ::2][:, :5], GLYPHS["A"])


def test_skeleton_lies_inside_glyphs():
    for text in ("HELLO", "W0RLD", "A"):
        for scale in (1, 2, 3):
            skel = word_skeleton(text, scale)
            assert skel.any()
            assert not np.any(skel & ~render_word(text, scale))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_scene_invariants(seed):
    triple, instances = generate_scene(SceneSpec(), derive_rng(seed, "t"), "x")
    assert instances
    for panel in (triple.input, triple.removal, triple.seg):
        assert panel.dtype == np.float32 and panel.shape == (3, 64, 64)
        k = panel * np.float32(255)
        np.testing.assert_array_equal(k, np.round(k))
    mask = triple.seg[0] > 0
    union = np.zeros_like(mask)
    for a in instances:
        assert not np.any(union & a.coverage)  # words never overlap
        union |= a.coverage
    np.testing.assert_array_equal(mask, union)
    # text pixels differ from the background by at least the contrast floor; the rest are untouched
    np.testing.assert_array_equal(triple.input[:, ~mask], triple.removal[:, ~mask])
    diff = np.abs(gray(triple.input) - gray(triple.removal)) * 255
    assert diff[mask].min() >= 40 - 1e-3


def test_png_round_trip_is_exact(tmp_path):
    triple = generate_dataset(SceneSpec(), 1, 3)[0]
    save_png(tmp_path / "a.png", triple.input)
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), triple.input)


def test_dataset_is_deterministic_and_seed_sensitive():
    a = generate_dataset(SceneSpec(), 4, 11)
    b = generate_dataset(SceneSpec(), 4, 11)
    c = generate_dataset(SceneSpec(), 4, 12)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.input, y.input)
    assert any(not np.array_equal(x.input, y.input) for x, y in zip(a, c))


def test_dataset_prefix_stability():
    # each sample has its own stream, so a longer run extends a shorter one
    short = generate_dataset(SceneSpec(), 3, 5)
    longer = generate_dataset(SceneSpec(), 6, 5)
    for x, y in zip(short, longer):
        np.testing.assert_array_equal(x.input, y.input)


def test_impossible_layout_raises():
    spec = SceneSpec(height=16, width=16, word_count=(3, 3), word_length=(4, 4), glyph_scale=(2, 2))
    with pytest.raises(GenerationError):
        generate_scene(spec, np.random.default_rng(0))


def test_invalid_spec_rejected():
    with pytest.raises(ContractError):
        SceneSpec(backgrounds=("plaid",))
    with pytest.raises(ContractError):
        SceneSpec(word_length=(3, 1))


def test_seg_from_removal_recovers_masks():
    ious = []
    for t in generate_dataset(SceneSpec(), 50, 0):
        ious.append(fgiou_fscore(seg_from_removal(t.input, t.removal), t.seg[0])[0])
    assert np.mean(ious) >= 95.0


def test_seg_from_removal_threshold_and_errors():
    a = np.zeros((3, 2, 2))
    b = a.copy()
    b[:, 0, 0] = 30 / 255
    b[:, 1, 1] = 20 / 255
    np.testing.assert_array_equal(seg_from_removal(b, a), [[1, 0], [0, 0]])
    with pytest.raises(ShapeError):
        seg_from_removal(a, np.zeros((3, 2, 3)))
    with pytest.raises(ContractError):
        seg_from_removal(a, a, tau=0.0)


def test_manifest_round_trip(tmp_path):
    triples = generate_dataset(SceneSpec(height=32, width=32, word_count=(1, 2), word_length=(1, 3)), 12, 0)
    manifest = write_dataset(tmp_path, triples, [default_split(i) for i in range(12)])
    loaded = read_manifest(manifest)
    assert [r["sample_id"] for _, r in loaded] == [t.sample_id for t in triples]
    assert [r["split"] for _, r in loaded].count("val") == 1
    for (t, _), ref in zip(loaded, triples):
        np.testing.assert_array_equal(t.input, ref.input)
        np.testing.assert_array_equal(t.removal, ref.removal)
        np.testing.assert_array_equal(t.seg, ref.seg)
    assert len(read_manifest(manifest, "val")) == 1


def test_box_ring_surrounds_the_box():
    ring = box_ring((4, 4, 6, 7), 16, 16)
    assert not ring[4:7, 4:8].any()
    assert ring[2:9, 2:10].sum() == 7 * 8 - 3 * 4
    assert ring.sum() == ring[2:9, 2:10].sum()


def test_circle_encloses_the_box():
    bbox = (3, 5, 9, 12)
    cy, cx, r = circle_geometry(bbox)
    for y, x in ((3, 5), (3, 12), (9, 5), (9, 12)):
        assert np.hypot(y - cy, x - cx) <= r
    ring = circle_ring(bbox, 32, 32)
    assert not ring[3:10, 5:13].any()


@pytest.fixture(scope="module")
def prompttext_small():
    return generate_prompttext(PromptTextSpec(count=12, seed=4))


def _source_scene(spec, idx):
    scene = SceneSpec(height=spec.height, width=spec.width, word_count=spec.word_count,
                      word_length=spec.word_length, glyph_scale=spec.glyph_scale)
    return generate_scene(scene, derive_rng(spec.seed, "prompttext", idx))


PT_SPEC = PromptTextSpec(count=12, seed=4)


def test_prompttext_levels(prompttext_small):
    assert len(prompttext_small) == 36
    by_image = {}
    for s in prompttext_small:
        by_image.setdefault(s.image_index, []).append(s.erase_probability)
    assert all(sorted(v) == [0.3, 0.5, 0.7] for v in by_image.values())


def test_prompttext_targets_follow_marks(prompttext_small):
    for s in prompttext_small:
        base, instances = _source_scene(PT_SPEC, s.image_index)
        marked = s.marked_flags
        assert len(marked) == len(instances)
        want_seg = np.zeros(base.hw, dtype=bool)
        want_rem = base.input.copy()
        for inst, m in zip(instances, marked):
            if m:
                want_seg |= inst.coverage
                want_rem[:, inst.coverage] = base.removal[:, inst.coverage]
        np.testing.assert_array_equal(s.target_seg[0] > 0, want_seg)
        np.testing.assert_array_equal(s.target_removal, want_rem)


def test_prompttext_markers_spare_unmarked_text(prompttext_small):
    for s in prompttext_small:
        base, instances = _source_scene(PT_SPEC, s.image_index)
        painted = np.any(s.marked_input != base.input, axis=0)
        assert painted.any() or not any(s.marked_flags)
        color = np.array({"red": (1, 0, 0), "green": (0, 1, 0), "blue": (0, 0, 1)}[s.marker_color])
        np.testing.assert_array_equal(s.marked_input[:, painted], np.repeat(color[:, None], painted.sum(), 1))
        for inst, m in zip(instances, s.marked_flags):
            if not m:
                assert not np.any(painted & inst.coverage)


def test_prompttext_marked_fraction_within_binomial_bounds():
    samples = generate_prompttext(PromptTextSpec(count=60, seed=1))
    for p in (0.3, 0.5, 0.7):
        flags = [f for s in samples if s.erase_probability == p for f in s.marked_flags]
        n = len(flags)
        # instances are marked with probability 1 - p; 4-sigma binomial band
        assert abs(np.mean(flags) - (1 - p)) <= 4 * np.sqrt(p * (1 - p) / n)


def test_prompttext_is_byte_identical_under_fixed_seed():
    def digest(samples):
        h = hashlib.sha256()
        for s in samples:
            h.update(s.marked_input.tobytes())
            h.update(s.target_removal.tobytes())
            h.update(s.target_seg.tobytes())
        return h.hexdigest()
    assert digest(generate_prompttext(PromptTextSpec(count=5, seed=9))) == \
        digest(generate_prompttext(PromptTextSpec(count=5, seed=9)))
