import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noteheads.dataset import PageAnnotation, SymbolAnnotation, SynthConfig, synth_generate
from noteheads.raster import BinaryImage, Box, PixelCoord, skeletonize
from noteheads.sampler import (
    PatchExtractor,
    PatchSpec,
    decode_box,
    decode_boxes,
    encode_target,
    extract_patch,
    label_targets,
    page_samples,
    read_samples,
    runtime_targets,
    training_targets,
    write_samples,
)

from oracles import zhang_suen_reference


def area_average_oracle(crop, scaled):
    """Upsample each pixel to scaled x scaled, then average size x size blocks."""
    size = crop.shape[0]
    fine = np.kron(crop.astype(float), np.ones((scaled, scaled)))
    return fine.reshape(scaled, size, scaled, size).mean(axis=(1, 3))


def padded_crop(bits, t, size):
    half = size // 2
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            y, x = t[0] - half + i, t[1] - half + j
            if 0 <= y < bits.shape[0] and 0 <= x < bits.shape[1]:
                out[i, j] = bits[y, x]
    return out


# -- runtime targets ---------------------------------------------------------


def test_runtime_targets_blank_and_single():
    assert runtime_targets(BinaryImage.blank(6, 6)) == []
    bits = np.zeros((6, 6), dtype=bool)
    bits[4, 1] = True
    assert runtime_targets(BinaryImage(bits)) == [PixelCoord(4, 1)]


def test_runtime_targets_square():
    bits = np.zeros((12, 12), dtype=bool)
    bits[1:11, 1:11] = True
    expect = [tuple(p) for p in np.argwhere(zhang_suen_reference(bits.tolist()))]
    assert [tuple(p) for p in runtime_targets(BinaryImage(bits))] == expect


# -- training targets --------------------------------------------------------


def _symbol(sid, label, bits, page_shape):
    ys, xs = np.nonzero(bits)
    box = Box(ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)
    return SymbolAnnotation(sid, label, box, bits[box.top : box.bottom, box.left : box.right].copy())


def test_single_notehead_k1():
    bits = np.zeros((20, 20), dtype=bool)
    bits[6:12, 5:14] = True
    page = PageAnnotation("W-01", "N-01", "x.pbm", 20, 20, [_symbol(1, "notehead-full", bits, bits.shape)])
    picks = training_targets(page, BinaryImage(bits), k=1, seed=3)
    assert len(picks) == 1
    (m, n), sid = picks[0]
    assert sid == 1 and bits[m, n]


def test_stem_inside_notehead_gives_nothing(caplog):
    head = np.zeros((20, 20), dtype=bool)
    head[5:15, 5:15] = True
    stem = np.zeros((20, 20), dtype=bool)
    stem[6:14, 9:11] = True
    page = PageAnnotation(
        "W-01", "N-01", "x.pbm", 20, 20,
        [_symbol(1, "notehead-full", head, head.shape), _symbol(2, "stem", stem, stem.shape)],
    )
    with caplog.at_level("INFO"):
        picks = training_targets(page, BinaryImage(head | stem), k=5, seed=0)
    assert {sid for _, sid in picks} == {1}
    assert "[2]" in caplog.text


def test_k_rejects_zero():
    page = PageAnnotation("W-01", "N-01", "x.pbm", 4, 4)
    with pytest.raises(ValueError):
        training_targets(page, BinaryImage.blank(4, 4), k=0)


@pytest.mark.parametrize("k", [1, 3])
def test_exclusion_rule_on_synthetic_page(k):
    image, page = synth_generate(SynthConfig(seed=6))
    skel = skeletonize(image).bits
    picks = training_targets(page, image, k=k, seed=1)
    by_id = {s.id: s for s in page.symbols}
    heads = page.noteheads()
    counts = {}
    for (m, n), sid in picks:
        s = by_id[sid]
        counts[sid] = counts.get(sid, 0) + 1
        assert skel[m, n]
        assert s.bbox.contains_pixel(m, n) and s.mask[m - s.bbox.top, n - s.bbox.left]
        if s.label not in {"notehead-full", "notehead-empty", "notehead-grace"}:
            for h in heads:
                inside = h.bbox.contains_pixel(m, n) and h.mask[m - h.bbox.top, n - h.bbox.left]
                assert not inside
    assert max(counts.values()) <= k
    assert len(set(picks)) == len(picks)
    if k == 3:
        assert max(counts.values()) == 3


def test_training_targets_deterministic():
    image, page = synth_generate(SynthConfig(seed=6))
    assert training_targets(page, image, 2, seed=4) == training_targets(page, image, 2, seed=4)


# -- patches -----------------------------------------------------------------


def test_blank_and_full_patches():
    blank = BinaryImage.blank(120, 120)
    assert not extract_patch(blank, (60, 60)).any()
    full = BinaryImage(np.ones((120, 120), dtype=bool))
    patch = extract_patch(full, (60, 60))
    assert patch.shape == (51, 51)
    assert np.all(patch == 1.0)


def test_corner_patch_hand_computed():
    full = BinaryImage(np.ones((10, 10), dtype=bool))
    patch = extract_patch(full, (0, 0), PatchSpec(5, 3))
    # in-bounds crop rows/cols 2..4; bins cover [0,5/3), [5/3,10/3), [10/3,5)
    expect = np.array([[0, 0, 0], [0, 0.64, 0.8], [0, 0.8, 1.0]])
    np.testing.assert_allclose(patch, expect, atol=1e-6)


@pytest.mark.parametrize("size, scaled", [(101, 51), (9, 3), (7, 5), (11, 11)])
def test_patches_match_area_oracle(size, scaled):
    rng = np.random.default_rng(size + scaled)
    bits = rng.random((40, 50)) < 0.4
    extractor = PatchExtractor(BinaryImage(bits), PatchSpec(size, scaled))
    coords = np.array([[0, 0], [39, 49], [20, 25], [3, 47]])
    patches = extractor(coords, chunk=3)
    for t, patch in zip(coords, patches):
        expect = area_average_oracle(padded_crop(bits, t, size), scaled)
        np.testing.assert_allclose(patch, expect, atol=1e-5)


def test_integer_factor_gives_quantised_values():
    # odd sizes rule out a factor of 2; the factor-3 analogue gives multiples of 1/9
    rng = np.random.default_rng(0)
    bits = rng.random((60, 60)) < 0.5
    patches = PatchExtractor(BinaryImage(bits), PatchSpec(9, 3))(np.argwhere(np.ones((40, 40))) + 10)
    j = patches * 9
    assert np.allclose(j, np.round(j), atol=1e-4)
    assert patches.min() >= 0 and patches.max() <= 1


def test_target_outside_image():
    with pytest.raises(ValueError):
        extract_patch(BinaryImage.blank(5, 5), (5, 0))


@pytest.mark.parametrize("size, scaled", [(100, 51), (101, 50), (1, 1), (51, 101)])
def test_bad_patch_spec(size, scaled):
    with pytest.raises(ValueError):
        PatchSpec(size, scaled)


def test_patch_size_from_staff_height():
    spec = PatchSpec.from_staff_height(84)
    assert spec.patch_size == 101 and spec.patch_size % 2 == 1
    assert spec.staff_height == 84


# -- encoding ----------------------------------------------------------------


def test_encode_examples():
    assert encode_target((10, 10), Box(6, 7, 15, 14)) == (1, (4, 3, 4, 3))
    assert encode_target((10, 10), None) == (0, (0, 0, 0, 0))
    box = Box(3, 4, 8, 12)
    assert encode_target((3, 4), box) == (1, (0, 0, box.height - 1, box.width - 1))
    with pytest.raises(ValueError):
        encode_target((15, 10), Box(6, 7, 15, 14))


def test_decode_examples():
    assert decode_box((10, 10), (4, 3, 4, 3)) == Box(6, 7, 15, 14)
    assert decode_box((5, 5), (0, 0, 0, 0)) == Box(5, 5, 6, 6)
    assert decode_box((5, 5), (0.5, 1.49, 0.2, 2.5)) == Box(4, 4, 6, 9)
    with pytest.raises(ValueError):
        decode_box((5, 5), (-1, 0, 0, 0))


@settings(max_examples=500)
@given(
    st.integers(0, 200), st.integers(0, 200), st.integers(1, 40), st.integers(1, 40), st.data()
)
def test_encode_decode_roundtrip(top, left, h, w, data):
    box = Box(top, left, top + h, left + w)
    t = (data.draw(st.integers(top, top + h - 1)), data.draw(st.integers(left, left + w - 1)))
    c, b = encode_target(t, box)
    assert c == 1 and min(b) >= 0
    assert b[0] + b[2] == h - 1 and b[1] + b[3] == w - 1
    assert decode_box(t, b) == box


def test_decode_boxes_vectorised_and_clamped():
    rng = np.random.default_rng(2)
    coords = rng.integers(0, 30, (50, 2))
    b = rng.uniform(0, 8, (50, 4))
    boxes = decode_boxes(coords, b)
    for t, row, got in zip(coords, b, boxes):
        assert tuple(got) == tuple(decode_box(t, row))
    clamped = decode_boxes(coords, b, shape=(30, 30))
    assert clamped.min() >= 0 and clamped[:, [2, 3]].max() <= 30


# -- samples -----------------------------------------------------------------


def test_page_samples_invariants():
    image, page = synth_generate(SynthConfig(seed=8))
    samples = page_samples(image, page, seed=2)
    assert samples.X.shape[1:] == (51, 51)
    assert samples.X.min() >= 0 and samples.X.max() <= 1
    neg = samples.c == 0
    assert np.all(samples.b[neg] == 0)
    heads = {s.id: s.bbox for s in page.noteheads()}
    assert samples.c.sum() == len(heads)
    for i in np.flatnonzero(~neg):
        m, n = samples.t[i]
        box = decode_box((m, n), samples.b[i])
        assert box in heads.values()
        assert samples.b[i, 0] + samples.b[i, 2] == box.height - 1
        assert samples.b[i, 1] + samples.b[i, 3] == box.width - 1
    # labelling by mask lookup agrees with the per-symbol encoding
    c, b = label_targets(samples.t, page)
    assert np.array_equal(c, samples.c)


def test_sample_dump_roundtrip(tmp_path):
    image, page = synth_generate(SynthConfig(seed=8, n_noteheads=5, n_distractors=3))
    samples = page_samples(image, page)
    write_samples(samples, tmp_path / "s.bin")
    back = read_samples(tmp_path / "s.bin")
    assert np.array_equal(back.X, samples.X)
    assert np.array_equal(back.c, samples.c)
    assert np.array_equal(back.b, samples.b)
    data = (tmp_path / "s.bin").read_bytes()
    assert data[:4] == b"NHTS"
    assert int.from_bytes(data[4:8], "little") == len(samples)
    assert int.from_bytes(data[8:12], "little") == 51
    assert len(data) == 12 + len(samples) * (51 * 51 + 5) * 4
