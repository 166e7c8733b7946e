import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from himfr.errors import BoundsError, DataError, GeometryError, ShapeError, StratificationError
from himfr.imaging import (
    DEFAULT_FILL_COLOR,
    DatasetIndex,
    EmptyMaskWarning,
    MaskGeometry,
    Sample,
    composite,
    counterpart_paths,
    crop_face,
    load_image,
    load_mask,
    make_masked_dataset,
    read_manifest,
    resize,
    save_image,
    scan_dataset,
    segment_mask,
    split_dataset,
    synthesize_mask,
    write_manifest,
)


def bilinear_oracle(img, top, left, h, w, target, i, j):
    """Half-pixel-centre bilinear sample of output pixel (i, j), coded pixel by pixel."""

    def src(k, n):
        x = (k + 0.5) * n / target - 0.5
        return min(max(x, 0.0), n - 1.0)

    y, x = src(i, h), src(j, w)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    p = lambda r, c: img[top + r, left + c].astype(np.float64)  # noqa: E731
    return (p(y0, x0) * (1 - dx) + p(y0, x1) * dx) * (1 - dy) + (p(y1, x0) * (1 - dx) + p(y1, x1) * dx) * dy


def scanline_count(vertices, height, width):
    """Independent scanline fill: per row, sort edge crossings and count centres in [x_a, x_b)."""
    total = 0
    n = len(vertices)
    for r in range(height):
        yc = (r + 0.5) / height
        xs = []
        for i in range(n):
            (xa, ya), (xb, yb) = vertices[i], vertices[(i + 1) % n]
            if min(ya, yb) <= yc < max(ya, yb):
                xs.append(xa + (yc - ya) * (xb - xa) / (yb - ya))
        xs.sort()
        for a, b in zip(xs[::2], xs[1::2]):
            total += sum(1 for c in range(width) if a <= (c + 0.5) / width < b)
    return total


# ------------------------------------------------------------------ crop_face


def test_crop_full_frame_to_256(rng):
    img = rng.random((512, 512, 3)).astype(np.float32)
    out = crop_face(img, (0, 0, 512, 512), 256)
    assert out.shape == (256, 256, 3)


def test_crop_identity_when_box_matches_target(rng):
    img = rng.random((300, 300, 3)).astype(np.float32)
    out = crop_face(img, (10, 20, 224, 224), 224)
    np.testing.assert_array_equal(out, img[10:234, 20:244])


def test_crop_matches_bilinear_oracle(rng):
    img = rng.random((300, 300, 3)).astype(np.float32)
    out = crop_face(img, (75, 75, 150, 150), 224)
    np.testing.assert_allclose(out[0, 0], bilinear_oracle(img, 75, 75, 150, 150, 224, 0, 0), atol=1e-6)
    np.testing.assert_allclose(out[0, 0], img[75, 75], atol=1e-6)
    for i, j in [(1, 1), (17, 203), (111, 112), (223, 223), (5, 150)]:
        np.testing.assert_allclose(out[i, j], bilinear_oracle(img, 75, 75, 150, 150, 224, i, j), atol=1e-6)


def test_crop_out_of_bounds():
    img = np.zeros((64, 64, 3), np.float32)
    with pytest.raises(BoundsError):
        crop_face(img, (10, 10, 60, 20), 224)
    with pytest.raises(BoundsError):
        crop_face(img, (-1, 0, 10, 10), 224)


@settings(max_examples=50, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(8, 64), st.integers(0, 2**31 - 1))
def test_crop_output_stays_in_unit_range(h, w, target, seed):
    img = np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)
    out = crop_face(img, (0, 0, h, w), target)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_resize_rejects_bad_images():
    with pytest.raises(ShapeError):
        resize(np.zeros((4, 4, 3), np.float32), 8)
    with pytest.raises(ValueError):
        resize(np.full((8, 8, 3), 1.5, np.float32), 16)


# ------------------------------------------------------------- synthesize_mask


def test_no_geometry_is_identity(rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    pair = synthesize_mask(img, None)
    np.testing.assert_array_equal(pair.masked_image, img)
    assert not pair.mask.any()


@pytest.mark.parametrize(
    "verts",
    [
        ((0.1, 0.1), (0.5, 0.5), (0.9, 0.9)),  # collinear
        ((0.2, 0.2), (0.2, 0.2), (0.2, 0.2)),
        ((0.1, 0.1), (0.9, 0.1)),
    ],
)
def test_degenerate_geometry_rejected(verts):
    with pytest.raises(GeometryError):
        MaskGeometry(vertices=verts)


def test_vertices_outside_unit_square_rejected():
    with pytest.raises(GeometryError):
        MaskGeometry(vertices=((0.1, 0.1), (1.2, 0.1), (0.5, 0.9)))


def test_trapezoid_popcount_matches_scanline_oracle():
    verts = ((0.2, 0.5), (0.8, 0.5), (0.9, 1.0), (0.1, 1.0))
    img = np.full((224, 224, 3), 0.5, np.float32)
    pair = synthesize_mask(img, MaskGeometry(vertices=verts))
    assert int(pair.mask.sum()) == scanline_count(verts, 224, 224)
    rows = np.flatnonzero(pair.mask.any(axis=1))
    assert rows.min() == 112 and rows.max() == 223


def test_default_geometry_covers_nose_and_mouth_region():
    pair = synthesize_mask(np.full((224, 224, 3), 0.5, np.float32), MaskGeometry())
    rows = np.flatnonzero(pair.mask.any(axis=1)) / 224
    cols = np.flatnonzero(pair.mask.any(axis=0)) / 224
    assert 0.47 <= rows.min() <= 0.49 and rows.max() >= 0.97
    assert 0.14 <= cols.min() <= 0.16 and 0.84 <= cols.max() <= 0.86
    assert not pair.mask[: int(0.47 * 224)].any()  # eyes stay visible
    assert pair.mask[int(0.75 * 224), 112]  # mouth covered


def test_masked_pair_fields(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    pair = synthesize_mask(img, MaskGeometry(), seed=3)
    m = pair.mask
    np.testing.assert_array_equal(pair.masked_image[~m], img[~m])
    np.testing.assert_array_equal(pair.hidden_complement[m], img[m])
    assert not pair.hidden_complement[~m].any()
    np.testing.assert_allclose(pair.masked_image[m], np.tile(DEFAULT_FILL_COLOR, (m.sum(), 1)), atol=1e-7)


def test_synthesize_is_deterministic_per_seed(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    geom = MaskGeometry(jitter=0.05)
    a, b, c = (synthesize_mask(img, geom, s) for s in (5, 5, 6))
    np.testing.assert_array_equal(a.masked_image, b.masked_image)
    assert not np.array_equal(a.masked_image, c.masked_image)
    colors = a.masked_image[a.mask]
    assert np.abs(colors - np.asarray(DEFAULT_FILL_COLOR)).max() <= 0.05 + 1e-6


def test_grayscale_fill():
    pair = synthesize_mask(np.zeros((32, 32, 1), np.float32), MaskGeometry())
    assert pair.masked_image.shape == (32, 32, 1)
    assert pair.masked_image[pair.mask].min() > 0


# ---------------------------------------------------------------- segment_mask


def test_ground_truth_segmentation_roundtrip(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    pair = synthesize_mask(img, MaskGeometry(), seed=1)
    np.testing.assert_array_equal(segment_mask(pair, "ground_truth"), pair.mask)


def test_color_threshold_recovers_synthetic_mask(faces64):
    images, _ = faces64
    for i, img in enumerate(images[:10]):
        pair = synthesize_mask(img, MaskGeometry(), seed=i)
        seg = segment_mask(pair.masked_image, "color_threshold", tau=0.05)
        assert np.mean(seg == pair.mask) >= 0.999


def test_color_threshold_survives_8bit_roundtrip(tmp_path, faces64):
    pair = synthesize_mask(faces64[0][0], MaskGeometry())
    save_image(tmp_path / "m.png", pair.masked_image)
    seg = segment_mask(load_image(tmp_path / "m.png"), "color_threshold")
    assert np.mean(seg == pair.mask) >= 0.999


def test_imperfect_segmentation_leaves_mask_remnants(faces64):
    # A tight threshold misses jittered fill pixels: they stay visible in the composite.
    pair = synthesize_mask(faces64[0][0], MaskGeometry(jitter=0.05), seed=11)
    with pytest.warns(EmptyMaskWarning):
        seg = segment_mask(pair.masked_image, "color_threshold", tau=0.005)
    missed = pair.mask & ~seg
    assert missed.any()
    restored = composite(pair.masked_image, pair.ground_truth, seg)
    np.testing.assert_array_equal(restored[missed], pair.masked_image[missed])


def test_color_threshold_with_no_match_warns():
    img = np.zeros((16, 16, 3), np.float32)
    with pytest.warns(EmptyMaskWarning):
        seg = segment_mask(img, "color_threshold")
    assert not seg.any()


def test_ground_truth_mode_needs_pair():
    with pytest.raises(ValueError):
        segment_mask(np.zeros((16, 16, 3), np.float32), "ground_truth")


# ------------------------------------------------------------------- composite


def test_composite_zero_and_full_masks(rng):
    a = rng.random((20, 20, 3))
    b = rng.random((20, 20, 3))
    np.testing.assert_array_equal(composite(a, b, np.zeros((20, 20), bool)), a)
    np.testing.assert_array_equal(composite(a, b, np.ones((20, 20), bool)), b)


def test_composite_checkerboard_mean():
    known = np.full((64, 64, 1), 0.2)
    generated = np.full((64, 64, 1), 0.8)
    checker = (np.add.outer(np.arange(64), np.arange(64)) % 2).astype(bool)
    out = composite(known, generated, checker)
    assert math.fsum(out.ravel()) / out.size == 0.5


def test_composite_shape_mismatch():
    with pytest.raises(ShapeError):
        composite(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), np.zeros((8, 8), bool))
    with pytest.raises(ShapeError):
        composite(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), np.zeros((8, 9), bool))


def test_composite_preserves_known_region_property():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        h, w = rng.integers(1, 12, size=2)
        known = rng.random((h, w, 3)).astype(np.float32)
        generated = rng.random((h, w, 3)).astype(np.float32)
        mask = rng.random((h, w)) < rng.random()
        out = composite(known, generated, mask)
        np.testing.assert_array_equal(out[~mask], known[~mask])
        np.testing.assert_array_equal(out[mask], generated[mask])


# ---------------------------------------------------------------------- split


def _balanced(n_classes=5, per_class=200):
    return DatasetIndex(
        [Sample(f"c{c}/{i}.png", c) for c in range(n_classes) for i in range(per_class)],
        [f"c{c}" for c in range(n_classes)],
    )


def allocation_oracle(sizes, ratio):
    """Floor per class, then hand out the remaining training slots by largest fractional part."""
    total = sum(sizes)
    want = int(total * ratio + 0.5 + 1e-9)
    floors = [int(n * ratio + 1e-9) for n in sizes]
    fracs = [n * ratio - f for n, f in zip(sizes, floors)]
    extra = want - sum(floors)
    order = sorted(range(len(sizes)), key=lambda c: (-round(fracs[c], 9), c))
    for c in order[:extra]:
        floors[c] += 1
    return [min(max(f, 1), n - 1) for f, n in zip(floors, sizes)]


def test_split_80_20_balanced():
    train, test = split_dataset(_balanced(), 0.8, seed=0)
    assert len(train) == 800 and len(test) == 200
    assert train.counts() == {c: 160 for c in range(5)}
    assert test.counts() == {c: 40 for c in range(5)}


def test_split_deterministic():
    a = split_dataset(_balanced(), 0.8, seed=3)
    b = split_dataset(_balanced(), 0.8, seed=3)
    c = split_dataset(_balanced(), 0.8, seed=4)
    assert a[0].samples == b[0].samples and a[1].samples == b[1].samples
    assert a[0].samples != c[0].samples


@pytest.mark.parametrize("sizes", [[7, 13, 2, 29, 5], [3, 3, 3], [10, 11, 12, 13], [2, 2, 100]])
@pytest.mark.parametrize("ratio", [0.5, 0.8, 0.9, 0.33])
def test_split_counts_match_allocation_oracle(sizes, ratio):
    idx = DatasetIndex([Sample(f"{c}/{i}", c) for c, n in enumerate(sizes) for i in range(n)], [str(c) for c in range(len(sizes))])
    train, _ = split_dataset(idx, ratio, seed=1)
    got = [train.counts().get(c, 0) for c in range(len(sizes))]
    assert got == allocation_oracle(sizes, ratio)


def test_split_partitions_disjoint_and_exhaustive():
    rng = np.random.default_rng(0)
    sizes = rng.integers(2, 30, size=6)
    idx = DatasetIndex([Sample(f"{c}/{i}", c) for c, n in enumerate(sizes) for i in range(n)], [str(c) for c in range(6)])
    everything = {s.path for s in idx.samples}
    for ratio in (0.5, 0.8, 0.9):
        for seed in range(100):
            train, test = split_dataset(idx, ratio, seed)
            a, b = {s.path for s in train.samples}, {s.path for s in test.samples}
            assert not a & b and a | b == everything


def test_split_rejects_tiny_classes():
    idx = DatasetIndex([Sample("a/0", 0), Sample("a/1", 0), Sample("b/0", 1)], ["a", "b"])
    with pytest.raises(StratificationError):
        split_dataset(idx, 0.8, 0)


def test_split_rejects_bad_ratio():
    with pytest.raises(ValueError):
        split_dataset(_balanced(), 1.0, 0)


def test_dataset_index_invariants():
    with pytest.raises(DataError):
        DatasetIndex([Sample("x", 0), Sample("x", 0)], ["a"])
    with pytest.raises(DataError):
        DatasetIndex([Sample("x", 2)], ["a", "b"])


# ------------------------------------------------------------------ file trees


def test_masked_dataset_tree_and_manifest(tmp_path, faces64):
    images, labels = faces64
    root = tmp_path / "faces"
    for i, (img, lab) in enumerate(zip(images[:20], labels[:20])):
        save_image(root / f"id{lab}" / f"{i:03d}.jpg", img)
    idx = scan_dataset(root)
    assert idx.class_names == ["id0", "id1"]
    assert make_masked_dataset(root, MaskGeometry(), seed=0) == 20

    masked_path, mask_path = counterpart_paths(idx.samples[0].path, root)
    assert masked_path == tmp_path / "faces_masked" / "id0" / "000.png"
    assert mask_path == tmp_path / "faces_masks" / "id0" / "000.png"
    from PIL import Image

    with Image.open(mask_path) as im:
        assert im.mode == "L"
        assert set(np.unique(np.asarray(im)).tolist()) == {0, 255}
    stored = load_mask(mask_path)
    img = load_image(idx.samples[0].path)
    expected = synthesize_mask(img, MaskGeometry(), seed=0).mask
    np.testing.assert_array_equal(stored, expected)

    train, test = split_dataset(idx, 0.8, 0)
    write_manifest(tmp_path / "split.csv", {"train": train, "test": test})
    assert (tmp_path / "split.csv").read_text().splitlines()[0] == "path,label,split"
    back = read_manifest(tmp_path / "split.csv")
    assert back["train"].samples == train.samples and back["test"].samples == test.samples
    assert back["train"].class_names == ["id0", "id1"]


def test_image_roundtrip_8bit(tmp_path, rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    save_image(tmp_path / "a.png", img)
    back = load_image(tmp_path / "a.png")
    np.testing.assert_array_equal(np.rint(back * 255), np.rint(img.astype(np.float64) * 255))


def test_missing_image_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_image(tmp_path / "nope.png")
