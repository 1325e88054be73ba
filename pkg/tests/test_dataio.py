import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image
from scipy import ndimage
from sklearn.linear_model import LogisticRegression

from signforge.dataio import (
    BASE_POINTS,
    DataError,
    Dataset,
    affine_from_points,
    draw_affine,
    dump_dataset_bytes,
    generate_synthetic,
    load_dataset,
    load_dataset_bytes,
    load_gtsrb,
    random_affine,
    rebalance,
    render_glyph,
    root_source_id,
    save_dataset,
    warp_affine,
)


def _smooth_image(seed):
    noise = np.random.default_rng(seed).random((32, 32, 3))
    img = ndimage.gaussian_filter(noise, sigma=(3, 3, 0))
    img = (img - img.min()) / (img.max() - img.min())
    return 0.2 + 0.6 * img


# --------------------------------------------------------------------------
# synthetic generator

def test_synthetic_is_deterministic():
    a_tr, a_te = generate_synthetic(num_classes=4, per_class=20, seed=3)
    b_tr, b_te = generate_synthetic(num_classes=4, per_class=20, seed=3)
    assert np.array_equal(a_tr.X, b_tr.X) and np.array_equal(a_te.X, b_te.X)
    assert a_tr.source_ids == b_tr.source_ids
    c_tr, _ = generate_synthetic(num_classes=4, per_class=20, seed=4)
    assert not np.array_equal(a_tr.X[:5], c_tr.X[:5])


def test_synthetic_split_arithmetic_8x200():
    train, test = generate_synthetic(num_classes=8, per_class=200, seed=0)
    # 160 train slots and 40 test slots per class before thinning
    assert len(test) == 320
    assert np.array_equal(test.class_histogram, np.full(8, 40))
    slots = {sid.rsplit("-", 1)[1] for sid in train.source_ids}
    assert max(int(s) for s in slots) < 160
    counts = train.class_histogram
    assert np.all(counts >= round(160 * 0.3)) and np.all(counts <= 160)
    assert counts.min() < counts.max()


def test_synthetic_images_in_range_and_shape():
    train, test = generate_synthetic(num_classes=5, per_class=10, seed=1)
    for ds in (train, test):
        assert ds.X.shape[1:] == (32, 32, 3)
        assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0
        assert set(ds.origin) == {"synthetic"}


def test_synthetic_splits_are_disjoint():
    train, test = generate_synthetic(num_classes=4, per_class=30, seed=2)
    assert not set(train.source_ids) & set(test.source_ids)


def test_synthetic_rejects_bad_class_count():
    with pytest.raises(ValueError):
        generate_synthetic(num_classes=1)
    with pytest.raises(ValueError):
        generate_synthetic(num_classes=44)


def test_all_43_class_designs_differ():
    rng = np.random.default_rng(0)
    # render once with the photometric variation present; compare noise-free means per class
    means = []
    for c in range(43):
        imgs = np.stack([render_glyph(c, np.random.default_rng([c, k])) for k in range(6)])
        means.append(imgs.mean(axis=0))
    means = np.stack(means)
    d = np.abs(means[:, None] - means[None]).mean(axis=(2, 3, 4))
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0.005
    assert render_glyph(0, rng).shape == (32, 32, 3)


def test_linear_probe_separates_four_classes():
    train, test = generate_synthetic(num_classes=4, per_class=100, seed=0)
    probe = LogisticRegression(max_iter=2000).fit(train.X.reshape(len(train), -1), train.y)
    acc = probe.score(test.X.reshape(len(test), -1), test.y)
    assert acc > 0.6


# --------------------------------------------------------------------------
# affine augmentation

def test_zero_jitter_is_identity():
    img = _smooth_image(0)
    out = random_affine(img, np.random.default_rng(0), max_jitter=0)
    assert np.array_equal(out.pixels, img)
    assert out.origin == "augmented"


def test_affine_from_points_recovers_translation():
    M = affine_from_points(BASE_POINTS, BASE_POINTS + np.array([1.0, 0.0]))
    np.testing.assert_allclose(M[:, :2], np.eye(2), atol=1e-12)
    np.testing.assert_allclose(M[:, 2], [1.0, 0.0], atol=1e-12)


def test_warp_translation_shifts_columns():
    img = _smooth_image(1)
    M = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    out = warp_affine(img, M)
    np.testing.assert_allclose(out[:, 1:], img[:, :-1], atol=1e-12)
    assert np.all(out[:, 0] == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_affine_round_trip_on_smooth_image(seed):
    img = _smooth_image(seed)
    M = draw_affine(np.random.default_rng(seed), max_jitter=2.0)
    A, B = M[:, :2], M[:, 2]
    Ainv = np.linalg.inv(A)
    back = warp_affine(warp_affine(img, M), np.hstack([Ainv, (-Ainv @ B)[:, None]]))
    interior = (slice(5, 27), slice(5, 27))
    assert np.abs(back[interior] - img[interior]).max() < 0.06


def test_draw_affine_retries_then_fails():
    class Collinear:
        def uniform(self, lo, hi, size):
            # push the third point onto the line through the first two
            return np.array([[0.0, 0.0], [0.0, 0.0], [24.0, -24.0]])

    with pytest.raises(DataError):
        draw_affine(Collinear(), max_retries=3)


@given(st.integers(0, 2**32 - 1))
def test_random_affine_keeps_range(seed):
    img = _smooth_image(seed % 7)
    out = random_affine(img, np.random.default_rng(seed)).pixels
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


# --------------------------------------------------------------------------
# rebalancing

def _counts_dataset(counts, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(len(counts)), counts)
    X = rng.random((len(y), 32, 32, 3))
    return Dataset(X, y, len(counts))


def test_rebalance_leaves_balanced_set_alone():
    ds = _counts_dataset([5, 5, 5])
    out = rebalance(ds, np.random.default_rng(0))
    assert np.array_equal(out.class_histogram, [5, 5, 5])
    assert np.array_equal(out.X, ds.X)


def test_rebalance_10_20_30():
    ds = _counts_dataset([10, 20, 30])
    out = rebalance(ds, np.random.default_rng(0))
    assert np.array_equal(out.class_histogram, [20, 20, 30])
    assert np.array_equal(out.X[:60], ds.X)
    assert np.all(out.origin[60:] == "augmented")
    assert all(root_source_id(s) in ds.source_ids[:10] for s in out.source_ids[60:])


@given(st.lists(st.integers(1, 12), min_size=2, max_size=6), st.integers(0, 1000))
def test_rebalance_invariants(counts, seed):
    ds = _counts_dataset(counts, seed)
    out = rebalance(ds, np.random.default_rng(seed))
    before = ds.class_histogram
    after = out.class_histogram
    assert after.min() >= before.mean()
    assert np.all(after >= before)
    # classes already at or above the mean are untouched
    assert np.array_equal(after[before >= before.mean()], before[before >= before.mean()])
    assert out.source_ids[:len(ds)] == ds.source_ids
    assert out.X.min() >= 0.0 and out.X.max() <= 1.0


def test_rebalance_rejects_empty_class():
    ds = Dataset(np.zeros((2, 32, 32, 3)), [0, 0], 2)
    with pytest.raises(DataError):
        rebalance(ds, np.random.default_rng(0))


# --------------------------------------------------------------------------
# GTSRB loader

HEADER = ["Filename", "Width", "Height", "Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2", "ClassId"]


def _write_split(root, split, entries, extra_rows=()):
    d = root / split
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter=";")
        w.writerow(HEADER)
        for name, size, cls, colour in entries:
            Image.new("RGB", (size, size), colour).save(d / name)
            w.writerow([name, size, size, 0, 0, size - 1, size - 1, cls])
        for row in extra_rows:
            w.writerow(row)


def _fake_tree(root, classes=3, size=40):
    train = [(f"c{c}_{k}.png", size, c, (10 * c, 100, 200)) for c in range(classes) for k in range(2)]
    test = [(f"t{c}.png", size, c, (10 * c, 100, 200)) for c in range(classes)]
    _write_split(root, "Train", train)
    _write_split(root, "Test", test)


def test_gtsrb_counts_43_classes(tmp_path):
    _fake_tree(tmp_path, classes=43)
    train, test = load_gtsrb(tmp_path)
    assert train.num_classes == test.num_classes == 43
    assert len(train) == 86 and len(test) == 43
    assert set(train.origin) == {"real"}


def test_gtsrb_drops_small_and_resizes(tmp_path):
    train = [("big.png", 40, 0, (255, 0, 0)), ("small.png", 20, 1, (0, 255, 0)), ("b1.png", 50, 1, (0, 0, 255))]
    _write_split(tmp_path, "Train", train)
    _write_split(tmp_path, "Test", [("t.png", 40, 0, (255, 0, 0))])
    tr, _ = load_gtsrb(tmp_path)
    assert len(tr) == 2
    assert tr.X.shape == (2, 32, 32, 3)
    # a constant-colour image stays constant after the resize
    np.testing.assert_allclose(tr.X[0], np.broadcast_to([1.0, 0.0, 0.0], (32, 32, 3)), atol=1e-12)


def test_gtsrb_empty_class_after_filter_is_fatal(tmp_path):
    train = [("big.png", 40, 0, (255, 0, 0)), ("small.png", 20, 1, (0, 255, 0)), ("b2.png", 40, 2, (0, 0, 255))]
    _write_split(tmp_path, "Train", train)
    _write_split(tmp_path, "Test", [("t.png", 40, 0, (255, 0, 0))])
    with pytest.raises(DataError, match=r"\[1\]"):
        load_gtsrb(tmp_path)


def test_gtsrb_malformed_row_warns_with_row_number(tmp_path):
    _fake_tree(tmp_path, classes=2)
    _write_split(tmp_path, "Train", [(f"c{c}.png", 40, c, (0, 0, 0)) for c in range(2)],
                 extra_rows=[["broken.png", "forty", 40, 0, 0, 39, 39, 1]])
    with pytest.warns(UserWarning, match="row 4"):
        train, _ = load_gtsrb(tmp_path)
    assert len(train) == 2


def test_gtsrb_unreadable_image_warns(tmp_path):
    _fake_tree(tmp_path, classes=2)
    d = tmp_path / "Train"
    (d / "junk.png").write_bytes(b"not an image")
    with open(d / "annotations.csv", "a", newline="") as fh:
        csv.writer(fh, delimiter=";").writerow(["junk.png", 40, 40, 0, 0, 39, 39, 0])
    with pytest.warns(UserWarning, match="unreadable"):
        train, _ = load_gtsrb(tmp_path)
    assert len(train) == 4


def test_gtsrb_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_gtsrb(tmp_path / "absent")


def test_gtsrb_missing_split_dir(tmp_path):
    _write_split(tmp_path, "Train", [("a.png", 40, 0, (0, 0, 0))])
    with pytest.raises(DataError, match="test"):
        load_gtsrb(tmp_path)


# --------------------------------------------------------------------------
# cache container

def test_cache_round_trip(tmp_path, tiny_data):
    train, _ = tiny_data
    ds = rebalance(train, np.random.default_rng(0))
    digest = save_dataset(ds, tmp_path / "d.sfd")
    back = load_dataset(tmp_path / "d.sfd")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert list(back.origin) == list(ds.origin)
    assert back.source_ids == ds.source_ids
    assert back.content_hash() == ds.content_hash() == digest


def test_cache_rejects_bad_magic(tiny_data):
    data = bytearray(dump_dataset_bytes(tiny_data[1]))
    data[0] ^= 0xFF
    with pytest.raises(DataError, match="magic"):
        load_dataset_bytes(bytes(data))


def test_cache_rejects_truncation(tiny_data):
    data = dump_dataset_bytes(tiny_data[1])
    with pytest.raises(DataError):
        load_dataset_bytes(data[:-100])


def test_cache_rejects_histogram_mismatch(tiny_data):
    ds = tiny_data[1]
    data = bytearray(dump_dataset_bytes(ds))
    split_len = len(ds.split)
    hist_at = 16 + split_len
    data[hist_at] ^= 0x01
    with pytest.raises(DataError, match="histogram"):
        load_dataset_bytes(bytes(data))


def test_dataset_validates_lengths_and_labels():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 32, 32, 3)), [0], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 32, 32, 3)), [5], 2)
