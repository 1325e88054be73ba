"""Sign datasets: GTSRB ingestion, a procedural stand-in, and affine rebalancing."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (32, 32, 3)
ORIGINS = ("real", "augmented", "synthetic")
BASE_POINTS = np.array([[4.0, 4.0], [28.0, 4.0], [4.0, 28.0]])  # (x, y)


class DataError(ValueError):
    """Unusable dataset input."""


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    origin: str = "real"
    source_id: str = ""


@dataclass
class Dataset:
    """Images ``X`` (n, 32, 32, 3) in [0, 1] with integer labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    origin: np.ndarray = None
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.origin is None:
            self.origin = np.array(["real"] * len(self.y), dtype=object)
        else:
            self.origin = np.asarray(self.origin, dtype=object)
        if not self.source_ids:
            self.source_ids = [f"{self.split}-{i}" for i in range(len(self.y))]
        if not (len(self.X) == len(self.y) == len(self.origin) == len(self.source_ids)):
            raise DataError("images, labels, origins and source ids differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return LabeledImage(self.X[i], int(self.y[i]), str(self.origin[i]), self.source_ids[i])

    @property
    def class_histogram(self):
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.split, self.origin[idx],
                       [self.source_ids[i] for i in idx])

    def concat(self, other):
        if other.num_classes != self.num_classes:
            raise DataError("cannot concatenate datasets with different class counts")
        return Dataset(np.concatenate([self.X, other.X]), np.concatenate([self.y, other.y]), self.num_classes,
                       self.split, np.concatenate([self.origin, other.origin]), self.source_ids + other.source_ids)

    def one_per_class(self):
        """Index of the first sample of every class."""
        return np.array([int(np.flatnonzero(self.y == c)[0]) for c in range(self.num_classes)])

    def content_hash(self):
        return hashlib.sha256(dump_dataset_bytes(self)).hexdigest()


def root_source_id(source_id):
    """Identity of the original sample a derived sample came from."""
    return source_id.split("#", 1)[0]


# --------------------------------------------------------------------------
# affine augmentation


def affine_from_points(src, dst):
    """2x3 matrix ``M = [A | B]`` mapping three ``src`` (x, y) points onto ``dst``."""
    P = np.hstack([src, np.ones((3, 1))])
    return np.linalg.solve(P, dst).T


def warp_affine(pixels, M):
    """Warp an HxWxC image by ``M``: output(x') = input(A^-1 (x' - B)), bilinear, zero fill."""
    A, B = M[:, :2], M[:, 2]
    Ainv = np.linalg.inv(A)
    # scipy indexes (row, col) == (y, x); swap axes of the inverse map
    P = np.array([[0, 1], [1, 0]])
    matrix = P @ Ainv @ P
    offset = -(P @ Ainv @ B)
    out = np.stack([
        ndimage.affine_transform(pixels[..., c], matrix, offset=offset, order=1, mode="grid-constant", cval=0.0)
        for c in range(pixels.shape[-1])
    ], axis=-1)
    return np.clip(out, 0.0, 1.0)


def draw_affine(rng, max_jitter=2.0, max_retries=10):
    for _ in range(max_retries):
        dst = BASE_POINTS + rng.uniform(-max_jitter, max_jitter, size=BASE_POINTS.shape)
        M = affine_from_points(BASE_POINTS, dst)
        if abs(np.linalg.det(M[:, :2])) > 1e-6:
            return M
    raise DataError(f"no invertible affine transform after {max_retries} draws")


def random_affine(image, rng, max_jitter=2.0):
    """Jitter the three base points and warp ``image`` by the induced affine map."""
    sample = image if isinstance(image, LabeledImage) else LabeledImage(np.asarray(image, dtype=np.float64), -1)
    M = draw_affine(rng, max_jitter)
    pixels = sample.pixels if max_jitter == 0 else warp_affine(sample.pixels, M)
    return LabeledImage(pixels, sample.label, "augmented", sample.source_id)


def rebalance(train, rng, max_jitter=2.0):
    """Pad every class below the mean class count with affine copies of its members."""
    counts = train.class_histogram
    if np.any(counts == 0):
        raise DataError("rebalance needs at least one sample per class")
    target = counts.mean()
    X, y, origin, ids = [], [], [], []
    for c in range(train.num_classes):
        members = np.flatnonzero(train.y == c)
        for k in range(int(np.ceil(target - counts[c])) if counts[c] < target else 0):
            i = members[rng.integers(len(members))]
            aug = random_affine(train[i], rng, max_jitter)
            X.append(aug.pixels)
            y.append(c)
            origin.append("augmented")
            ids.append(f"{train.source_ids[i]}#aug{k}")
    if not y:
        return train
    extra = Dataset(np.stack(X), np.array(y), train.num_classes, train.split, np.array(origin, dtype=object), ids)
    return train.concat(extra)


# --------------------------------------------------------------------------
# procedural signs

# sign families: (outline shape, border colour, fill colour, symbol colour)
_FAMILIES = (
    ("circle", (0.80, 0.08, 0.08), (0.95, 0.95, 0.95), (0.05, 0.05, 0.05)),
    ("triangle", (0.80, 0.08, 0.08), (0.95, 0.95, 0.95), (0.05, 0.05, 0.05)),
    ("circle", (0.10, 0.25, 0.75), (0.10, 0.25, 0.75), (0.95, 0.95, 0.95)),
    ("diamond", (0.95, 0.95, 0.95), (0.95, 0.75, 0.05), (0.05, 0.05, 0.05)),
    ("circle", (0.25, 0.25, 0.25), (0.95, 0.95, 0.95), (0.45, 0.45, 0.45)),
)
CONTRAST = (0.15, 1.5)
BLUR_MAX = 0.8
_SYMBOLS = ("vbar", "hbar", "two_bars", "slash", "backslash", "dot", "plus", "chevron", "ring", "ell", "tee",
            "corner", "box", "x", "wave", "bars3")
# family of each class, following the GTSRB class order (0-10 prohibitory circles,
# triangles for warnings, 33-40 blue mandatory, 12 the priority diamond, grey "end" signs)
_CLASS_FAMILY = (0,) * 11 + (1, 3, 1, 0, 0, 0, 0) + (1,) * 14 + (4,) + (2,) * 8 + (4, 4)


def _class_design(class_id):
    family = _CLASS_FAMILY[class_id]
    rank = sum(1 for c in range(class_id) if _CLASS_FAMILY[c] == family)
    return _FAMILIES[family], _SYMBOLS[rank % len(_SYMBOLS)]


def _outline(kind, xx, yy, r):
    ax, ay = np.abs(xx), np.abs(yy)
    if kind == "circle":
        return xx ** 2 + yy ** 2 <= r ** 2
    if kind == "diamond":
        return ax + ay <= 1.2 * r
    if kind == "triangle":
        return (yy <= 0.7 * r) & (yy >= -1.05 * r + 1.75 * ax)
    raise ValueError(kind)


def _symbol(kind, xx, yy, s):
    """Thin pictogram of half-extent ``s`` centred at the origin."""
    ax, ay = np.abs(xx), np.abs(yy)
    t = 0.22 * s
    if kind == "vbar":
        return (ax <= t) & (ay <= s)
    if kind == "hbar":
        return (ay <= t) & (ax <= s)
    if kind == "two_bars":
        return (np.abs(ax - 0.45 * s) <= t) & (ay <= s)
    if kind == "slash":
        return (np.abs(xx + yy) <= 1.4 * t) & (ax <= s) & (ay <= s)
    if kind == "backslash":
        return (np.abs(xx - yy) <= 1.4 * t) & (ax <= s) & (ay <= s)
    if kind == "dot":
        return xx ** 2 + yy ** 2 <= (0.45 * s) ** 2
    if kind == "plus":
        return ((ax <= t) & (ay <= s)) | ((ay <= t) & (ax <= s))
    if kind == "chevron":
        return (np.abs(yy + 0.3 * s - (s - ax)) <= 1.4 * t) & (ax <= s)
    if kind == "ring":
        d = np.sqrt(xx ** 2 + yy ** 2)
        return np.abs(d - 0.7 * s) <= t
    if kind == "ell":
        return ((np.abs(xx + 0.5 * s) <= t) & (ay <= s)) | ((np.abs(yy - s + t) <= t) & (np.abs(xx) <= 0.6 * s))
    if kind == "tee":
        return ((ax <= t) & (ay <= s)) | ((np.abs(yy + s - t) <= t) & (ax <= 0.8 * s))
    if kind == "corner":
        return ((np.abs(xx - 0.5 * s) <= t) & (ay <= s)) | ((np.abs(yy + s - t) <= t) & (np.abs(xx) <= 0.6 * s))
    if kind == "box":
        return (np.maximum(ax, ay) <= 0.75 * s) & (np.maximum(ax, ay) >= 0.75 * s - 1.6 * t)
    if kind == "x":
        return ((np.abs(xx + yy) <= 1.4 * t) | (np.abs(xx - yy) <= 1.4 * t)) & (ax <= 0.8 * s) & (ay <= 0.8 * s)
    if kind == "bars3":
        return ((np.abs(xx) <= 0.7 * t) | (np.abs(np.abs(xx) - 0.55 * s) <= 0.7 * t)) & (ay <= s)
    if kind == "wave":
        return (np.abs(yy - 0.35 * s * np.sin(np.pi * xx / (0.6 * s))) <= t) & (ax <= s)
    raise ValueError(kind)


def _coverage(mask, size):
    return mask.reshape(size, 2, size, 2).mean(axis=(1, 3))[..., None]


def render_glyph(class_id, rng, size=32):
    """One procedural road sign of class ``class_id`` over a noisy background.

    Classes in the same family share outline and colours and differ only in
    the inner pictogram, as many real sign classes do.
    """
    family, symbol = _class_design(class_id)
    shape, border, fill, ink = (np.array(v) if not isinstance(v, str) else v for v in family)
    bg = rng.uniform(0.15, 0.55) * np.ones(3) + rng.normal(0, 0.06, 3)
    img = bg + rng.normal(0.0, 0.05, (size, size, 3))
    cx, cy = size / 2 - 0.5 + rng.uniform(-1.5, 1.5, 2)
    r = rng.uniform(11.0, 13.0)
    light = rng.uniform(0.75, 1.05)
    # 2x supersampling for antialiased edges
    s = (np.arange(2 * size) + 0.5) / 2 - 0.5
    yy, xx = np.meshgrid(s - cy, s - cx, indexing="ij")
    outer = _coverage(_outline(shape, xx, yy, r), size)
    inner = _coverage(_outline(shape, xx, yy * 1.0 + (0.12 * r if shape == "triangle" else 0), 0.72 * r), size)
    sym = _coverage(_symbol(symbol, xx, yy + (-0.1 * r if shape == "triangle" else 0), 0.38 * r), size)
    img = img * (1 - outer) + border * light * outer
    img = img * (1 - inner) + fill * light * inner
    img = img * (1 - sym) + ink * light * sym
    img += rng.normal(0.0, 0.02, (size, size, 3)) * outer
    # photometric variation: dim, washed-out and slightly blurred captures
    img = ndimage.gaussian_filter(img, sigma=(rng.uniform(0.0, BLUR_MAX),) * 2 + (0.0,))
    mean = img.mean(axis=(0, 1))
    img = mean + rng.uniform(*CONTRAST) * (img - mean) + rng.uniform(-0.1, 0.1)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(num_classes=8, per_class=200, seed=0, test_fraction=0.2):
    """Deterministic procedural sign dataset split 80/20 per class.

    The training split of every class is thinned by a seeded factor in
    [0.3, 1.0] so the set arrives imbalanced; the test split stays balanced.
    """
    if not 2 <= num_classes <= 43:
        raise ValueError("num_classes must lie in [2, 43]")
    n_test = int(round(per_class * test_fraction))
    n_train = per_class - n_test
    factors = np.random.default_rng([seed, 0]).uniform(0.3, 1.0, num_classes)
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for c in range(num_classes):
        rng = np.random.default_rng([seed, 1, c])
        keep = max(1, int(round(n_train * factors[c])))
        for i in range(per_class):
            img = render_glyph(c, rng)
            split, j = ("train", i) if i < n_train else ("test", i - n_train)
            if split == "train" and i >= keep:
                continue
            X, y, ids = parts[split]
            X.append(img)
            y.append(c)
            ids.append(f"syn{seed}-{split}-c{c}-{j}")
    out = []
    for split in ("train", "test"):
        X, y, ids = parts[split]
        out.append(Dataset(np.stack(X), np.array(y), num_classes, split,
                           np.array(["synthetic"] * len(y), dtype=object), ids))
    return tuple(out)


# --------------------------------------------------------------------------
# GTSRB

_SPLIT_DIRS = {
    "train": ("train", "Train", "Training", "Final_Training"),
    "test": ("test", "Test", "Final_Test"),
}


def _load_image(path, roi, size):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if roi is not None:
            im = im.crop(roi)
        im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def _read_annotations(csv_path):
    """Yield ``(row_number, record)`` pairs; malformed rows are warned and skipped."""
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh, delimiter=";")
        header = next(reader, None)
        if header is None:
            return
        cols = {name.strip().lower(): i for i, name in enumerate(header)}
        need = ["filename", "width", "height", "roi.x1", "roi.y1", "roi.x2", "roi.y2", "classid"]
        if any(n not in cols for n in need):
            warnings.warn(f"{csv_path}: header lacks one of {need}; file skipped")
            return
        for row_no, row in enumerate(reader, start=2):
            try:
                rec = {n: row[cols[n]].strip() for n in need}
                for n in need[1:]:
                    rec[n] = int(rec[n])
            except (IndexError, ValueError):
                warnings.warn(f"{csv_path}: malformed annotation at row {row_no}")
                continue
            yield row_no, rec


def _load_split(split_dir, split, min_size, size):
    X, y, ids = [], [], []
    for csv_path in sorted(split_dir.rglob("*.csv")):
        for row_no, rec in _read_annotations(csv_path):
            if rec["width"] < min_size or rec["height"] < min_size:
                continue
            path = csv_path.parent / rec["filename"]
            roi = (rec["roi.x1"], rec["roi.y1"], rec["roi.x2"] + 1, rec["roi.y2"] + 1)
            try:
                X.append(_load_image(path, roi, size))
            except (OSError, ValueError) as exc:
                warnings.warn(f"{path}: unreadable image ({exc})")
                continue
            y.append(rec["classid"])
            ids.append(f"gtsrb-{split}-{path.relative_to(split_dir).as_posix()}")
    return X, y, ids


def load_gtsrb(root_path, min_size=32, size=32):
    """Load GTSRB-layout train/test splits from ``root_path``.

    Each split directory holds semicolon-delimited annotation CSVs next to the
    images they describe. Images smaller than ``min_size`` in either dimension
    are dropped; the rest are ROI-cropped and bilinearly resized.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"GTSRB root not found: {root}")
    loaded = {}
    for split, names in _SPLIT_DIRS.items():
        split_dir = next((root / n for n in names if (root / n).is_dir()), None)
        if split_dir is None:
            raise DataError(f"{root}: no {split} directory (looked for {', '.join(names)})")
        loaded[split] = _load_split(split_dir, split, min_size, size)
    num_classes = max(max(v[1], default=-1) for v in loaded.values()) + 1
    if num_classes < 1:
        raise DataError(f"{root}: no usable images")
    train_counts = np.bincount(loaded["train"][1], minlength=num_classes)
    empty = np.flatnonzero(train_counts == 0)
    if len(empty):
        raise DataError(f"classes with no training images after filtering: {empty.tolist()}")
    out = []
    for split in ("train", "test"):
        X, y, ids = loaded[split]
        X = np.stack(X) if X else np.zeros((0, size, size, 3))
        out.append(Dataset(X, np.array(y, dtype=np.int64), num_classes, split,
                           np.array(["real"] * len(y), dtype=object), ids))
    logger.info("GTSRB: %d train / %d test images over %d classes", len(out[0]), len(out[1]), num_classes)
    return tuple(out)


# --------------------------------------------------------------------------
# cache container

CACHE_MAGIC = b"SFDATA\x00\x01"


def dump_dataset_bytes(ds):
    """Header (class count, split, per-class counts) then one record per sample.

    A record is the label byte, origin byte, length-prefixed source id and
    3072 little-endian float64 pixels.
    """
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    split = ds.split.encode()
    buf.write(struct.pack("<HIH", ds.num_classes, len(ds), len(split)))
    buf.write(split)
    buf.write(ds.class_histogram.astype("<u4").tobytes())
    for i in range(len(ds)):
        sid = ds.source_ids[i].encode()
        buf.write(struct.pack("<BBH", int(ds.y[i]), ORIGINS.index(ds.origin[i]), len(sid)))
        buf.write(sid)
        buf.write(np.ascontiguousarray(ds.X[i], dtype="<f8").tobytes())
    return buf.getvalue()


def load_dataset_bytes(data):
    view = memoryview(data)
    if bytes(view[:8]) != CACHE_MAGIC:
        raise DataError("not a dataset cache (bad magic)")
    try:
        num_classes, n, split_len = struct.unpack_from("<HIH", view, 8)
        pos = 16
        split = bytes(view[pos:pos + split_len]).decode()
        pos += split_len
        counts = np.frombuffer(view[pos:pos + 4 * num_classes], dtype="<u4")
        pos += 4 * num_classes
        X = np.empty((n, *IMAGE_SHAPE))
        y = np.empty(n, dtype=np.int64)
        origin, ids = [], []
        for i in range(n):
            label, org, sid_len = struct.unpack_from("<BBH", view, pos)
            pos += 4
            ids.append(bytes(view[pos:pos + sid_len]).decode())
            pos += sid_len
            X[i] = np.frombuffer(view[pos:pos + 3072 * 8], dtype="<f8").reshape(IMAGE_SHAPE)
            pos += 3072 * 8
            y[i] = label
            origin.append(ORIGINS[org])
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt dataset cache: {exc}") from exc
    ds = Dataset(X, y, num_classes, split, np.array(origin, dtype=object), ids)
    if not np.array_equal(ds.class_histogram, counts):
        raise DataError("dataset cache histogram disagrees with its records")
    return ds


def save_dataset(ds, path):
    data = dump_dataset_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path):
    return load_dataset_bytes(Path(path).read_bytes())
