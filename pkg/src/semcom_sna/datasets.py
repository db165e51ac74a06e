"""Dataset ingestion: GTSRB traffic signs, CCPD plate crops and a synthetic stand-in.

All loaders return a :class:`DatasetSplit` holding sklearn-style arrays
(``X`` of shape ``(n, 3, H, W)`` in [0, 1], ``y`` labels).  Class-label
datasets use integer ``y``; plate datasets use ``y`` as a list of strings.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ._validation import ContractError, check_images, content_digest

logger = logging.getLogger(__name__)

GTSRB_NUM_CLASSES = 43
GTSRB_IMAGE_SIZE = 32
PLATE_HEIGHT = 24
PLATE_WIDTH = 94

# CCPD index tables, in the order the filenames encode them.
CCPD_PROVINCES = [
    "皖", "沪", "津", "渝", "冀", "晋", "蒙", "辽", "吉", "黑", "苏", "浙", "京", "闽", "赣", "鲁", "豫",
    "鄂", "湘", "粤", "桂", "琼", "川", "贵", "云", "藏", "陕", "甘", "青", "宁", "新", "警", "学", "O",
]
CCPD_ALPHABETS = [
    "A", "B", "C", "D", "E", "F", "G", "H", "J", "K", "L", "M", "N", "P", "Q", "R", "S", "T", "U",
    "V", "W", "X", "Y", "Z", "O",
]
CCPD_ADS = CCPD_ALPHABETS[:-1] + [str(d) for d in range(10)] + ["O"]
# "O" marks an absent character in CCPD names and is not a plate symbol.
CCPD_PLACEHOLDER = "O"

BLANK = "-"
PLATE_ALPHABET: tuple[str, ...] = (
    (BLANK,)
    + tuple(CCPD_PROVINCES[:-1])
    + tuple(CCPD_ALPHABETS[:-1])
    + tuple(str(d) for d in range(10))
)


class IngestionError(RuntimeError):
    """A dataset source is missing or unusable."""


class ParseError(ValueError):
    """A CCPD filename does not follow the annotation convention."""


class PreprocessingError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class PlateSample:
    pixels: np.ndarray
    chars: str

    def __post_init__(self):
        if len(self.chars) < 1:
            raise ContractError("plate must contain at least one symbol")
        bad = [c for c in self.chars if c not in PLATE_ALPHABET or c == BLANK]
        if bad:
            raise ContractError(f"symbols {bad} are not in the plate alphabet")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ContractError("samples_per_class must be >= 1")
        if self.image_size < 8:
            raise ContractError("image_size must be >= 8")


@dataclass(frozen=True)
class DatasetSplit:
    """Immutable train/test partition.

    ``y_*`` is an int64 array for classification data and a tuple of
    strings for plate data.
    """

    X_train: np.ndarray
    y_train: np.ndarray | tuple
    X_test: np.ndarray
    y_test: np.ndarray | tuple
    seed: int
    task: str = "classification"
    num_classes: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.X_train, self.X_test, self.y_train, self.y_test):
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.X_train.shape[1:])

    def train_samples(self):
        return list(_iter_samples(self.X_train, self.y_train, self.task))

    def test_samples(self):
        return list(_iter_samples(self.X_test, self.y_test, self.task))

    def digest(self) -> str:
        if self.task == "classification":
            return content_digest(self.X_train, self.y_train, self.X_test, self.y_test)
        return content_digest(
            self.X_train, self.X_test, extra=["\x1f".join(self.y_train), "\x1e", "\x1f".join(self.y_test)]
        )

    def manifest(self) -> dict:
        """Per-class counts, preprocessing parameters and the content digest."""

        def counts(y):
            c = Counter(int(v) if self.task == "classification" else len(v) for v in y)
            return {str(k): c[k] for k in sorted(c)}

        key = "class_counts" if self.task == "classification" else "length_counts"
        return {
            "task": self.task,
            "seed": self.seed,
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "n_train": int(len(self.y_train)),
            "n_test": int(len(self.y_test)),
            key: {"train": counts(self.y_train), "test": counts(self.y_test)},
            "preprocessing": self.params,
            "digest": self.digest(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                X_train=self.X_train,
                y_train=np.asarray(self.y_train),
                X_test=self.X_test,
                y_test=np.asarray(self.y_test),
                meta=np.asarray(json.dumps({
                    "seed": self.seed, "task": self.task,
                    "num_classes": self.num_classes, "params": self.params,
                })),
            )
        return path

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            y_train, y_test = data["y_train"], data["y_test"]
            if meta["task"] != "classification":
                y_train, y_test = tuple(str(s) for s in y_train), tuple(str(s) for s in y_test)
            return cls(
                X_train=data["X_train"].copy(), y_train=y_train.copy() if isinstance(y_train, np.ndarray) else y_train,
                X_test=data["X_test"].copy(), y_test=y_test.copy() if isinstance(y_test, np.ndarray) else y_test,
                seed=meta["seed"], task=meta["task"], num_classes=meta["num_classes"], params=meta["params"],
            )


def _iter_samples(X, y, task):
    for pixels, label in zip(X, y):
        if task == "classification":
            yield LabeledImage(pixels, int(label))
        else:
            yield PlateSample(pixels, str(label))


def split_dataset(X, y, fraction: float = 0.8, seed: int = 0, **split_kwargs) -> DatasetSplit:
    """Deterministically shuffle ``(X, y)`` by ``seed`` and cut off ``round(fraction * n)`` for training."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    X = np.asarray(X, dtype=np.float32)
    n = len(X)
    if len(y) != n:
        raise ContractError("X and y lengths differ")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    tr, te = order[:n_train], order[n_train:]
    if isinstance(y, np.ndarray) and y.dtype.kind in "iu":
        y_tr, y_te = y[tr].astype(np.int64), y[te].astype(np.int64)
    else:
        y = list(y)
        y_tr, y_te = tuple(y[i] for i in tr), tuple(y[i] for i in te)
    return DatasetSplit(X[tr], y_tr, X[te], y_te, seed=seed, **split_kwargs)


# --------------------------------------------------------------------------- synthetic


def _class_glyphs(num_classes: int, rng: np.random.Generator, grid: int = 5) -> np.ndarray:
    """Distinct random binary glyphs, pairwise Hamming distance >= grid."""
    glyphs: list[np.ndarray] = []
    while len(glyphs) < num_classes:
        g = rng.random((grid, grid)) < 0.5
        if g.sum() < grid * grid // 4 or g.sum() > 3 * grid * grid // 4:
            continue
        if all(np.sum(g != h) >= grid for h in glyphs):
            glyphs.append(g)
    return np.stack(glyphs).astype(np.float32)


def _render(glyph: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    grid = glyph.shape[0]
    cell = max(1, int(round(0.7 * size / grid)))
    box = cell * grid
    big = np.kron(glyph, np.ones((cell, cell), dtype=np.float32))
    slack = size - box
    top = int(rng.integers(0, slack + 1))
    left = int(rng.integers(0, slack + 1))
    mask = np.zeros((size, size), dtype=np.float32)
    mask[top:top + box, left:left + box] = big

    fg = rng.uniform(0.55, 0.95, size=3).astype(np.float32)
    bg = rng.uniform(0.05, 0.45, size=3).astype(np.float32)
    if rng.random() < 0.5:
        fg, bg = bg, fg
    img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
    img += rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_synthetic(spec: SyntheticSpec) -> DatasetSplit:
    """Render ``num_classes`` glyph classes with positional, colour and noise jitter; 80/20 split."""
    rng = np.random.default_rng(spec.seed)
    glyphs = _class_glyphs(spec.num_classes, rng)
    X = np.empty((spec.num_classes * spec.samples_per_class, 3, spec.image_size, spec.image_size), np.float32)
    y = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    for i, label in enumerate(y):
        X[i] = _render(glyphs[label], spec.image_size, rng)
    return split_dataset(
        X, y, 0.8, spec.seed, task="classification", num_classes=spec.num_classes,
        params={"source": "synthetic", "num_classes": spec.num_classes,
                "samples_per_class": spec.samples_per_class, "image_size": spec.image_size},
    )


def make_synthetic_plates(n_samples: int = 500, seed: int = 0, plate_length: int = 7,
                          symbols: Sequence[str] | None = None) -> DatasetSplit:
    """Render random symbol strings as 24x94 plate images using per-symbol glyphs."""
    if symbols is None:
        symbols = [s for s in PLATE_ALPHABET if s != BLANK][-10:]
    symbols = list(symbols)
    rng = np.random.default_rng(seed)
    glyph_rng = np.random.default_rng(seed + 1)
    glyphs = {s: (glyph_rng.random((5, 3)) < 0.5).astype(np.float32) for s in symbols}
    cell_w, cell_h = 3, 3
    X = np.empty((n_samples, 3, PLATE_HEIGHT, PLATE_WIDTH), np.float32)
    y = []
    for i in range(n_samples):
        chars = "".join(rng.choice(symbols, size=plate_length))
        canvas = np.zeros((PLATE_HEIGHT, PLATE_WIDTH), np.float32)
        x0 = int(rng.integers(1, 6))
        y0 = int(rng.integers(2, PLATE_HEIGHT - 5 * cell_h - 1))
        step = 3 * cell_w + 3
        for k, c in enumerate(chars):
            g = np.kron(glyphs[c], np.ones((cell_h, cell_w), np.float32))
            x = x0 + k * step
            canvas[y0:y0 + g.shape[0], x:x + g.shape[1]] = g
        fg, bg = np.float32(0.9), np.float32(0.15)
        img = bg + (fg - bg) * np.repeat(canvas[None], 3, axis=0)
        img += rng.normal(0.0, 0.04, img.shape).astype(np.float32)
        X[i] = np.clip(img, 0.0, 1.0)
        y.append(chars)
    return split_dataset(X, y, 0.8, seed, task="plate_recognition",
                         params={"source": "synthetic_plates", "plate_length": plate_length,
                                 "symbols": "".join(symbols)})


# --------------------------------------------------------------------------- GTSRB


def _read_image(path: Path, size: tuple[int, int]) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize(size, Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        warnings.warn(f"skipping unreadable image {path}: {exc}")
        return None
    return arr.transpose(2, 0, 1).copy()


def _read_gt_csv(csv_path: Path) -> list[tuple[str, int]]:
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=";")
        return [(row["Filename"], int(row["ClassId"])) for row in reader]


def _decode_all(entries: list[tuple[Path, int]], size: tuple[int, int], workers: int):
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        images = list(pool.map(lambda e: _read_image(e[0], size), entries))
    X, y, skipped = [], [], 0
    for img, (_, label) in zip(images, entries):
        if img is None:
            skipped += 1
            continue
        X.append(img)
        y.append(label)
    return X, y, skipped


def load_gtsrb(root_path, seed: int = 0, *, image_size: int = GTSRB_IMAGE_SIZE,
               fraction: float = 0.8, workers: int = 4) -> DatasetSplit:
    """Ingest a GTSRB archive (class folders ``00000``..``00042`` each holding ``GT-*.csv``).

    If an official test annotation (``GT-final_test.csv``) is present under
    ``root_path`` it defines the test set; otherwise the training images are
    split by ``seed``.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"GTSRB root {root} does not exist")
    train_entries: list[tuple[Path, int]] = []
    for csv_path in sorted(root.rglob("GT-*.csv")):
        if csv_path.name.lower() == "gt-final_test.csv":
            continue
        for fname, label in _read_gt_csv(csv_path):
            train_entries.append((csv_path.parent / fname, label))
    if not train_entries:
        raise IngestionError(f"no GTSRB class annotations found under {root}")
    train_entries.sort(key=lambda e: str(e[0]))

    size = (image_size, image_size)
    X, y, skipped = _decode_all(train_entries, size, workers)
    params = {"source": "gtsrb", "root": str(root), "image_size": image_size, "skipped": skipped}

    test_csv = sorted(root.rglob("GT-final_test.csv"))
    if test_csv:
        test_entries = sorted(
            ((test_csv[0].parent / f, lab) for f, lab in _read_gt_csv(test_csv[0])), key=lambda e: str(e[0])
        )
        Xt, yt, skipped_t = _decode_all(test_entries, size, workers)
        params.update(protocol="official", skipped=skipped + skipped_t)
        split = DatasetSplit(np.stack(X), np.asarray(y, np.int64), np.stack(Xt), np.asarray(yt, np.int64),
                             seed=seed, num_classes=GTSRB_NUM_CLASSES, params=params)
    else:
        if not X:
            raise IngestionError(f"no readable GTSRB images under {root}")
        params.update(protocol="seed_split", fraction=fraction)
        order = np.random.default_rng(seed).permutation(len(X))
        n_train = int(round(fraction * len(X)))
        Xa, ya = np.stack(X), np.asarray(y, np.int64)
        split = DatasetSplit(Xa[order[:n_train]], ya[order[:n_train]], Xa[order[n_train:]], ya[order[n_train:]],
                             seed=seed, num_classes=GTSRB_NUM_CLASSES, params=params)
    if skipped:
        logger.warning("skipped %d unreadable GTSRB images", skipped)
    hist = np.bincount(split.y_train, minlength=GTSRB_NUM_CLASSES)
    logger.info("GTSRB train class histogram: %s", hist.tolist())
    return split


# --------------------------------------------------------------------------- CCPD


def parse_ccpd_annotation(filename: str) -> tuple[np.ndarray, str]:
    """Decode corner points and plate characters from a CCPD image filename.

    Returns ``(quad, chars)`` where ``quad`` is a (4, 2) float array of
    ``(x, y)`` pixel coordinates in CCPD order (bottom-right first).
    """
    stem = Path(filename).name
    stem = stem.rsplit(".", 1)[0] if "." in stem else stem
    fields = stem.split("-")
    if len(fields) < 5:
        raise ParseError(f"{filename!r}: expected at least 5 '-'-separated fields, got {len(fields)}")
    vertex_field, chars_field = fields[3], fields[4]

    try:
        points = [tuple(float(v) for v in p.split("&")) for p in vertex_field.split("_")]
    except ValueError:
        raise ParseError(f"{filename!r}: malformed vertex field {vertex_field!r}") from None
    if len(points) != 4 or any(len(p) != 2 for p in points):
        raise ParseError(f"{filename!r}: vertex field {vertex_field!r} must hold 4 x&y points")

    try:
        indices = [int(v) for v in chars_field.split("_")]
    except ValueError:
        raise ParseError(f"{filename!r}: malformed character field {chars_field!r}") from None
    if len(indices) < 2:
        raise ParseError(f"{filename!r}: character field {chars_field!r} too short")
    tables = [CCPD_PROVINCES, CCPD_ALPHABETS] + [CCPD_ADS] * (len(indices) - 2)
    chars = []
    for pos, (idx, table) in enumerate(zip(indices, tables)):
        if not 0 <= idx < len(table):
            raise ParseError(f"{filename!r}: character field index {idx} at position {pos} out of range")
        if table[idx] == CCPD_PLACEHOLDER:
            raise ParseError(f"{filename!r}: character field position {pos} holds the placeholder symbol")
        chars.append(table[idx])
    return np.asarray(points, dtype=np.float64), "".join(chars)


def encode_ccpd_chars(chars: str) -> str:
    """Inverse of the character-field decoding in :func:`parse_ccpd_annotation`."""
    tables = [CCPD_PROVINCES, CCPD_ALPHABETS] + [CCPD_ADS] * (len(chars) - 2)
    return "_".join(str(table.index(c)) for c, table in zip(chars, tables))


def _as_chw(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3:
        raise ContractError(f"image must be 3-D, got shape {img.shape}")
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    if img.shape[0] != 3 and img.shape[-1] == 3:
        img = img.transpose(2, 0, 1)
    return np.ascontiguousarray(img, dtype=np.float32)


def crop_and_resize_plate(image, plate_quad, out_size: tuple[int, int] = (PLATE_HEIGHT, PLATE_WIDTH)) -> np.ndarray:
    """Crop the axis-aligned bounding box of ``plate_quad`` and resize it to 24x94.

    ``image`` is (3, H, W) floats in [0, 1] or (H, W, 3) uint8.
    """
    img = _as_chw(image)
    _, H, W = img.shape
    quad = np.asarray(plate_quad, dtype=np.float64).reshape(4, 2)
    if quad[:, 0].min() < 0 or quad[:, 1].min() < 0 or quad[:, 0].max() > W or quad[:, 1].max() > H:
        raise PreprocessingError(f"plate quad {quad.tolist()} exceeds image bounds {W}x{H}")
    x0, x1 = int(math.floor(quad[:, 0].min())), int(math.ceil(quad[:, 0].max()))
    y0, y1 = int(math.floor(quad[:, 1].min())), int(math.ceil(quad[:, 1].max()))
    if x1 <= x0 or y1 <= y0:
        raise PreprocessingError(f"degenerate plate quad {quad.tolist()}")
    crop = torch.from_numpy(img[:, y0:y1, x0:x1].copy())[None]
    out = F.interpolate(crop, size=out_size, mode="bilinear", align_corners=False, antialias=True)
    return out[0].clamp_(0.0, 1.0).numpy()


def load_ccpd(root_path, seed: int = 0, *, fraction: float = 0.8, workers: int = 4) -> DatasetSplit:
    """Read CCPD images under ``root_path``, crop plates from filename annotations, seed-split."""
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"CCPD root {root} does not exist")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in {".jpg", ".jpeg", ".png"})
    if not files:
        raise IngestionError(f"no CCPD images under {root}")

    def load_one(path: Path):
        try:
            quad, chars = parse_ccpd_annotation(path.name)
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            return crop_and_resize_plate(arr, quad), chars
        except (ParseError, PreprocessingError, OSError) as exc:
            warnings.warn(f"skipping CCPD file {path.name}: {exc}")
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(load_one, files))
    kept = [r for r in results if r is not None]
    skipped = len(results) - len(kept)
    if not kept:
        raise IngestionError(f"no usable CCPD images under {root}")
    if skipped:
        logger.warning("skipped %d CCPD files", skipped)
    X = np.stack([r[0] for r in kept])
    y = [r[1] for r in kept]
    return split_dataset(X, y, fraction, seed, task="plate_recognition",
                         params={"source": "ccpd", "root": str(root), "skipped": skipped,
                                 "plate_size": [PLATE_HEIGHT, PLATE_WIDTH]})


def validate_split(split: DatasetSplit) -> None:
    """Raise if any pixel leaves [0, 1] or a class label is out of range."""
    check_images(split.X_train, name="X_train")
    check_images(split.X_test, name="X_test")
    if split.task == "classification" and split.num_classes is not None:
        for y in (split.y_train, split.y_test):
            if len(y) and (np.min(y) < 0 or np.max(y) >= split.num_classes):
                raise ContractError("label out of range")
