"""Face-image corpora: loading, cropping, access-level labels and splits.

Images are stored as one float64 array of shape ``(n, h, w)`` with values in
[0, 1]. Datasets are immutable; every operation returns a new one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ImageDataset:
    images: np.ndarray
    subject_ids: np.ndarray
    access_labels: np.ndarray
    num_levels: int = 1
    name: str = ""

    def __post_init__(self):
        images = _frozen(self.images, np.float64)
        if images.ndim != 3:
            raise DatasetError(f"images must be (n, h, w), got shape {images.shape}")
        subjects = _frozen(self.subject_ids, np.int64)
        labels = _frozen(self.access_labels, np.int64)
        n = len(images)
        if len(subjects) != n or len(labels) != n:
            raise DatasetError("images, subject_ids and access_labels differ in length")
        if images.size and (not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1):
            raise DatasetError("pixel values must be finite and within [0, 1]")
        if self.num_levels < 1:
            raise DatasetError("num_levels must be at least 1")
        if n and (labels.min() < 0 or labels.max() >= self.num_levels):
            raise DatasetError(f"access labels must lie in [0, {self.num_levels - 1}]")
        for s in np.unique(subjects):
            if len(np.unique(labels[subjects == s])) > 1:
                raise DatasetError(f"subject {s} carries more than one access label")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "subject_ids", subjects)
        object.__setattr__(self, "access_labels", labels)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    @property
    def pixel_count(self):
        return int(self.images.shape[1] * self.images.shape[2])

    @property
    def subjects(self):
        return np.unique(self.subject_ids)

    def subset(self, index, name=None):
        index = np.asarray(index, dtype=np.int64)
        return ImageDataset(self.images[index], self.subject_ids[index], self.access_labels[index],
                            self.num_levels, self.name if name is None else name)


@dataclass(frozen=True)
class SplitPair:
    train: ImageDataset
    test: ImageDataset


# -- graymap I/O ---------------------------------------------------------------

def _header_tokens(data, path, count):
    """Read ``count`` whitespace-separated header tokens, skipping '#' comments."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i >= len(data):
            raise DatasetError(f"{path}: truncated graymap header")
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        tokens.append(data[start:i])
    return tokens, i


def read_pgm(path):
    """Parse a binary (P5) graymap; returns ``(pixels uint8/uint16 array, maxval)``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise DatasetError(f"{path}: not a binary graymap (magic {data[:2]!r})")
    tokens, i = _header_tokens(data, path, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: corrupt graymap header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DatasetError(f"{path}: corrupt graymap header")
    if i >= len(data) or not data[i:i + 1].isspace():
        raise DatasetError(f"{path}: corrupt graymap header")
    i += 1  # exactly one whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = data[i:i + need]
    if len(raster) < need:
        raise DatasetError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    if pixels.max(initial=0) > maxval:
        raise DatasetError(f"{path}: pixel exceeds maxval {maxval}")
    return pixels, maxval


def write_pgm(path, pixels, maxval=255):
    """Write an 8-bit P5 graymap from integer ``pixels`` of shape (h, w)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("graymap pixels must be 2-D")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval or maxval > 255:
        raise ValueError("pixel values out of 8-bit range")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + pixels.astype(np.uint8).tobytes())


def load_pgm_image(path):
    pixels, maxval = read_pgm(path)
    return pixels.astype(np.float64) / maxval


# -- loaders -----------------------------------------------------------------

def _stack(paths, subject_ids, name):
    images = []
    shape = None
    for p in paths:
        img = load_pgm_image(p)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError(f"{p}: shape {img.shape} differs from {shape} of earlier images")
        images.append(img)
    return ImageDataset(np.stack(images), subject_ids, np.zeros(len(images), dtype=np.int64), 1, name)


def load_image_directory(root, pattern="*.pgm"):
    """Load ``<root>/<subject>/<image>.pgm``; subjects numbered in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    subjects = sorted(d for d in root.iterdir() if d.is_dir())
    paths, ids = [], []
    for sid, d in enumerate(subjects):
        files = sorted(f for f in d.glob(pattern) if f.is_file())
        if not files:
            continue
        paths.extend(files)
        ids.extend([sid] * len(files))
    if not paths:
        raise DatasetError(f"no subjects found under {root}")
    return _stack(paths, ids, root.name)


def load_manifest(csv_path):
    """Load images listed in a CSV with columns ``path,subject_id`` (paths relative to the CSV)."""
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DatasetError(f"manifest {csv_path} does not exist")
    paths, ids = [], []
    with csv_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"path", "subject_id"} - set(reader.fieldnames):
            raise DatasetError(f"{csv_path}: manifest needs columns path,subject_id")
        for row in reader:
            p = Path(row["path"])
            paths.append(p if p.is_absolute() else csv_path.parent / p)
            ids.append(int(row["subject_id"]))
    if not paths:
        raise DatasetError(f"no subjects found in {csv_path}")
    return _stack(paths, ids, csv_path.stem)


# -- transforms --------------------------------------------------------------

def center_crop_offsets(h, w, crop_h, crop_w):
    if crop_h > h or crop_w > w or crop_h < 1 or crop_w < 1:
        raise DatasetError(f"crop {crop_h}x{crop_w} does not fit images of {h}x{w}")
    return (h - crop_h) // 2, (w - crop_w) // 2


def preprocess(ds: ImageDataset, crop_h, crop_w):
    """Center-crop every image to ``crop_h x crop_w``."""
    h, w = ds.shape
    top, left = center_crop_offsets(h, w, crop_h, crop_w)
    images = ds.images[:, top:top + crop_h, left:left + crop_w]
    return ImageDataset(images, ds.subject_ids, ds.access_labels, ds.num_levels, ds.name)


def assign_access_levels(ds: ImageDataset, m, seed):
    """Randomly partition subjects into ``m`` groups of near-equal size."""
    subjects = ds.subjects
    if m < 1:
        raise DatasetError("m must be at least 1")
    if m > len(subjects):
        raise DatasetError(f"cannot split {len(subjects)} subjects into {m} access levels")
    order = np.random.default_rng(seed).permutation(subjects)
    level = {}
    for g, members in enumerate(np.array_split(order, m)):
        for s in members:
            level[int(s)] = g
    labels = np.array([level[int(s)] for s in ds.subject_ids], dtype=np.int64)
    return ImageDataset(ds.images, ds.subject_ids, labels, m, ds.name)


def per_subject_test_count(fraction, count):
    """Per-subject test count, ceil(fraction * count) in exact rational arithmetic."""
    return math.ceil(Fraction(fraction).limit_denominator(10**9) * count)


def split_train_test(ds: ImageDataset, test_fraction, seed):
    """Per-subject random split; every subject lands in both halves."""
    if not 0 < test_fraction < 1:
        raise DatasetError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    test_idx = []
    for s in ds.subjects:
        idx = np.flatnonzero(ds.subject_ids == s)
        k = per_subject_test_count(test_fraction, len(idx))
        if len(idx) < 2 or k >= len(idx):
            raise DatasetError(f"subject {s} has {len(idx)} image(s); cannot place it in both splits")
        test_idx.extend(rng.choice(idx, size=k, replace=False).tolist())
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[test_idx] = True
    return SplitPair(ds.subset(np.flatnonzero(~test_mask), f"{ds.name}/train"),
                     ds.subset(np.flatnonzero(test_mask), f"{ds.name}/test"))


# -- synthetic corpus ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_subjects: int = 4
    images_per_subject: int = 10
    h: int = 16
    w: int = 16
    noise_std: float = 0.1
    seed: int = 0
    low: float = 0.2  # template value range
    high: float = 0.8
    frequencies: int = 4  # cosine modes per axis


def synth_templates(spec: SyntheticSpec):
    """Seeded low-frequency base pattern per subject, shape (num_subjects, h, w)."""
    if spec.h < 8 or spec.w < 8:
        raise DatasetError("synthetic images must be at least 8x8")
    rng = np.random.default_rng([spec.seed, 0])
    f = spec.frequencies
    ci = np.cos(np.pi * np.outer(np.arange(f), np.arange(spec.h) + 0.5) / spec.h)  # (f, h)
    cj = np.cos(np.pi * np.outer(np.arange(f), np.arange(spec.w) + 0.5) / spec.w)  # (f, w)
    out = np.empty((spec.num_subjects, spec.h, spec.w))
    for s in range(spec.num_subjects):
        coef = rng.normal(size=(f, f))
        coef[0, 0] = 0.0
        t = np.einsum("uv,ui,vj->ij", coef, ci, cj)
        t = (t - t.min()) / (t.max() - t.min())
        out[s] = spec.low + (spec.high - spec.low) * t
    return out


def synth_dataset(spec: SyntheticSpec, name="synthetic"):
    if spec.noise_std < 0:
        raise DatasetError("noise_std must be non-negative")
    templates = synth_templates(spec)
    rng = np.random.default_rng([spec.seed, 1])
    k = spec.images_per_subject
    base = np.repeat(templates, k, axis=0)
    noise = rng.normal(scale=spec.noise_std, size=base.shape) if spec.noise_std > 0 else 0.0
    images = np.clip(base + noise, 0.0, 1.0)
    ids = np.repeat(np.arange(spec.num_subjects), k)
    return ImageDataset(images, ids, np.zeros(len(ids), dtype=np.int64), 1, name)


def mean_image(ds: ImageDataset):
    if len(ds) == 0:
        raise DatasetError("mean of an empty dataset")
    return ds.images.mean(axis=0)
