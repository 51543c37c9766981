"""
Labeled image sets: IDX files and a synthetic shape set whose objects vary
in scale. Images are float32 N,C,H,W in [0, 1]; normalization statistics
travel with the dataset and are applied when batches are cut.
"""

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from vitae.errors import ConfigurationError, DataError, ExportError, FormatError, UsageError


logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SHAPES = ("disk", "square", "triangle")
SUPERSAMPLE = 4
MIN_SHAPE_PIXELS = 2.0


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError("images must be N,C,H,W, got shape {}".format(self.images.shape))
        if len(self.images) != len(self.labels):
            raise DataError("{} images but {} labels".format(len(self.images), len(self.labels)))
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("labels outside [0, {})".format(len(self.class_names)))
        if self.mean is None:
            mean, std = channel_stats(self.images)
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "std", std)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def normalize(self, images):
        c = self.mean.shape[0]
        return (images - self.mean.reshape(1, c, 1, 1)) / self.std.reshape(1, c, 1, 1)

    def denormalize(self, images):
        c = self.mean.shape[0]
        return images * self.std.reshape(1, c, 1, 1) + self.mean.reshape(1, c, 1, 1)

    def with_normalization(self, mean, std):
        return replace(self, mean=np.asarray(mean, dtype=np.float64), std=np.asarray(std, dtype=np.float64))

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.class_names, self.mean, self.std)


def channel_stats(images):
    if len(images) == 0:
        c = images.shape[1]
        return np.zeros(c), np.ones(c)
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    flat = std < 1e-6
    if flat.any():
        logger.warning("channels %s have zero variance; leaving them unscaled", list(np.flatnonzero(flat)))
        std = np.where(flat, 1.0, std)
    return mean, std


# IDX

def _read_idx(path, magic, dims):
    try:
        raw = Path(path).read_bytes()
    except OSError as ex:
        raise FormatError("cannot read {}: {}".format(path, ex.strerror))
    header = 4 + 4 * dims
    if len(raw) < header:
        raise FormatError("{}: truncated header ({} bytes)".format(path, len(raw)))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError("{}: bad magic 0x{:08x}, expected 0x{:08x}".format(path, found, magic))
    shape = struct.unpack(">" + "I" * dims, raw[4:header])
    expected = math.prod(shape)
    payload = len(raw) - header
    if payload < expected:
        raise FormatError("{}: truncated payload, {} of {} bytes".format(path, payload, expected))
    if payload > expected:
        raise FormatError("{}: {} trailing bytes after payload".format(path, payload - expected))
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(shape)


def load_idx(images_path, labels_path, class_names=None):
    """Big-endian IDX pair (u8 images N,H,W and u8 labels N) scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError("{} holds {} images but {} holds {} labels".format(
            images_path, images.shape[0], labels_path, labels.shape[0]))
    if images.shape[0] == 0:
        raise DataError("{}: dataset is empty".format(images_path))
    if class_names is None:
        class_names = tuple(str(i) for i in range(int(labels.max()) + 1))
    logger.info("loaded %d images of %dx%d from %s", images.shape[0], images.shape[1], images.shape[2], images_path)
    return Dataset(images[:, None].astype(np.float32) / np.float32(255.0), labels.astype(np.int64), tuple(class_names))


def write_idx(ds, images_path, labels_path):
    """Export a single-channel dataset as an IDX pair (pixels rounded to u8)."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise DataError("IDX holds single-channel images, dataset has {} channels".format(c))
    if len(ds.labels) and ds.labels.max() > 255:
        raise DataError("IDX labels are bytes; label {} does not fit".format(ds.labels.max()))
    pixels = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(images_path, "wb") as handle:
            handle.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
            handle.write(pixels.tobytes())
        with open(labels_path, "wb") as handle:
            handle.write(struct.pack(">II", LABEL_MAGIC, n))
            handle.write(ds.labels.astype(np.uint8).tobytes())
    except OSError as ex:
        raise ExportError("cannot write {}: {}".format(ex.filename, ex.strerror))
    logger.info("wrote %d images to %s", n, images_path)


# synthetic shapes

def _half_extents(shape, size):
    if shape == "triangle":
        return size / 2.0, size * math.sqrt(3.0) / 4.0
    return size / 2.0, size / 2.0


def _edge(ax, ay, bx, by, x, y):
    return (bx - ax) * (y - ay) - (by - ay) * (x - ax)


def rasterize(shape, size, cx, cy, canvas):
    """Coverage in [0, 1] of one shape, from a SUPERSAMPLE x SUPERSAMPLE grid per pixel."""
    coords = (np.arange(canvas * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(coords, coords)
    half = size / 2.0
    if shape == "disk":
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= half * half
    elif shape == "square":
        inside = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
    elif shape == "triangle":
        rise = size * math.sqrt(3.0) / 4.0
        top, left, right = (cx, cy - rise), (cx - half, cy + rise), (cx + half, cy + rise)
        d1 = _edge(*top, *left, x, y)
        d2 = _edge(*left, *right, x, y)
        d3 = _edge(*right, *top, x, y)
        inside = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
    else:
        raise ConfigurationError("unknown shape {!r}, expected one of {}".format(shape, SHAPES))
    return inside.reshape(canvas, SUPERSAMPLE, canvas, SUPERSAMPLE).mean(axis=(1, 3))


def gen_synthetic(spec):
    """
    Balanced disk/square/triangle set; each sample draws a class, a scale
    in scale_range (fraction of the canvas), and a center keeping the
    shape inside the canvas. Pure function of the spec.
    """
    spec.validate()
    canvas = spec.canvas
    if spec.scale_range[0] * canvas < MIN_SHAPE_PIXELS:
        raise ConfigurationError("shapes at scale {} of a {}px canvas are under {} pixels".format(
            spec.scale_range[0], canvas, MIN_SHAPE_PIXELS))
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.repeat(np.arange(spec.num_classes), spec.samples_per_class))
    images = np.empty((len(labels), 1, canvas, canvas), dtype=np.float32)
    for index, label in enumerate(labels):
        shape = SHAPES[label]
        size = rng.uniform(*spec.scale_range) * canvas
        half_w, half_h = _half_extents(shape, size)
        cx = rng.uniform(half_w, canvas - half_w)
        cy = rng.uniform(half_h, canvas - half_h)
        coverage = rasterize(shape, size, cx, cy, canvas)
        if spec.noise_std > 0:
            coverage = coverage + rng.normal(0.0, spec.noise_std, coverage.shape)
        images[index, 0] = np.clip(coverage, 0.0, 1.0)
    logger.info("generated %d synthetic %dx%d samples (seed %d)", len(labels), canvas, canvas, spec.seed)
    return Dataset(images, labels.astype(np.int64), SHAPES[:spec.num_classes])


# batching

@dataclass(frozen=True, eq=False)
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.labels)


def training_subset(size, seed, fraction=1.0):
    """First floor(fraction * size) entries of a seed-fixed permutation."""
    count = int(math.floor(fraction * size + 1e-9))
    if count < 1:
        raise DataError("fraction {} of {} samples leaves an empty training subset".format(fraction, size))
    return np.random.default_rng(seed).permutation(size)[:count]


def batches(ds, batch_size, seed, epoch, fraction=1.0, normalize=True):
    """Ordered batches of the training subset, reshuffled per (seed, epoch); last partial batch kept."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1, got {}".format(batch_size))
    subset = training_subset(len(ds), seed, fraction)
    order = subset[np.random.default_rng([seed, epoch]).permutation(len(subset))]
    out = []
    for start in range(0, len(order), batch_size):
        indices = order[start:start + batch_size]
        images = ds.images[indices]
        out.append(Batch(ds.normalize(images) if normalize else images, ds.labels[indices], indices))
    return out


def sequential_batches(ds, batch_size, normalize=True):
    """Dataset order, for evaluation."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1, got {}".format(batch_size))
    for start in range(0, len(ds), batch_size):
        indices = np.arange(start, min(start + batch_size, len(ds)))
        images = ds.images[indices]
        yield Batch(ds.normalize(images) if normalize else images, ds.labels[indices], indices)


def load_data(data_cfg):
    """Train and validation sets for a DataConfig; validation shares the train normalization."""
    data_cfg.validate()
    if data_cfg.synthetic is not None:
        spec = data_cfg.synthetic
        train_set = gen_synthetic(spec)
        val_set = None
        if data_cfg.val_samples_per_class:
            val_set = gen_synthetic(replace(spec, samples_per_class=data_cfg.val_samples_per_class, seed=spec.seed + 1))
    else:
        source = data_cfg.idx
        train_set = load_idx(source.train_images, source.train_labels)
        val_set = None
        if source.val_images is not None:
            if source.val_labels is None:
                raise ConfigurationError("data.idx.val_labels: required with val_images")
            val_set = load_idx(source.val_images, source.val_labels, train_set.class_names)
    if val_set is not None:
        val_set = val_set.with_normalization(train_set.mean, train_set.std)
    return train_set, val_set
