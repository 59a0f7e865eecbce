"""Dataset ingestion, standardization, augmentation, and batching.

Supported sources:
  - IDX image/label file pairs (big-endian magics 0x803 / 0x801).
  - CIFAR-10 binary batches (3073-byte records, channel-major pixels).
  - A procedurally generated digit-glyph corpus ("synth") that needs no
    files on disk; it is the offline stand-in for 28x28 digit data and can
    be exported to IDX files.

Images are scaled to [0, 1] on load and then per-channel standardized with
statistics taken from the train split only.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CIFAR_RECORD_BYTES = 3073

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    """Images (n, c, h, w) float32 with integer labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    classes: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )
        if self.images.shape[0] == 0:
            raise DataError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError("label out of range")

    def __len__(self):
        return self.images.shape[0]

    @property
    def in_shape(self):
        return self.images.shape[1:]

    def subset(self, n):
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.classes,
                       self.mean, self.std)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx(path):
    """Parse one IDX file into a uint8 array (images rank 3, labels rank 1)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise DataError(f"{path}: wrong magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx_images(path, images):
    """Write (n, h, w) uint8 images as an IDX file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, labels.shape[0]))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path, split="train", classes=10):
    """Pair an IDX image file with its label file into a Dataset in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: not a label file")
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    imgs = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(imgs, labels.astype(np.int64), split, classes)


def load_mnist(data_dir):
    """Load the standard MNIST file pairs from a directory, standardized."""
    sets = []
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        img_path = os.path.join(data_dir, img_name)
        lbl_path = os.path.join(data_dir, lbl_name)
        sets.append(load_idx(img_path, lbl_path, split))
    return standardize(*sets)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def load_cifar10_batch(path):
    """Parse one CIFAR-10 binary batch into ((n,3,32,32) uint8, labels)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir):
    """Load CIFAR-10 train batches 1-5 plus test_batch, standardized."""
    base = data_dir
    nested = os.path.join(data_dir, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        base = nested
    train_parts = [load_cifar10_batch(os.path.join(base, f"data_batch_{i}.bin"))
                   for i in range(1, 6)]
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    train = Dataset(images.astype(np.float32) / 255.0, labels, "train")
    t_images, t_labels = load_cifar10_batch(os.path.join(base, "test_batch.bin"))
    test = Dataset(t_images.astype(np.float32) / 255.0, t_labels, "test")
    return standardize(train, test)


# ---------------------------------------------------------------------------
# Standardization / augmentation / batching
# ---------------------------------------------------------------------------

def standardize(train, *others):
    """Per-channel standardization; statistics come from the train split only."""
    mean = train.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train.images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std == 0, 1.0, std)
    out = []
    for ds in (train,) + others:
        imgs = ((ds.images - mean[None, :, None, None]) / std[None, :, None, None])
        out.append(Dataset(imgs.astype(np.float32), ds.labels, ds.split, ds.classes,
                           mean.astype(np.float32), std.astype(np.float32)))
    return out if others else out[0]


def hflip(images):
    """Horizontal mirror of a (n, c, h, w) batch."""
    return np.ascontiguousarray(images[:, :, :, ::-1])


def pad_crop(images, offset_y, offset_x, pad=4):
    """Zero-pad `pad` pixels on every side, then crop back at the offset.

    Offsets (pad, pad) recover the original image exactly.
    """
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return padded[:, :, offset_y:offset_y + h, offset_x:offset_x + w]


def augment(batch, policy, rng):
    """Apply an augmentation policy to one (n, c, h, w) batch.

    "flipcrop": independent per-image horizontal flip with probability 0.5,
    then 4-pixel zero-pad and a random crop back to the original size.
    "none": identity.
    """
    if policy == "none":
        return batch
    if policy != "flipcrop":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    n, c, h, w = batch.shape
    out = batch.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    pad = 4
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(n):
        out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out


def iter_batches(dataset, batch_size, rng=None, augment_policy="none", aug_rng=None):
    """Yield (images, labels) batches; shuffled when an rng is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        x = dataset.images[sel]
        if augment_policy != "none":
            x = augment(x, augment_policy, aug_rng if aug_rng is not None else rng)
        yield x, dataset.labels[sel]


# ---------------------------------------------------------------------------
# Procedural digit corpus
# ---------------------------------------------------------------------------

_GLYPHS = [
    (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    (" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "),
    ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
]

_GLYPH_ARRAYS = [
    np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in g], dtype=np.float64)
    for g in _GLYPHS
]


def _bilinear(glyph, u, v):
    """Sample a glyph bitmap at fractional (row=v, col=u), zero outside."""
    gh, gw = glyph.shape
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = u - u0
    fv = v - v0
    out = np.zeros_like(u)
    for dv in (0, 1):
        for du in (0, 1):
            cu = u0 + du
            cv = v0 + dv
            inside = (cu >= 0) & (cu < gw) & (cv >= 0) & (cv < gh)
            wgt = (fu if du else 1 - fu) * (fv if dv else 1 - fv)
            val = np.zeros_like(u)
            val[inside] = glyph[cv[inside], cu[inside]]
            out += wgt * val
    return out


def synth_digits(n, rng, size=28, noise=0.22):
    """Render n jittered digit glyphs: rotation, shear, scale, shift, contrast,
    clutter strokes, and pixel noise.

    Deterministic given the rng state; returns ((n,1,size,size) float32 in
    [0,1], labels int64). The jitter ranges are deliberately aggressive so
    the task stays hard enough that weight precision matters.
    """
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half = (size - 1) / 2.0
    for i in range(n):
        glyph = _GLYPH_ARRAYS[labels[i]]
        theta = rng.uniform(-0.45, 0.45)
        shear = rng.uniform(-0.25, 0.25)
        cell = rng.uniform(2.0, 3.3)
        cy = rng.uniform(-3.5, 3.5)
        cx = rng.uniform(-3.5, 3.5)
        amp = rng.uniform(0.5, 1.0)
        ct, st = np.cos(theta), np.sin(theta)
        dx = xx - half - cx
        dy = yy - half - cy
        u = (ct * dx + st * (dy + shear * dx)) / cell + (glyph.shape[1] - 1) / 2.0
        v = (-st * dx + ct * (dy + shear * dx)) / cell + (glyph.shape[0] - 1) / 2.0
        img = amp * _bilinear(glyph, u, v)
        # clutter: one random bright bar that is not part of the digit
        bar_y = rng.integers(0, size - 1)
        bar_x = rng.integers(0, size - 6)
        img[bar_y:bar_y + rng.integers(1, 3), bar_x:bar_x + rng.integers(3, 7)] += \
            rng.uniform(0.2, 0.5)
        img += rng.normal(0.0, noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return images, labels


def make_synth_datasets(seed, n_train, n_test, size=28):
    """Build standardized train/test splits of the procedural digit corpus."""
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xD161])
    train_x, train_y = synth_digits(n_train, rng, size)
    test_x, test_y = synth_digits(n_test, rng, size)
    return standardize(Dataset(train_x, train_y, "train"),
                       Dataset(test_x, test_y, "test"))


def export_synth_idx(data_dir, seed, n_train, n_test, size=28):
    """Write the procedural corpus as standard MNIST-named IDX file pairs."""
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xD161])
    os.makedirs(data_dir, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        x, y = synth_digits(n, rng, size)
        raw = np.round(x[:, 0] * 255.0).astype(np.uint8)
        img_name, lbl_name = MNIST_FILES[split]
        write_idx_images(os.path.join(data_dir, img_name), raw)
        write_idx_labels(os.path.join(data_dir, lbl_name), y)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def resolve_data_dir(config_dir):
    return config_dir or os.environ.get("DUALPREC_DATA", "")


def load_datasets(config):
    """Load (train, test) for a TrainConfig-like object."""
    if config.dataset == "synth":
        train, test = make_synth_datasets(config.seed, config.synth_train, config.synth_test)
    elif config.dataset == "mnist":
        data_dir = resolve_data_dir(config.data_dir)
        if not data_dir:
            raise DataError("mnist needs --data-dir or DUALPREC_DATA")
        train, test = load_mnist(data_dir)
    elif config.dataset == "cifar10":
        data_dir = resolve_data_dir(config.data_dir)
        if not data_dir:
            raise DataError("cifar10 needs --data-dir or DUALPREC_DATA")
        train, test = load_cifar10(data_dir)
    else:
        raise DataError(f"unknown dataset {config.dataset!r}")
    return train.subset(config.train_limit), test.subset(config.test_limit)
