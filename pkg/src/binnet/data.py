"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and a
deterministic synthetic digit generator that writes genuine IDX files for
desk-scale runs when the real archives are not available.

Pixels are normalized to [-1, 1] as (p / 255) * 2 - 1, identically at train
and eval time.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels, channel-planar


class DataFormatError(ValueError):
    """Malformed dataset file."""


class WrongMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    split: str

    def __len__(self):
        return len(self.labels)


def normalize(pixels):
    return (pixels.astype(np.float32) / 255.0) * 2.0 - 1.0


def read_idx_images(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise WrongMagicError(
            f"{path}: magic 0x{magic:08x}, expected image magic 0x{IDX_IMAGES_MAGIC:08x}"
        )
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise WrongMagicError(
            f"{path}: magic 0x{magic:08x}, expected label magic 0x{IDX_LABELS_MAGIC:08x}"
        )
    if len(raw) != 8 + count:
        raise TruncatedFileError(f"{path}: payload is {len(raw)} bytes, expected {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def _idx_pair(directory, images_name, labels_name, split):
    images = read_idx_images(os.path.join(directory, images_name))
    labels = read_idx_labels(os.path.join(directory, labels_name))
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{split}: {len(images)} images but {len(labels)} labels"
        )
    return Dataset(normalize(images)[:, None, :, :], labels, split)


def load_mnist(directory):
    """Load the MNIST IDX pairs from a directory. Returns (train, test)."""
    train = _idx_pair(directory, "train-images-idx3-ubyte",
                      "train-labels-idx1-ubyte", "train")
    test = _idx_pair(directory, "t10k-images-idx3-ubyte",
                     "t10k-labels-idx1-ubyte", "test")
    return train, test


def _read_cifar_file(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD != 0:
        raise TruncatedFileError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataFormatError(f"{path}: label {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory):
    """Load CIFAR-10 binary batches. Returns (train, test)."""
    train_imgs, train_lbls = [], []
    for i in range(1, 6):
        imgs, lbls = _read_cifar_file(os.path.join(directory, f"data_batch_{i}.bin"))
        train_imgs.append(imgs)
        train_lbls.append(lbls)
    test_imgs, test_lbls = _read_cifar_file(os.path.join(directory, "test_batch.bin"))
    train = Dataset(normalize(np.concatenate(train_imgs)),
                    np.concatenate(train_lbls), "train")
    test = Dataset(normalize(test_imgs), test_lbls, "test")
    return train, test


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# Seven-segment layout on a 28x28 canvas; segments as (r0, c0, r1, c1).
_SEGMENTS = {
    "A": (5, 9, 5, 18),
    "B": (5, 18, 13, 18),
    "C": (13, 18, 22, 18),
    "D": (22, 9, 22, 18),
    "E": (13, 9, 22, 9),
    "F": (5, 9, 13, 9),
    "G": (13, 9, 13, 18),
}
_DIGIT_SEGMENTS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FGBC",
    5: "AFGCD", 6: "AFGEDC", 7: "ABC", 8: "ABCDEFG", 9: "ABCDFG",
}


def _glyph(digit, thickness=2):
    canvas = np.zeros((28, 28), dtype=np.float64)
    rr, cc = np.mgrid[0:28, 0:28]
    for name in _DIGIT_SEGMENTS[digit]:
        r0, c0, r1, c1 = _SEGMENTS[name]
        # distance from each pixel to the segment
        pr, pc = rr - r0, cc - c0
        dr, dc = r1 - r0, c1 - c0
        length2 = dr * dr + dc * dc
        t = np.clip((pr * dr + pc * dc) / length2, 0.0, 1.0)
        dist = np.hypot(pr - t * dr, pc - t * dc)
        canvas = np.maximum(canvas, np.clip(thickness - dist, 0.0, 1.0))
    return canvas


def generate_digit_images(n, seed, jitter=True):
    """Render n seven-segment digit images (uint8, 28x28) with random
    affine jitter, blur and noise. Deterministic for a fixed seed."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    glyphs = [_glyph(d) for d in range(10)]
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 28, 28), dtype=np.uint8)
    center = np.array([13.5, 13.5])
    for k in range(n):
        img = glyphs[labels[k]]
        if jitter:
            angle = rng.uniform(-0.25, 0.25)
            scale = rng.uniform(0.85, 1.15)
            shear = rng.uniform(-0.1, 0.1)
            shift = rng.uniform(-2.0, 2.0, size=2)
            rot = np.array([[np.cos(angle), -np.sin(angle)],
                            [np.sin(angle), np.cos(angle)]])
            mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) / scale
            offset = center - mat @ (center + shift)
            img = ndimage.affine_transform(img, mat, offset=offset, order=1)
            img = ndimage.gaussian_filter(img, rng.uniform(0.4, 0.9))
            img = img + rng.normal(0.0, 0.04, size=img.shape)
        images[k] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def write_synthetic_mnist(directory, n_train=8000, n_test=1600, seed=12345):
    """Write a synthetic digit dataset in MNIST IDX layout."""
    os.makedirs(directory, exist_ok=True)
    train_images, train_labels = generate_digit_images(n_train, seed)
    test_images, test_labels = generate_digit_images(n_test, seed + 1)
    write_idx_images(os.path.join(directory, "train-images-idx3-ubyte"), train_images)
    write_idx_labels(os.path.join(directory, "train-labels-idx1-ubyte"), train_labels)
    write_idx_images(os.path.join(directory, "t10k-images-idx3-ubyte"), test_images)
    write_idx_labels(os.path.join(directory, "t10k-labels-idx1-ubyte"), test_labels)
    return directory
