"""Procedural image-classification data, plus an optional small digits corpus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkit import RngStream


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, ch]
    labels: np.ndarray  # [N]
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size: int):
        for s in range(0, len(self), batch_size):
            yield self.images[s:s + batch_size], self.labels[s:s + batch_size]


def synthetic_motifs(n: int, seed: int, num_classes: int = 8, image_size: int = 16, patch: int = 4,
                     motifs_per_class: int = 2, copies: int = 2, num_distractors: int = 8,
                     pixel_noise: float = 0.5, motif_seed: int = 1234) -> Dataset:
    """Images tiled with patch-sized motifs; the class is which motif pair appears.

    Each class owns ``motifs_per_class`` motifs, each placed ``copies`` times
    at random grid cells. Remaining cells hold distractor motifs shared by all
    classes, and everything is covered with Gaussian pixel noise. The motif
    bank depends only on ``motif_seed`` so train and test splits share it.
    """
    bank_rng = RngStream(motif_seed).child("motifs")
    n_class_motifs = num_classes * motifs_per_class
    bank = bank_rng.normal((n_class_motifs + num_distractors, patch, patch), 0.0, 1.0)
    bank /= np.sqrt((bank ** 2).mean(axis=(1, 2), keepdims=True))
    rng = RngStream(seed).child("samples")
    grid = image_size // patch
    cells = grid * grid
    need = motifs_per_class * copies
    if need > cells:
        raise ValueError("grid too small for the requested motif copies")
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    images = np.zeros((n, image_size, image_size, 1))
    for j in range(n):
        c = labels[j]
        order = rng.permutation(cells)
        ids = np.concatenate([
            np.repeat(np.arange(motifs_per_class) + c * motifs_per_class, copies),
            n_class_motifs + rng.integers(0, num_distractors, size=cells - need),
        ])
        for cell, m in zip(order, ids):
            r, q = divmod(int(cell), grid)
            images[j, r * patch:(r + 1) * patch, q * patch:(q + 1) * patch, 0] = bank[m]
    images += rng.normal(images.shape, 0.0, pixel_noise)
    return Dataset(images, labels.astype(np.int64), num_classes)


def synthetic_relational(n: int, seed: int, num_classes: int = 8, image_size: int = 16, patch: int = 4,
                         copies: int = 2, num_distractors: int = 8, pixel_noise: float = 0.5,
                         motif_seed: int = 1234) -> Dataset:
    """Images holding one motif from family A and one from family B.

    With ``x`` the A-motif and ``y`` the B-motif index (each family has
    ``num_classes`` members), the label is ``(y - x) mod num_classes``. Neither
    motif alone says anything about the label, so a classifier has to pool
    both and then combine them non-linearly; bag-of-patch features stay at
    chance. Other cells hold shared distractor motifs; Gaussian pixel noise
    covers everything.
    """
    K = num_classes
    bank_rng = RngStream(motif_seed).child("relational-motifs")
    bank = bank_rng.normal((2 * K + num_distractors, patch, patch), 0.0, 1.0)
    bank /= np.sqrt((bank ** 2).mean(axis=(1, 2), keepdims=True))
    rng = RngStream(seed).child("relational-samples")
    grid = image_size // patch
    cells = grid * grid
    if 2 * copies > cells:
        raise ValueError("grid too small for the requested motif copies")
    labels = np.arange(n) % K
    labels = labels[rng.permutation(n)]
    images = np.zeros((n, image_size, image_size, 1))
    for j in range(n):
        x = int(rng.integers(0, K))
        y = (x + labels[j]) % K
        ids = np.concatenate([np.full(copies, x), np.full(copies, K + y),
                              2 * K + rng.integers(0, num_distractors, size=cells - 2 * copies)])
        for cell, m in zip(rng.permutation(cells), ids):
            r, q = divmod(int(cell), grid)
            images[j, r * patch:(r + 1) * patch, q * patch:(q + 1) * patch, 0] = bank[m]
    images += rng.normal(images.shape, 0.0, pixel_noise)
    return Dataset(images, labels.astype(np.int64), K)


def two_class_blobs(n: int, seed: int, image_size: int = 8) -> Dataset:
    """Balanced two-class set: bright top half vs bright bottom half, noisy."""
    rng = RngStream(seed).child("blobs")
    labels = np.arange(n) % 2
    images = rng.normal((n, image_size, image_size, 1), 0.0, 1.0)
    half = image_size // 2
    images[labels == 0, :half] += 1.0
    images[labels == 1, half:] += 1.0
    return Dataset(images, labels.astype(np.int64), 2)


def digits(seed: int = 0, test_fraction: float = 0.25) -> tuple[Dataset, Dataset]:
    """scikit-learn's bundled 8x8 handwritten digits, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = (raw.images / 16.0)[..., None]
    labels = raw.target.astype(np.int64)
    perm = RngStream(seed).child("digits").permutation(len(labels))
    cut = int(round(len(labels) * (1 - test_fraction)))
    full = Dataset(images[perm], labels[perm], 10)
    return full.subset(slice(0, cut)), full.subset(slice(cut, None))


def load_dataset(name: str, n_train: int, n_test: int, seed: int, num_classes: int = 8,
                 image_size: int = 16, patch: int = 4) -> tuple[Dataset, Dataset]:
    if name == "relational":
        return (synthetic_relational(n_train, seed, num_classes, image_size, patch),
                synthetic_relational(n_test, seed + 7919, num_classes, image_size, patch))
    if name == "motifs":
        return (synthetic_motifs(n_train, seed, num_classes, image_size, patch),
                synthetic_motifs(n_test, seed + 7919, num_classes, image_size, patch))
    if name == "digits":
        return digits(seed)
    raise ValueError(f"unknown dataset {name!r}")
