"""Few-shot linear probe on frozen pre-logit features."""

from __future__ import annotations

import numpy as np

from .. import numkit as nk
from ..numkit import RngStream, Tensor
from .data import Dataset
from .vit import ForwardOptions, ModelConfig, model_forward


def extract_features(params: dict[str, Tensor], cfg: ModelConfig, images: np.ndarray,
                     batch_size: int = 64) -> np.ndarray:
    out = []
    with nk.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model_forward(images[s:s + batch_size], params, cfg, ForwardOptions()).features.data)
    return np.concatenate(out)


def fit_ridge(features: np.ndarray, labels: np.ndarray, num_classes: int, l2: float = 1e-3) -> np.ndarray:
    """Closed-form least squares from [features, 1] to one-hot targets."""
    F = np.hstack([features, np.ones((len(features), 1))])
    Y = np.eye(num_classes)[labels]
    A = F.T @ F + l2 * np.eye(F.shape[1])
    if l2 == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise ValueError("singular normal equations; use a positive l2 stabilizer")
    return np.linalg.solve(A, F.T @ Y)


def predict_ridge(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    return (np.hstack([features, np.ones((len(features), 1))]) @ weights).argmax(axis=1)


def few_shot_split(data: Dataset, n_shot: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of ``n_shot`` support examples per class and the remaining queries."""
    if n_shot < 1:
        raise ValueError("n_shot must be >= 1")
    rng = RngStream(seed).child("probe")
    support = []
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        support.extend(members[rng.permutation(len(members))[:n_shot]])
    support = np.sort(np.array(support))
    query = np.setdiff1d(np.arange(len(data)), support)
    return support, query


def linear_probe(params: dict[str, Tensor], cfg: ModelConfig, data: Dataset, n_shot: int = 10,
                 seed: int = 0, l2: float = 1e-3) -> float:
    """Accuracy of a ridge probe fit on ``n_shot`` examples per class."""
    support, query = few_shot_split(data, n_shot, seed)
    feats = extract_features(params, cfg, data.images)
    W = fit_ridge(feats[support], data.labels[support], data.num_classes, l2)
    return float((predict_ridge(W, feats[query]) == data.labels[query]).mean())
