"""Auxiliary load-balancing losses: importance and load."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import Tensor
from .router import GateMatrix

DEFAULT_LAMBDA = 0.01


@dataclass
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    sigma: float | None = None  # None means 1/E


@dataclass
class AuxLossReport:
    imp: Tensor
    load: Tensor | None
    imp_cv2: Tensor
    load_cv2: Tensor | None
    aux: Tensor

    def summary(self) -> dict[str, float]:
        return {
            "imp_cv2": self.imp_cv2.item(),
            "load_cv2": float("nan") if self.load_cv2 is None else self.load_cv2.item(),
            "aux": self.aux.item(),
        }


def cv_squared(x: Tensor) -> Tensor:
    """(std / mean)^2 with the population standard deviation."""
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    return var / (mean * mean)


def importance_loss(g: GateMatrix) -> tuple[Tensor, Tensor]:
    imp = g.probs.sum(axis=0)
    return imp, cv_squared(imp)


def load_probabilities(g: GateMatrix, k: int, sigma: float | None = None) -> Tensor:
    """P(expert i clears the k-th largest noisy score if only its noise were redrawn).

    The threshold is read from the realized noisy logits, so it stays
    differentiable through the clean logits of whichever expert sits there.
    """
    if not g.noise_applied:
        raise ValueError("load loss needs gates computed with routing noise")
    T, E = g.probs.shape
    if not 1 <= k <= E:
        raise ValueError(f"k={k} outside [1, {E}]")
    sigma = 1.0 / E if sigma is None else sigma
    kth = np.argsort(-g.noisy_logits.data, axis=1, kind="stable")[:, k - 1]
    threshold = g.noisy_logits[np.arange(T), kth].reshape(T, 1)
    return nk.normal_sf((threshold - g.clean_logits) * (1.0 / sigma))


def load_loss(g: GateMatrix, k: int, sigma: float | None = None) -> tuple[Tensor, Tensor]:
    load = load_probabilities(g, k, sigma).sum(axis=0)
    return load, cv_squared(load)


def aux_report(g: GateMatrix, k: int, sigma: float | None = None) -> AuxLossReport:
    """Both losses and their average; eval-mode gates report importance only."""
    imp, imp_cv2 = importance_loss(g)
    if not g.noise_applied:
        return AuxLossReport(imp, None, imp_cv2, None, imp_cv2 * 0.5)
    load, load_cv2 = load_loss(g, k, sigma)
    return AuxLossReport(imp, load, imp_cv2, load_cv2, imp_cv2 * 0.5 + load_cv2 * 0.5)


def total_loss(task_loss: Tensor, reports: Sequence[AuxLossReport], lam: float = DEFAULT_LAMBDA) -> Tensor:
    """task + lam * mean over layers of the per-layer auxiliary loss."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam == 0 or not reports:
        return task_loss
    aux = reports[0].aux
    for r in reports[1:]:
        aux = aux + r.aux
    return task_loss + aux * (lam / len(reports))
