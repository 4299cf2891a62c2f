"""Noisy softmax gating and TOP-k expert selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import RngStream, Tensor, softmax_rows


@dataclass
class RouterParams:
    W: Tensor  # [E, D]

    @property
    def num_experts(self) -> int:
        return self.W.shape[0]


@dataclass
class GateMatrix:
    probs: Tensor
    clean_logits: Tensor
    noisy_logits: Tensor
    noise_applied: bool

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]


@dataclass
class TopKSelection:
    """Per-token expert choices, slot 0 holding the largest gate."""

    k: int
    indices: np.ndarray  # [T, k] int
    weights: Tensor  # [T, k], differentiable view into the gates

    @property
    def num_tokens(self) -> int:
        return self.indices.shape[0]


def gates(X: Tensor, params: RouterParams, mode: str = "eval", rng: RngStream | None = None,
          noise_std: float | None = None) -> GateMatrix:
    """Compute ``softmax(W x + eps)`` row-wise for a batch of tokens.

    In train mode eps ~ N(0, noise_std^2) entry-wise, with noise_std
    defaulting to 1/E. Eval mode is noise-free.
    """
    if X.ndim != 2 or X.shape[1] != params.W.shape[1]:
        raise ValueError(f"token matrix {X.shape} does not match router {params.W.shape}")
    E = params.num_experts
    clean = X @ params.W.T
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode gating needs an RngStream for the noise")
        std = 1.0 / E if noise_std is None else noise_std
        noisy = clean + Tensor(rng.normal(clean.shape, 0.0, std))
        applied = True
    elif mode == "eval":
        noisy = clean
        applied = False
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return GateMatrix(softmax_rows(noisy), clean, noisy, applied)


def gates_from_logits(logits: Tensor) -> GateMatrix:
    return GateMatrix(softmax_rows(logits), logits, logits, False)


def _ranked(values: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on the negated values: larger first, lower index on ties.
    return np.argsort(-values, axis=1, kind="stable")[:, :k]


def _check_k(k: int, E: int) -> None:
    if not 1 <= k <= E:
        raise ValueError(f"k={k} outside [1, {E}]")


def top_k_select(g: GateMatrix, k: int) -> TopKSelection:
    _check_k(k, g.num_experts)
    idx = _ranked(g.probs.data, k)
    rows = np.arange(g.num_tokens)[:, None]
    return TopKSelection(k, idx, g.probs[rows, idx])


def legacy_softmax_of_topk(g: GateMatrix, k: int) -> TopKSelection:
    """Pick the k largest noisy logits, then softmax over just those.

    With k=1 the weight is identically 1, so no gradient reaches the router.
    """
    _check_k(k, g.num_experts)
    idx = _ranked(g.noisy_logits.data, k)
    rows = np.arange(g.num_tokens)[:, None]
    return TopKSelection(k, idx, softmax_rows(g.noisy_logits[rows, idx]))


def select(g: GateMatrix, k: int, order: str = "topk_softmax") -> TopKSelection:
    if order == "topk_softmax":
        return top_k_select(g, k)
    if order == "softmax_topk":
        return legacy_softmax_of_topk(g, k)
    raise ValueError(f"unknown routing order {order!r}")
