"""Sparse expert layer with fixed-size, zero-padded expert buffers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkit as nk
from .allocator import AssignmentTable, allocate, buffer_capacity
from .numkit import RngStream, Tensor
from .router import GateMatrix, RouterParams, TopKSelection, gates, gates_from_logits, select


@dataclass
class ExpertParams:
    """Stacked weights of E identically shaped two-layer MLPs."""

    W1: Tensor  # [E, D, D_mlp]
    b1: Tensor  # [E, 1, D_mlp]
    W2: Tensor  # [E, D_mlp, D]
    b2: Tensor  # [E, 1, D]

    @property
    def num_experts(self) -> int:
        return self.W1.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class ExpertBuffers:
    slots: Tensor  # [E, groups * B_e, D]
    occupancy: np.ndarray  # [groups, E]


@dataclass
class MoELayerParams:
    router: RouterParams
    experts: ExpertParams
    k: int
    C: float

    def __post_init__(self):
        if not 1 <= self.k <= self.experts.num_experts:
            raise ValueError(f"k={self.k} exceeds {self.experts.num_experts} experts")


@dataclass
class MoEOutput:
    y: Tensor
    gates: GateMatrix
    selection: TopKSelection
    table: AssignmentTable


def _slot_rows(table: AssignmentTable) -> tuple[np.ndarray, np.ndarray]:
    """(token, slot) pairs that succeeded and their flat buffer row."""
    t, i = np.nonzero(table.success)
    e = table.experts[t, i]
    group = table.group_of()[t]
    rows = e * (table.num_groups * table.capacity) + group * table.capacity + table.positions[t, i]
    return np.stack([t, i], axis=1), rows


def dispatch(X: Tensor, table: AssignmentTable) -> ExpertBuffers:
    """Copy each admitted token into its expert's buffer slot; the rest stay zero."""
    T, D = X.shape
    if table.num_tokens != T:
        raise ValueError(f"table covers {table.num_tokens} tokens, input has {T}")
    E, R = table.num_experts, table.num_groups * table.capacity
    pairs, rows = _slot_rows(table)
    if len(np.unique(rows)) != len(rows):
        raise RuntimeError("two assignments share one buffer slot")
    source = np.full(E * R, T, dtype=np.int64)  # row T is an appended zero row
    source[rows] = pairs[:, 0]
    padded = nk.concat([X, Tensor(np.zeros((1, D)))], axis=0)
    slots = padded[source].reshape(E, R, D)
    return ExpertBuffers(slots, table.occupancy())


def experts_forward(buf: ExpertBuffers, params: ExpertParams) -> ExpertBuffers:
    """Run every expert MLP over its whole buffer, padding included."""
    with nk.scope("experts"):
        h = nk.gelu(buf.slots @ params.W1 + params.b1)
        out = h @ params.W2 + params.b2
    return ExpertBuffers(out, buf.occupancy)


def combine(buf_out: ExpertBuffers, table: AssignmentTable, weights: Tensor | None = None) -> Tensor:
    """Row t = sum over admitted slots i of weight(t, i) * expert output.

    ``weights`` defaults to the table's (constant) weights; pass the
    selection's differentiable weights to train through the router.
    """
    E, R, D = buf_out.slots.shape
    pairs, rows = _slot_rows(table)
    flat = buf_out.slots.reshape(E * R, D)
    if weights is None:
        w = Tensor(table.weights[pairs[:, 0], pairs[:, 1]])
    else:
        w = weights[pairs[:, 0], pairs[:, 1]]
    contrib = flat[rows] * w.reshape(-1, 1)
    return nk.scatter_add_rows(contrib, pairs[:, 0], table.num_tokens)


def moe_forward(X: Tensor, params: MoELayerParams, algo: str = "vanilla", C_override: float | None = None,
                k_override: int | None = None, mode: str = "eval", rng: RngStream | None = None,
                group_tokens: int | None = None, order: str = "topk_softmax", score_mode: str = "max",
                skip_fraction: float = 0.5, noise_std: float | None = None,
                logits_hook: Callable[[Tensor], Tensor] | None = None) -> MoEOutput:
    """gates -> TOP-k -> allocate -> dispatch -> experts -> combine.

    ``logits_hook`` may replace the router logits (random-router ablations).
    """
    k = params.k if k_override is None else k_override
    C = params.C if C_override is None else C_override
    E = params.router.num_experts
    if not 1 <= k <= E:
        raise ValueError(f"k={k} outside [1, {E}]")
    T = X.shape[0]
    G = T if group_tokens is None else group_tokens
    with nk.scope("router"):
        if logits_hook is None:
            g = gates(X, params.router, mode, rng, noise_std)
        else:
            g = gates_from_logits(logits_hook(X @ params.router.W.T))
    sel = select(g, k, order)
    B_e = buffer_capacity(1, G, k, E, C)
    table = allocate(sel, B_e, E, algo, score_mode, skip_fraction, group_tokens=G)
    buf = experts_forward(dispatch(X, table), params.experts)
    return MoEOutput(combine(buf, table, sel.weights), g, sel, table)
