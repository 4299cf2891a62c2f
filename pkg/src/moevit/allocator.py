"""Capacity-limited assignment of routed tokens to expert buffer slots.

Three policies share one engine. All of them process every token's TOP-1
choice before any TOP-2 choice; they differ only in the order tokens are
visited within a slot rank:

* ``vanilla``: row order of the batch.
* ``bpr``: descending priority score (batch prioritized routing).
* ``skip``: like ``bpr``, but only the best ``round(S * T)`` tokens are
  visited at all; the rest fail every slot.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .router import TopKSelection

ALGORITHMS = ("vanilla", "bpr", "skip")
SCORE_MODES = ("max", "sum_topk")


def round_half_away(x: float) -> int:
    # The epsilon absorbs representation error in products like 2*2*5*1.05/4.
    return int(math.copysign(math.floor(abs(x) + 0.5 + 1e-9), x))


def buffer_capacity(N: int, P: int, k: int, E: int, C: float) -> int:
    """Slots per expert: round(k * N * P * C / E), halves rounded away from zero."""
    for name, v in (("N", N), ("P", P), ("k", k), ("E", E)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    if not C > 0:
        raise ValueError(f"capacity ratio must be positive, got {C}")
    return round_half_away(k * N * P * C / E)


@dataclass(frozen=True)
class CapacitySpec:
    N: int
    P: int
    k: int
    E: int
    C: float

    @property
    def B_e(self) -> int:
        return buffer_capacity(self.N, self.P, self.k, self.E, self.C)


@dataclass
class PriorityOrder:
    permutation: np.ndarray
    scores: np.ndarray


@dataclass
class AssignmentTable:
    """Result of allocation; arrays are indexed [token, slot]."""

    experts: np.ndarray
    weights: np.ndarray
    success: np.ndarray
    positions: np.ndarray  # buffer row when successful, else -1
    capacity: int
    num_experts: int
    group_tokens: int | None = None  # None: the whole table is one group

    @property
    def num_groups(self) -> int:
        return 1 if self.group_tokens is None else self.num_tokens // self.group_tokens

    def group_of(self) -> np.ndarray:
        G = self.num_tokens if self.group_tokens is None else self.group_tokens
        return np.arange(self.num_tokens) // G

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def occupancy(self) -> np.ndarray:
        """Successful assignments per (group, expert)."""
        groups = np.broadcast_to(self.group_of()[:, None], self.experts.shape)
        flat = groups[self.success] * self.num_experts + self.experts[self.success]
        return np.bincount(flat, minlength=self.num_groups * self.num_experts).reshape(
            self.num_groups, self.num_experts)

    def equals(self, other: AssignmentTable) -> bool:
        return (self.capacity == other.capacity
                and self.num_experts == other.num_experts
                and np.array_equal(self.experts, other.experts)
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.success, other.success)
                and np.array_equal(self.positions, other.positions)
                and self.num_groups == other.num_groups)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["token", "slot", "expert", "weight", "success", "position"])
        for t in range(self.num_tokens):
            for i in range(self.k):
                w.writerow([t, i, int(self.experts[t, i]), repr(float(self.weights[t, i])),
                            int(self.success[t, i]), int(self.positions[t, i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, capacity: int, num_experts: int) -> AssignmentTable:
        rows = list(csv.DictReader(io.StringIO(text)))
        T = 1 + max(int(r["token"]) for r in rows)
        k = 1 + max(int(r["slot"]) for r in rows)
        experts = np.zeros((T, k), dtype=np.int64)
        weights = np.zeros((T, k))
        success = np.zeros((T, k), dtype=bool)
        positions = np.full((T, k), -1, dtype=np.int64)
        for r in rows:
            t, i = int(r["token"]), int(r["slot"])
            experts[t, i] = int(r["expert"])
            weights[t, i] = float(r["weight"])
            success[t, i] = r["success"] == "1"
            positions[t, i] = int(r["position"])
        return cls(experts, weights, success, positions, capacity, num_experts)


def priority_score(sel: TopKSelection | np.ndarray, mode: str = "max") -> np.ndarray:
    """Per-token priority: largest selected gate, or the sum of all k."""
    w = sel.weights.data if isinstance(sel, TopKSelection) else np.asarray(sel)
    if mode == "max":
        return w.max(axis=1)
    if mode == "sum_topk":
        return w.sum(axis=1)
    raise ValueError(f"unknown score mode {mode!r}")


def priority_order(scores: np.ndarray) -> PriorityOrder:
    perm = np.argsort(-scores, kind="stable")
    return PriorityOrder(perm, scores[perm])


def _fill(experts: np.ndarray, weights: np.ndarray, visit: np.ndarray, capacity: int,
          num_experts: int) -> AssignmentTable:
    T, k = experts.shape
    success = np.zeros((T, k), dtype=bool)
    positions = np.full((T, k), -1, dtype=np.int64)
    occupancy = np.zeros(num_experts, dtype=np.int64)
    rows = np.arange(len(visit))
    for i in range(k):
        chosen = experts[visit, i]
        onehot = chosen[:, None] == np.arange(num_experts)[None, :]
        # Rank of each token among earlier visitors to the same expert this round.
        rank = np.cumsum(onehot, axis=0)[rows, chosen] - 1
        pos = occupancy[chosen] + rank
        ok = pos < capacity
        success[visit[ok], i] = True
        positions[visit[ok], i] = pos[ok]
        occupancy = np.minimum(occupancy + onehot.sum(axis=0), max(capacity, 0))
    return AssignmentTable(experts.copy(), weights.copy(), success, positions, capacity, num_experts)


def _unpack(sel: TopKSelection) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(sel.indices, dtype=np.int64), np.asarray(sel.weights.data, dtype=np.float64)


def _visit_order(weights: np.ndarray, algo: str, mode: str, S: float) -> np.ndarray:
    if algo == "vanilla":
        return np.arange(len(weights))
    if algo not in ("bpr", "skip"):
        raise ValueError(f"unknown allocation algorithm {algo!r}")
    perm = priority_order(priority_score(weights, mode)).permutation
    if algo == "skip":
        if not 0 < S < 1:
            raise ValueError(f"kept fraction S must lie in (0, 1), got {S}")
        perm = perm[:round_half_away(S * len(weights))]
    return perm


def allocate_vanilla(sel: TopKSelection, B_e: int, num_experts: int) -> AssignmentTable:
    return allocate(sel, B_e, num_experts, "vanilla")


def allocate_bpr(sel: TopKSelection, B_e: int, num_experts: int, mode: str = "max") -> AssignmentTable:
    return allocate(sel, B_e, num_experts, "bpr", mode)


def allocate_skip_patch(sel: TopKSelection, B_e: int, num_experts: int, S: float,
                        mode: str = "max") -> AssignmentTable:
    return allocate(sel, B_e, num_experts, "skip", mode, S)


def allocate(sel: TopKSelection, B_e: int, num_experts: int, algo: str = "vanilla",
             mode: str = "max", S: float = 0.5, group_tokens: int | None = None) -> AssignmentTable:
    """Allocate a selection; with ``group_tokens`` set, each consecutive
    group of that many tokens gets its own buffers of ``B_e`` slots.

    Positions in the merged table are local to the token's group.
    """
    experts, weights = _unpack(sel)
    T = len(experts)
    G = T if group_tokens is None else group_tokens
    if G < 1 or T % G:
        raise ValueError(f"{T} tokens do not split into groups of {G}")
    parts = []
    for start in range(0, T, G):
        e, w = experts[start:start + G], weights[start:start + G]
        parts.append(_fill(e, w, _visit_order(w, algo, mode, S), B_e, num_experts))
    if len(parts) == 1:
        table = parts[0]
    else:
        table = AssignmentTable(
            np.concatenate([p.experts for p in parts]), np.concatenate([p.weights for p in parts]),
            np.concatenate([p.success for p in parts]), np.concatenate([p.positions for p in parts]),
            B_e, num_experts)
    table.group_tokens = G
    return table
