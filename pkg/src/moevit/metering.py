"""FLOP accounting (closed form and instrumented) and simulated device traffic."""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from . import numkit as nk
from .allocator import AssignmentTable, buffer_capacity

COMPONENTS = ("embedding", "attention", "dense_mlp", "router", "experts", "head")
CONVENTION = "flops = 2 * multiply-adds"


@dataclass
class FlopReport:
    """Multiply-add counts per component for one forward pass over a batch."""

    macs: dict[str, int] = field(default_factory=lambda: {c: 0 for c in COMPONENTS})
    num_images: int = 0
    num_tokens: int = 0
    convention: str = CONVENTION

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def flops(self) -> dict[str, int]:
        return {k: 2 * v for k, v in self.macs.items()}

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def per_image(self) -> float:
        return self.total_flops / max(self.num_images, 1)

    def per_token(self) -> float:
        return self.total_flops / max(self.num_tokens, 1)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "num_images": self.num_images,
            "num_tokens": self.num_tokens,
            "multiply_adds": dict(sorted(self.macs.items())),
            "flops": dict(sorted(self.flops.items())),
            "total_multiply_adds": self.total_macs,
            "total_flops": self.total_flops,
            "flops_per_image": self.per_image(),
            "flops_per_token": self.per_token(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def flops_analytic(cfg, C: float | None = None, k: int | None = None, num_images: int = 1) -> FlopReport:
    """Closed-form multiply-adds of ``model_forward`` on ``num_images`` images.

    Expert cost is groups * E * B_e * 2 * D * D_mlp: every buffer slot is
    computed whether or not a token landed in it.
    """
    C = cfg.C if C is None else C
    k = cfg.k if k is None else k
    N, S, P = num_images, cfg.seq_len, cfg.num_patches
    D, M, E, H = cfg.dim, cfg.mlp_dim, cfg.num_experts, cfg.heads
    T = N * S
    moe = cfg.moe_blocks()
    n_moe, n_dense = len(moe), cfg.depth - len(moe)
    group_images = N if cfg.group_images is None else cfg.group_images
    G = group_images * S
    n_groups = T // G
    B_e = buffer_capacity(1, G, k, E, C) if n_moe else 0
    rep = FlopReport(num_images=N, num_tokens=T)
    rep.macs["embedding"] = N * P * cfg.patch_dim * D
    rep.macs["attention"] = cfg.depth * (4 * T * D * D + 2 * N * H * S * S * (D // H))
    rep.macs["dense_mlp"] = n_dense * 2 * T * D * M
    rep.macs["router"] = n_moe * T * D * E
    rep.macs["experts"] = n_moe * n_groups * E * B_e * 2 * D * M
    rep.macs["head"] = N * D * cfg.num_classes
    return rep


@contextlib.contextmanager
def count_flops() -> Iterator[FlopReport]:
    """Accumulate the multiply-adds of every matmul run inside the block."""
    rep = FlopReport()

    def observe(scope: str, macs: int) -> None:
        rep.macs[scope] = rep.macs.get(scope, 0) + macs

    nk.add_matmul_observer(observe)
    try:
        yield rep
    finally:
        nk.remove_matmul_observer(observe)


def flops_counted(forward: Callable[[], object], num_images: int = 0, num_tokens: int = 0) -> FlopReport:
    with nk.no_grad(), count_flops() as rep:
        forward()
    rep.num_images, rep.num_tokens = num_images, num_tokens
    return rep


@dataclass
class CommReport:
    crossing: int
    successful: int
    per_device_pair: dict[tuple[int, int], int]

    @property
    def combine_crossing(self) -> int:
        # Outputs travel back along the same edges.
        return self.crossing

    def to_dict(self) -> dict:
        return {
            "dispatch_crossing": self.crossing,
            "combine_crossing": self.combine_crossing,
            "successful_assignments": self.successful,
            "per_device_pair": {f"{a}->{b}": n for (a, b), n in sorted(self.per_device_pair.items())},
        }


def comm_volume(table: AssignmentTable, expert_to_device: Mapping[int, int] | np.ndarray,
                token_to_device: Mapping[int, int] | np.ndarray) -> CommReport:
    """Count admitted (token, slot) pairs whose token and expert live on different devices."""
    t, i = np.nonzero(table.success)
    e = table.experts[t, i]
    try:
        src = np.array([token_to_device[int(x)] for x in t], dtype=np.int64)
        dst = np.array([expert_to_device[int(x)] for x in e], dtype=np.int64)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"device map does not cover {exc}") from exc
    pairs: dict[tuple[int, int], int] = {}
    for a, b in zip(src[src != dst], dst[src != dst]):
        pairs[(int(a), int(b))] = pairs.get((int(a), int(b)), 0) + 1
    return CommReport(int((src != dst).sum()), len(t), pairs)
