"""Routing introspection: traces, specialization matrices, ablations."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .model.checkpoint import Checkpoint
from .model.data import Dataset
from .model.train import evaluate
from .model.vit import ForwardOptions, model_forward
from .numkit import RngStream, Tensor


@dataclass
class RoutingTrace:
    """One row per (MoE block, token). Slot columns are ordered by gate weight."""

    layer: np.ndarray  # block index
    image: np.ndarray
    position: np.ndarray  # 0 is the class token
    label: np.ndarray
    experts: np.ndarray  # [R, k]
    weights: np.ndarray  # [R, k]
    success: np.ndarray  # [R, k]
    num_experts: int

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def __len__(self) -> int:
        return len(self.layer)

    def layers(self) -> list[int]:
        return sorted(set(self.layer.tolist()))

    def top1_weight(self) -> np.ndarray:
        return self.weights[:, 0]

    def top2_weight(self) -> np.ndarray | None:
        return self.weights[:, 1] if self.k > 1 else None

    def rows_for(self, layer: int) -> np.ndarray:
        mask = self.layer == layer
        if not mask.any():
            raise ValueError(f"no MoE layer {layer} in trace (have {self.layers()})")
        return mask

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.k
        w.writerow(["layer", "image", "position", "label"]
                   + [f"expert_{i}" for i in range(k)] + [f"weight_{i}" for i in range(k)]
                   + [f"success_{i}" for i in range(k)] + ["top1_weight", "top2_weight"])
        for r in range(len(self)):
            w.writerow([int(self.layer[r]), int(self.image[r]), int(self.position[r]), int(self.label[r])]
                       + [int(e) for e in self.experts[r]] + [repr(float(x)) for x in self.weights[r]]
                       + [int(s) for s in self.success[r]]
                       + [repr(float(self.weights[r, 0])), repr(float(self.weights[r, 1])) if k > 1 else ""])
        return buf.getvalue()


def collect_traces(ckpt: Checkpoint, data: Dataset, algo: str = "vanilla", batch_size: int = 64,
                   C_override: float | None = None, k_override: int | None = None) -> RoutingTrace:
    """Eval-mode forward over ``data`` recording every MoE routing decision."""
    cfg = ckpt.config
    S = cfg.seq_len
    cols: dict[str, list[np.ndarray]] = {c: [] for c in
                                         ("layer", "image", "position", "label", "experts", "weights", "success")}
    with nk.no_grad():
        for start in range(0, len(data), batch_size):
            imgs = data.images[start:start + batch_size]
            n = len(imgs)
            res = model_forward(imgs, ckpt.params, cfg,
                                ForwardOptions(algo=algo, C_override=C_override, k_override=k_override))
            img_ids = start + np.repeat(np.arange(n), S)
            for b in sorted(res.moe):
                rec = res.moe[b]
                cols["layer"].append(np.full(n * S, b))
                cols["image"].append(img_ids)
                cols["position"].append(np.tile(np.arange(S), n))
                cols["label"].append(data.labels[img_ids])
                cols["experts"].append(rec.selection.indices)
                cols["weights"].append(rec.selection.weights.data)
                cols["success"].append(rec.table.success)
    if not cols["layer"]:
        raise ValueError("model has no MoE layers to trace")
    cat = {c: np.concatenate(v) for c, v in cols.items()}
    # Stable sort groups rows by layer while keeping image order inside each layer.
    order = np.argsort(cat["layer"], kind="stable")
    return RoutingTrace(**{c: v[order] for c, v in cat.items()}, num_experts=cfg.num_experts)


@dataclass
class SpecializationMatrix:
    row_name: str
    row_keys: np.ndarray
    matrix: np.ndarray  # [rows, E]
    counts: np.ndarray  # tokens behind each row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.row_name, "tokens"] + [f"expert_{e}" for e in range(self.matrix.shape[1])])
        for key, n, row in zip(self.row_keys, self.counts, self.matrix):
            w.writerow([int(key), int(n)] + [repr(float(x)) for x in row])
        return buf.getvalue()


def _mass(trace: RoutingTrace, mask: np.ndarray) -> np.ndarray:
    """Dense [rows, E] routing weight per token (zero where an expert was not selected)."""
    n = int(mask.sum())
    dense = np.zeros((n, trace.num_experts))
    np.add.at(dense, (np.arange(n)[:, None], trace.experts[mask]), trace.weights[mask])
    return dense


def _grouped(trace: RoutingTrace, layer: int, key: np.ndarray, name: str) -> SpecializationMatrix:
    mask = trace.rows_for(layer)
    dense = _mass(trace, mask)
    keys, inv, counts = np.unique(key[mask], return_inverse=True, return_counts=True)
    sums = np.zeros((len(keys), trace.num_experts))
    np.add.at(sums, inv, dense)
    return SpecializationMatrix(name, keys, sums / counts[:, None], counts)


def class_expert_matrix(trace: RoutingTrace, layer: int) -> SpecializationMatrix:
    """Mean routing weight each expert receives from tokens of each class's images."""
    return _grouped(trace, layer, trace.label, "class")


def position_expert_matrix(trace: RoutingTrace, layer: int) -> SpecializationMatrix:
    return _grouped(trace, layer, trace.position, "position")


def experts_per_image(trace: RoutingTrace, layer: int) -> dict[int, int]:
    """Histogram: distinct experts that admitted at least one token of an image -> image count."""
    mask = trace.rows_for(layer)
    img = np.broadcast_to(trace.image[mask][:, None], trace.experts[mask].shape)
    ok = trace.success[mask]
    images = np.unique(trace.image[mask])
    pairs = np.unique(np.stack([img[ok], trace.experts[mask][ok]], axis=1), axis=0)
    per_image = dict.fromkeys(images.tolist(), 0)
    for i in pairs[:, 0].tolist():
        per_image[i] += 1
    hist: dict[int, int] = {}
    for c in per_image.values():
        hist[c] = hist.get(c, 0) + 1
    return dict(sorted(hist.items()))


def histogram_json(hists: dict[int, dict[int, int]], meta: dict | None = None) -> str:
    body = {"meta": meta or {}, "experts_per_image": {
        str(layer): {str(c): n for c, n in h.items()} for layer, h in sorted(hists.items())}}
    return json.dumps(body, indent=2, sort_keys=True)


def _random_hook(rng: RngStream, kind: str):
    calls = 0

    def hook(logits: Tensor) -> Tensor:
        nonlocal calls
        stream = rng.child(str(calls))
        calls += 1
        if kind == "gaussian":
            return Tensor(stream.normal(logits.shape))
        perm = np.argsort(stream.uniform(size=logits.shape), axis=1)
        return Tensor(np.take_along_axis(logits.data, perm, axis=1))

    return hook


def scope_layers(ckpt: Checkpoint, scope: str, index: int) -> list[int]:
    """MoE block indices covered by ``single(index)`` or ``cumulative(index)``.

    ``index`` counts MoE layers from 0; ``cumulative`` covers the first
    ``index`` layers (so 0 covers none).
    """
    blocks = ckpt.config.moe_blocks()
    if scope == "single":
        if not 0 <= index < len(blocks):
            raise ValueError(f"single scope {index} outside [0, {len(blocks)})")
        return [blocks[index]]
    if scope == "cumulative":
        if not 0 <= index <= len(blocks):
            raise ValueError(f"cumulative scope {index} outside [0, {len(blocks)}]")
        return blocks[:index]
    raise ValueError(f"unknown scope {scope!r}")


def random_router_accuracy(ckpt: Checkpoint, data: Dataset, layers: Sequence[int], seed: int = 0,
                           kind: str = "gaussian", algo: str = "vanilla", batch_size: int = 64) -> float:
    """Eval accuracy with the routers of ``layers`` replaced.

    ``kind="gaussian"`` draws i.i.d. standard-normal logits per token;
    ``kind="permuted"`` shuffles each token's real logits across experts.
    """
    if kind not in ("gaussian", "permuted"):
        raise ValueError(f"unknown random router kind {kind!r}")
    root = RngStream(seed).child(f"random-router/{kind}")
    hooks = {b: _random_hook(root.child(f"block{b}"), kind) for b in layers}
    return evaluate(ckpt.params, ckpt.config, data, ForwardOptions(algo=algo, logits_hooks=hooks), batch_size)


def random_router_ablation(ckpt: Checkpoint, data: Dataset, scope: str = "single", seed: int = 0,
                           kind: str = "gaussian", batch_size: int = 64) -> list[dict]:
    """Accuracy per scope point: one row per MoE layer (``single``) or per prefix
    length 1..L_moe (``cumulative``)."""
    n = len(ckpt.config.moe_blocks())
    points = range(n) if scope == "single" else range(1, n + 1)
    rows = []
    for i in points:
        layers = scope_layers(ckpt, scope, i)
        rows.append({"scope": scope, "index": i, "blocks": layers,
                     "accuracy": random_router_accuracy(ckpt, data, layers, seed, kind, batch_size=batch_size)})
    return rows


def vary_k_eval(ckpt: Checkpoint, data: Dataset, k_grid: Sequence[int], algo: str = "vanilla",
                batch_size: int = 64) -> dict[int, float]:
    """Eval accuracy when every MoE layer routes each token to k' experts."""
    E = ckpt.config.num_experts
    out = {}
    for kp in k_grid:
        if not 1 <= kp <= E:
            raise ValueError(f"k'={kp} outside [1, {E}]")
        out[int(kp)] = evaluate(ckpt.params, ckpt.config, data, ForwardOptions(algo=algo, k_override=kp), batch_size)
    return out
