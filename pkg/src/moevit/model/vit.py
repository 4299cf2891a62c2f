"""A small pre-norm ViT whose MLP blocks can be swapped for sparse MoE layers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import numkit as nk
from ..losses import AuxLossReport, aux_report
from ..moe_layer import ExpertParams, MoELayerParams, MoEOutput, moe_forward
from ..numkit import RngStream, Tensor
from ..router import RouterParams

PLACEMENTS = ("every_2", "last_n", "dense")


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 64
    num_experts: int = 4
    k: int = 1
    C: float = 1.05
    placement: str = "every_2"
    last_n: int = 1
    num_classes: int = 8
    seed: int = 0
    group_images: int | None = None  # images per routing group; None = whole batch
    routing_order: str = "topk_softmax"
    noise_std: float | None = None  # None = 1/E

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")
        if self.dim % self.heads:
            raise ValueError("embedding dim must be divisible by head count")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.placement != "dense" and not 1 <= self.k <= self.num_experts:
            raise ValueError(f"k={self.k} outside [1, {self.num_experts}]")
        if self.placement == "last_n" and not 1 <= self.last_n <= self.depth // 2:
            raise ValueError(f"last_n={self.last_n} needs depth >= {2 * self.last_n}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def moe_blocks(self) -> list[int]:
        """0-indexed blocks holding MoE layers (the second block of each pair)."""
        if self.placement == "dense":
            return []
        odd = list(range(1, self.depth, 2))
        if self.placement == "every_2":
            return odd
        return odd[-self.last_n:]

    def dense_twin(self) -> ModelConfig:
        return dataclasses.replace(self, placement="dense")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _normal(rng: RngStream, shape, std: float) -> Tensor:
    return Tensor(rng.normal(shape, 0.0, std), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_params(cfg: ModelConfig, rng: RngStream | None = None) -> dict[str, Tensor]:
    """Lecun-normal matrices, zero biases, unit LayerNorm gains."""
    rng = rng or RngStream(cfg.seed).child("init")
    D, M = cfg.dim, cfg.mlp_dim
    p: dict[str, Tensor] = {
        "embed/W": _normal(rng, (cfg.patch_dim, D), 1 / math.sqrt(cfg.patch_dim)),
        "embed/b": _zeros((D,)),
        "cls": _normal(rng, (1, D), 0.02),
        "pos": _normal(rng, (cfg.seq_len, D), 0.02),
    }
    moe = set(cfg.moe_blocks())
    for b in range(cfg.depth):
        pre = f"block{b}/"
        p[pre + "ln1/g"] = _ones((D,))
        p[pre + "ln1/b"] = _zeros((D,))
        p[pre + "attn/qkv_W"] = _normal(rng, (D, 3 * D), 1 / math.sqrt(D))
        p[pre + "attn/qkv_b"] = _zeros((3 * D,))
        p[pre + "attn/out_W"] = _normal(rng, (D, D), 1 / math.sqrt(D))
        p[pre + "attn/out_b"] = _zeros((D,))
        p[pre + "ln2/g"] = _ones((D,))
        p[pre + "ln2/b"] = _zeros((D,))
        if b in moe:
            E = cfg.num_experts
            p[pre + "moe/router_W"] = _normal(rng, (E, D), 1 / math.sqrt(D))
            p[pre + "moe/W1"] = _normal(rng, (E, D, M), 1 / math.sqrt(D))
            p[pre + "moe/b1"] = _zeros((E, 1, M))
            p[pre + "moe/W2"] = _normal(rng, (E, M, D), 1 / math.sqrt(M))
            p[pre + "moe/b2"] = _zeros((E, 1, D))
        else:
            p[pre + "mlp/W1"] = _normal(rng, (D, M), 1 / math.sqrt(D))
            p[pre + "mlp/b1"] = _zeros((M,))
            p[pre + "mlp/W2"] = _normal(rng, (M, D), 1 / math.sqrt(M))
            p[pre + "mlp/b2"] = _zeros((D,))
    p["final_ln/g"] = _ones((D,))
    p["final_ln/b"] = _zeros((D,))
    p["head/W"] = _normal(rng, (D, cfg.num_classes), 1 / math.sqrt(D))
    p["head/b"] = _zeros((cfg.num_classes,))
    return p


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(int(t.data.size) for t in params.values())


def moe_params(params: dict[str, Tensor], block: int, cfg: ModelConfig) -> MoELayerParams:
    pre = f"block{block}/moe/"
    return MoELayerParams(
        RouterParams(params[pre + "router_W"]),
        ExpertParams(params[pre + "W1"], params[pre + "b1"], params[pre + "W2"], params[pre + "b2"]),
        cfg.k, cfg.C)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, ch] (or a batch [N, H, W, ch]) -> row-major grid of flattened patches."""
    img = np.asarray(image, dtype=np.float64)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    N, H, W, ch = img.shape
    if H % patch or W % patch:
        raise ValueError(f"{H}x{W} image is not divisible into {patch}x{patch} patches")
    gh, gw = H // patch, W // patch
    out = img.reshape(N, gh, patch, gw, patch, ch).transpose(0, 1, 3, 2, 4, 5).reshape(
        N, gh * gw, patch * patch * ch)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int, channels: int) -> np.ndarray:
    gh, gw = height // patch, width // patch
    return patches.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4).reshape(
        height, width, channels)


@dataclass
class ForwardOptions:
    mode: str = "eval"
    algo: str = "vanilla"
    C_override: float | None = None
    k_override: int | None = None
    rng: RngStream | None = None
    score_mode: str = "max"
    skip_fraction: float = 0.5
    # block index -> replacement for that layer's router logits
    logits_hooks: dict[int, Callable[[Tensor], Tensor]] = field(default_factory=dict)


@dataclass
class ForwardResult:
    logits: Tensor
    features: Tensor  # pre-logits class-token representation
    moe: dict[int, MoEOutput]

    def aux_reports(self, cfg: ModelConfig) -> list[AuxLossReport]:
        out = []
        for b in sorted(self.moe):
            r = self.moe[b]
            out.append(aux_report(r.gates, r.selection.k, cfg.noise_std))
        return out


def attention(x: Tensor, params: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    N, S, D = x.shape
    dh = D // heads
    with nk.scope("attention"):
        qkv = x.reshape(N * S, D) @ params[pre + "qkv_W"] + params[pre + "qkv_b"]
        qkv = qkv.reshape(N, S, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = nk.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(N * S, D)
        out = ctx @ params[pre + "out_W"] + params[pre + "out_b"]
    return out.reshape(N, S, D)


def dense_mlp(h: Tensor, params: dict[str, Tensor], pre: str) -> Tensor:
    with nk.scope("dense_mlp"):
        return nk.gelu(h @ params[pre + "W1"] + params[pre + "b1"]) @ params[pre + "W2"] + params[pre + "b2"]


def block_forward(x: Tensor, params: dict[str, Tensor], block: int, cfg: ModelConfig,
                  opts: ForwardOptions) -> tuple[Tensor, MoEOutput | None]:
    """x <- x + MHSA(LN(x)); x <- x + FFN(LN(x)), FFN dense or sparse."""
    N, S, D = x.shape
    pre = f"block{block}/"
    x = x + attention(nk.layer_norm(x, params[pre + "ln1/g"], params[pre + "ln1/b"]),
                      params, pre + "attn/", cfg.heads)
    h = nk.layer_norm(x, params[pre + "ln2/g"], params[pre + "ln2/b"]).reshape(N * S, D)
    if pre + "moe/router_W" in params:
        group = None if cfg.group_images is None else cfg.group_images * S
        res = moe_forward(h, moe_params(params, block, cfg), algo=opts.algo, C_override=opts.C_override,
                          k_override=opts.k_override, mode=opts.mode,
                          rng=None if opts.rng is None else opts.rng.child(f"block{block}"),
                          group_tokens=group, order=cfg.routing_order, score_mode=opts.score_mode,
                          skip_fraction=opts.skip_fraction, logits_hook=opts.logits_hooks.get(block),
                          noise_std=cfg.noise_std)
        return x + res.y.reshape(N, S, D), res
    return x + dense_mlp(h, params, pre + "mlp/").reshape(N, S, D), None


def embed(images: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    patches = patchify(images, cfg.patch_size)
    N, P, pd = patches.shape
    with nk.scope("embedding"):
        tok = (Tensor(patches.reshape(N * P, pd)) @ params["embed/W"] + params["embed/b"]).reshape(N, P, cfg.dim)
    cls = params["cls"].reshape(1, 1, cfg.dim) + Tensor(np.zeros((N, 1, cfg.dim)))
    return nk.concat([cls, tok], axis=1) + params["pos"]


def model_forward(images: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig,
                  opts: ForwardOptions | None = None) -> ForwardResult:
    """patchify -> embed + class token + positions -> blocks -> head on class token."""
    opts = opts or ForwardOptions()
    if opts.mode == "train" and opts.rng is None:
        raise ValueError("train mode needs an RngStream for routing noise")
    x = embed(images, params, cfg)
    records: dict[int, MoEOutput] = {}
    for b in range(cfg.depth):
        x, rec = block_forward(x, params, b, cfg, opts)
        if rec is not None:
            records[b] = rec
    feats = nk.layer_norm(x[:, 0, :], params["final_ln/g"], params["final_ln/b"])
    with nk.scope("head"):
        logits = feats @ params["head/W"] + params["head/b"]
    return ForwardResult(logits, feats, records)
