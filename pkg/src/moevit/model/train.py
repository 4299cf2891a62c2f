"""Training loop: cross-entropy plus weighted auxiliary loss, Adam with linear decay."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import numkit as nk
from ..losses import DEFAULT_LAMBDA, total_loss
from ..numkit import RngStream, Tensor
from .data import Dataset
from .vit import ForwardOptions, ModelConfig, init_params, model_forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    warmup_steps: int = 20
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 32
    steps: int = 300
    lam: float = DEFAULT_LAMBDA
    algo: str = "vanilla"


class Adam:
    """Adam with decoupled weight decay; the caller supplies the step's learning rate."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            p.data = p.data - lr * ((m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p.data)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then linear decay to zero at ``cfg.steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    return cfg.lr * max(0.0, 1.0 - (step - cfg.warmup_steps) / span)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    metrics: list[dict[str, float]]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    rng_states: dict = field(default_factory=dict)


def metric_columns(cfg: ModelConfig) -> list[str]:
    cols = ["step", "task_loss", "aux"]
    cols += [f"imp_cv2_b{b}" for b in cfg.moe_blocks()]
    cols += [f"load_cv2_b{b}" for b in cfg.moe_blocks()]
    return cols + ["accuracy"]


def loss_and_grads(params: dict[str, Tensor], images: np.ndarray, labels: np.ndarray, cfg: ModelConfig,
                   lam: float, algo: str, rng: RngStream) -> tuple[Tensor, dict, dict[str, np.ndarray]]:
    res = model_forward(images, params, cfg, ForwardOptions(mode="train", algo=algo, rng=rng))
    task = nk.cross_entropy(res.logits, labels)
    reports = res.aux_reports(cfg)
    loss = total_loss(task, reports, lam)
    for p in params.values():
        p.grad = None
    nk.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    row = {"task_loss": task.item(),
           "aux": float(np.mean([r.aux.item() for r in reports])) if reports else 0.0,
           "accuracy": float((res.logits.data.argmax(axis=1) == labels).mean())}
    for b, r in zip(sorted(res.moe), reports):
        row[f"imp_cv2_b{b}"] = r.imp_cv2.item()
        row[f"load_cv2_b{b}"] = r.load_cv2.item()
    return loss, row, grads


def train(data: Dataset, cfg: ModelConfig, tcfg: TrainConfig,
          params: dict[str, Tensor] | None = None) -> TrainResult:
    """Minimise cross-entropy + lam * aux over ``tcfg.steps`` minibatches.

    Batches are drawn epoch-wise from a seeded permutation; routing noise for
    step s comes from the stream ``seed/noise/s``. Identical configs give
    bit-identical metric series.
    """
    if data.labels.min() < 0 or data.labels.max() >= cfg.num_classes:
        raise ValueError("dataset labels fall outside [0, num_classes)")
    root = RngStream(cfg.seed)
    params = init_params(cfg, root.child("init")) if params is None else params
    data_rng = root.child("data")
    noise_root = root.child("noise")
    opt = Adam(params, tcfg)
    metrics: list[dict[str, float]] = []
    order = data_rng.permutation(len(data))
    cursor = 0
    for step in range(tcfg.steps):
        if cursor + tcfg.batch_size > len(order):
            order = data_rng.permutation(len(data))
            cursor = 0
        idx = order[cursor:cursor + tcfg.batch_size]
        cursor += tcfg.batch_size
        try:
            loss, row, grads = loss_and_grads(params, data.images[idx], data.labels[idx], cfg, tcfg.lam,
                                              tcfg.algo, noise_root.child(str(step)))
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"step {step}: loss is {loss.item()}")
        if tcfg.grad_clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > tcfg.grad_clip:
                grads = {k: g * (tcfg.grad_clip / norm) for k, g in grads.items()}
        opt.step(params, grads, learning_rate(step, tcfg))
        row["step"] = step
        metrics.append(row)
        if step % 50 == 0:
            log.debug("step %d loss %.4f acc %.3f", step, row["task_loss"], row["accuracy"])
    return TrainResult(params, metrics, cfg, tcfg, {"data": data_rng.get_state()})


def metrics_csv(metrics: list[dict[str, float]], cfg: ModelConfig, header: dict[str, str] | None = None) -> str:
    """CSV text with a ``#``-prefixed header block, then one row per step."""
    buf = io.StringIO()
    for key, value in (header or {}).items():
        buf.write(f"# {key}={value}\n")
    cols = metric_columns(cfg)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in metrics:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])
    return buf.getvalue()


def predict(params: dict[str, Tensor], cfg: ModelConfig, images: np.ndarray, opts: ForwardOptions | None = None,
            batch_size: int = 64) -> np.ndarray:
    out = []
    with nk.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model_forward(images[s:s + batch_size], params, cfg, opts).logits.data)
    return np.concatenate(out)


def evaluate(params: dict[str, Tensor], cfg: ModelConfig, data: Dataset, opts: ForwardOptions | None = None,
             batch_size: int = 64) -> float:
    """Eval-mode accuracy; each batch of ``batch_size`` images is one routing group
    unless the config fixes a smaller group."""
    logits = predict(params, cfg, data.images, opts, batch_size)
    return float((logits.argmax(axis=1) == data.labels).mean())
