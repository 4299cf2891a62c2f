"""``moevit`` command line: train, eval, sweep-capacity, ablate, analyze, flops."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import analysis, metering
from .model import checkpoint as ckpt_io
from .model.checkpoint import Checkpoint, CheckpointError
from .model.data import load_dataset
from .model.train import TrainConfig, TrainingDiverged, evaluate, metrics_csv, train
from .model.vit import ForwardOptions, ModelConfig

log = logging.getLogger("moevit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"seed"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything a run needs, read from one flat TOML table."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "relational"
    n_train: int = 4096
    n_test: int = 1024
    data_seed: int = 1
    eval_batch_size: int = 64
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        flat = {k: v for k, v in self.model.to_dict().items() if k != "seed"}
        flat.update(dataclasses.asdict(self.train))
        flat.update(dataset=self.dataset, n_train=self.n_train, n_test=self.n_test, data_seed=self.data_seed,
                    eval_batch_size=self.eval_batch_size, out=self.out, seed=self.seed)
        return dict(sorted(flat.items()))

    def digest(self) -> str:
        # The output directory does not change results, so it stays out of the hash.
        body = {k: v for k, v in self.to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def header(self) -> dict[str, str]:
        return {"config_hash": self.digest(), "seed": str(self.seed)}

    def datasets(self):
        m = self.model
        return load_dataset(self.dataset, self.n_train, self.n_test, self.data_seed, m.num_classes,
                            m.image_size, m.patch_size)


_TOP_KEYS = {"dataset", "n_train", "n_test", "data_seed", "eval_batch_size", "out", "seed"}


def _typed(key: str, value, default):
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
        raise ConfigError(f"key {key!r} expects {type(default).__name__}, got {type(value).__name__}")
    return value


def config_from_mapping(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - _MODEL_KEYS - _TRAIN_KEYS - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base = ExperimentConfig()
    model_kw, train_kw, top_kw = {}, {}, {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat; {key!r} is a table")
        if key in _MODEL_KEYS:
            model_kw[key] = _typed(key, value, getattr(base.model, key))
        elif key in _TRAIN_KEYS:
            train_kw[key] = _typed(key, value, getattr(base.train, key))
        else:
            top_kw[key] = _typed(key, value, getattr(base, key))
    seed = top_kw.get("seed", base.seed)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    try:
        model = ModelConfig(**model_kw, seed=seed)
        tcfg = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if tcfg.algo not in ("vanilla", "bpr", "skip"):
        raise ConfigError(f"unknown algo {tcfg.algo!r}")
    if tcfg.steps < 1 or tcfg.batch_size < 1:
        raise ConfigError("steps and batch_size must be positive")
    return ExperimentConfig(model=model, train=tcfg, **top_kw)


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return config_from_mapping(raw)


def config_toml(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            continue
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def _csv(header: dict[str, str], columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    for key, value in header.items():
        buf.write(f"# {key}={value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _prefix(header: dict[str, str], body: str) -> str:
    return "".join(f"# {k}={v}\n" for k, v in header.items()) + body


def _json(header: dict[str, str], payload: dict) -> str:
    return json.dumps({"meta": header, **payload}, indent=2, sort_keys=True) + "\n"


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(path: str | None) -> Checkpoint:
    if path is None:
        raise ConfigError("--checkpoint is required for this command")
    try:
        return ckpt_io.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from exc


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_train(args, cfg: ExperimentConfig) -> int:
    train_set, _ = cfg.datasets()
    result = train(train_set, cfg.model, cfg.train)
    out = _out_dir(cfg)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics, cfg.model, cfg.header()))
    ckpt_io.save(Checkpoint(result.params, cfg.model, result.rng_states), out / "checkpoint.vmoe")
    (out / "config.toml").write_text(_prefix(cfg.header(), config_toml(cfg)))
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    _, test = cfg.datasets()
    acc = evaluate(ck.params, ck.config, test, ForwardOptions(algo=args.algo), cfg.eval_batch_size)
    text = _json(cfg.header(), {"algo": args.algo, "accuracy": acc, "num_examples": len(test)})
    (_out_dir(cfg) / "eval.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep_capacity(args, cfg: ExperimentConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    _, test = cfg.datasets()
    rows = []
    ks = _ints(args.k) if args.k else [ck.config.k]
    for algo in args.algos.split(","):
        for C in _floats(args.C):
            for k in ks:
                acc = evaluate(ck.params, ck.config, test, ForwardOptions(algo=algo, C_override=C, k_override=k),
                               cfg.eval_batch_size)
                fl = metering.flops_analytic(ck.config, C, k, num_images=cfg.eval_batch_size)
                rows.append([algo, C, k, acc, fl.total_flops])
    (_out_dir(cfg) / "sweep_capacity.csv").write_text(
        _csv(cfg.header(), ["algo", "C", "k", "accuracy", "flops_per_batch"], rows))
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _, test = cfg.datasets()
    if args.mode == "routing_order":
        train_set, _ = cfg.datasets()
        rows = []
        for order in ("topk_softmax", "softmax_topk"):
            mcfg = dataclasses.replace(cfg.model, routing_order=order)
            res = train(train_set, mcfg, cfg.train)
            rows.append([order, evaluate(res.params, mcfg, test, batch_size=cfg.eval_batch_size),
                         res.metrics[-1]["task_loss"]])
        text = _csv(cfg.header(), ["routing_order", "accuracy", "final_task_loss"], rows)
    else:
        ck = _load_checkpoint(args.checkpoint)
        if args.mode == "vary_k":
            grid = _ints(args.k) if args.k else list(range(1, ck.config.num_experts + 1))
            res = analysis.vary_k_eval(ck, test, grid, batch_size=cfg.eval_batch_size)
            text = _csv(cfg.header(), ["k_prime", "accuracy"], [[k, a] for k, a in res.items()])
        else:
            res = analysis.random_router_ablation(ck, test, args.scope, cfg.seed, args.kind, cfg.eval_batch_size)
            text = _csv(cfg.header(), ["scope", "index", "blocks", "accuracy"],
                        [[r["scope"], r["index"], " ".join(map(str, r["blocks"])), r["accuracy"]] for r in res])
    (out / f"ablate_{args.mode}.csv").write_text(text)
    return EXIT_OK


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    _, test = cfg.datasets()
    trace = analysis.collect_traces(ck, test, args.algo, cfg.eval_batch_size)
    out = _out_dir(cfg)
    (out / "trace.csv").write_text(_prefix(cfg.header(), trace.to_csv()))
    hists = {}
    for layer in trace.layers():
        for name, fn in (("class", analysis.class_expert_matrix), ("position", analysis.position_expert_matrix)):
            (out / f"{name}_expert_b{layer}.csv").write_text(_prefix(cfg.header(), fn(trace, layer).to_csv()))
        hists[layer] = analysis.experts_per_image(trace, layer)
    (out / "experts_per_image.json").write_text(analysis.histogram_json(hists, cfg.header()) + "\n")
    return EXIT_OK


def cmd_flops(args, cfg: ExperimentConfig) -> int:
    mcfg = _load_checkpoint(args.checkpoint).config if args.checkpoint else cfg.model
    C = args.C_value if args.C_value is not None else mcfg.C
    rep = metering.flops_analytic(mcfg, C, args.k_value, num_images=cfg.eval_batch_size)
    text = _json(cfg.header(), {"C": C, "k": args.k_value or mcfg.k, "report": rep.to_dict()})
    (_out_dir(cfg) / "flops.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moevit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat TOML experiment config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--checkpoint", help="checkpoint written by `train`")
        sp.set_defaults(func=fn)
        return sp

    add("train", cmd_train, "train a model, write checkpoint and metrics")
    sp = add("eval", cmd_eval, "test-set accuracy of a checkpoint")
    sp.add_argument("--algo", default="vanilla", choices=["vanilla", "bpr", "skip"])
    sp = add("sweep-capacity", cmd_sweep_capacity, "accuracy and FLOPs over capacity ratios")
    sp.add_argument("--C", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    sp.add_argument("--algos", default="vanilla,bpr")
    sp.add_argument("--k", default="", help="comma-separated k overrides")
    sp = add("ablate", cmd_ablate, "routing-order, random-router or k' ablations")
    sp.add_argument("--mode", required=True, choices=["routing_order", "random_router", "vary_k"])
    sp.add_argument("--scope", default="cumulative", choices=["single", "cumulative"])
    sp.add_argument("--kind", default="gaussian", choices=["gaussian", "permuted"])
    sp.add_argument("--k", default="", help="k' grid for vary_k")
    sp = add("analyze", cmd_analyze, "routing traces, specialization matrices, histograms")
    sp.add_argument("--algo", default="vanilla", choices=["vanilla", "bpr", "skip"])
    sp = add("flops", cmd_flops, "analytic FLOP report")
    sp.add_argument("--C", dest="C_value", type=float)
    sp.add_argument("--k", dest="k_value", type=int)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"moevit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"moevit: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"moevit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"moevit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
