import csv
import io
import json
import subprocess
import sys
import time
from collections import defaultdict

import pytest

from moevit.cli import EXIT_CONFIG, EXIT_DIVERGED, config_from_mapping, load_config, main
from moevit.model.train import metric_columns

SMOKE = """
dataset = "relational"
n_train = 128
n_test = 64
steps = 12
batch_size = 16
dim = 16
mlp_dim = 24
heads = 2
k = 2
eval_batch_size = 32
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write(tmp, SMOKE)
    out = tmp / "run"
    t0 = time.perf_counter()
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return cfg, out, time.perf_counter() - t0


def test_train_outputs_and_header(run):
    cfg, out, seconds = run
    assert seconds < 60
    text = (out / "metrics.csv").read_text().splitlines()
    assert text[0].startswith("# config_hash=") and text[1] == "# seed=0"
    mcfg = load_config(cfg).model
    assert text[2].split(",") == metric_columns(mcfg)
    assert len(text) == 3 + 12
    assert (out / "checkpoint.vmoe").exists() and (out / "config.toml").exists()


def test_train_is_byte_identical_and_stored_config_reproduces(run, tmp_path):
    cfg, out, _ = run
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.vmoe").read_bytes() == (out / "checkpoint.vmoe").read_bytes()
    assert main(["train", "--config", str(out / "config.toml"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_seed_flag_changes_run(run, tmp_path):
    cfg, out, _ = run
    assert main(["train", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "s")]) == 0
    text = (tmp_path / "s" / "metrics.csv").read_text()
    assert "# seed=7" in text and text != (out / "metrics.csv").read_text()


def test_missing_config_leaves_no_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["bogus = 1\n", "[model]\ndim = 8\n", 'dim = "wide"\n', "k = 9\n",
                                  'algo = "fifo"\n', "steps = 0\n", "dim = 8\nheads = 3\n", "not toml ==\n"])
def test_invalid_configs_exit_2(tmp_path, text):
    out = tmp_path / "o"
    assert main(["train", "--config", write(tmp_path, text), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_config_types_and_digest():
    a = config_from_mapping({"C": 1, "lr": 0.01})
    assert isinstance(a.model.C, float) and a.model.C == 1.0
    assert a.digest() == config_from_mapping({"C": 1.0, "lr": 0.01, "out": "elsewhere"}).digest()
    assert a.digest() != config_from_mapping({"C": 1.0, "lr": 0.01, "seed": 1}).digest()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    cfg = write(tmp_path, SMOKE + "lr = 1e30\ngrad_clip = 0.0\n")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_DIVERGED


def test_checkpoint_required(run, tmp_path):
    cfg, _, _ = run
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "x.vmoe")]) == EXIT_CONFIG


def test_eval_and_vary_k_agree(run, tmp_path, capsys):
    cfg, out, _ = run
    ck = str(out / "checkpoint.vmoe")
    assert main(["eval", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    acc = json.loads((tmp_path / "eval.json").read_text())["accuracy"]
    assert main(["ablate", "--mode", "vary_k", "--k", "2", "--config", cfg, "--checkpoint", ck,
                 "--out", str(tmp_path)]) == 0
    r = rows(tmp_path / "ablate_vary_k.csv")
    assert len(r) == 1 and r[0]["k_prime"] == "2" and float(r[0]["accuracy"]) == acc


def test_sweep_capacity(run, tmp_path):
    cfg, out, _ = run
    grid = ",".join(f"{c / 10:.1f}" for c in range(1, 11)) + ",4.0"
    assert main(["sweep-capacity", "--config", cfg, "--checkpoint", str(out / "checkpoint.vmoe"),
                 "--C", grid, "--out", str(tmp_path)]) == 0
    r = rows(tmp_path / "sweep_capacity.csv")
    assert len(r) == 22
    van = [x for x in r if x["algo"] == "vanilla"]
    bpr = [x for x in r if x["algo"] == "bpr"]
    flops = [int(x["flops_per_batch"]) for x in van[:10]]
    assert all(a < b for a, b in zip(flops, flops[1:]))
    assert van[-1]["accuracy"] == bpr[-1]["accuracy"]


def test_random_router_rows(run, tmp_path):
    cfg, out, _ = run
    assert main(["ablate", "--mode", "random_router", "--scope", "cumulative", "--config", cfg,
                 "--checkpoint", str(out / "checkpoint.vmoe"), "--out", str(tmp_path)]) == 0
    assert [x["blocks"] for x in rows(tmp_path / "ablate_random_router.csv")] == ["1", "1 3"]


def test_routing_order_ablation(run, tmp_path):
    cfg, _, _ = run
    assert main(["ablate", "--mode", "routing_order", "--config", cfg, "--out", str(tmp_path)]) == 0
    r = rows(tmp_path / "ablate_routing_order.csv")
    assert [x["routing_order"] for x in r] == ["topk_softmax", "softmax_topk"]


def test_analyze_outputs(run, tmp_path):
    cfg, out, _ = run
    args = ["analyze", "--config", cfg, "--checkpoint", str(out / "checkpoint.vmoe")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["class_expert_b1.csv", "class_expert_b3.csv", "experts_per_image.json",
                     "position_expert_b1.csv", "position_expert_b3.csv", "trace.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    trace = rows(tmp_path / "a" / "trace.csv")
    assert len(trace) == 2 * 64 * 17
    sums, counts = defaultdict(lambda: [0.0] * 4), defaultdict(int)
    for r in trace:
        if r["layer"] == "3":
            counts[int(r["label"])] += 1
            for i in range(2):
                sums[int(r["label"])][int(r[f"expert_{i}"])] += float(r[f"weight_{i}"])
    for r in rows(tmp_path / "a" / "class_expert_b3.csv"):
        c = int(r["class"])
        assert int(r["tokens"]) == counts[c]
        for e in range(4):
            assert abs(float(r[f"expert_{e}"]) - sums[c][e] / counts[c]) < 1e-12
    hist = json.loads((tmp_path / "a" / "experts_per_image.json").read_text())
    assert hist["meta"]["seed"] == "0"
    assert sum(hist["experts_per_image"]["1"].values()) == 64


def test_flops_command(run, tmp_path, capsys):
    cfg, _, _ = run
    assert main(["flops", "--config", cfg, "--C", "0.5", "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "flops.json").read_text())
    assert body["C"] == 0.5 and body["report"]["convention"] == "flops = 2 * multiply-adds"
    assert set(body["meta"]) == {"config_hash", "seed"}


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "moevit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("train", "eval", "sweep-capacity", "ablate", "analyze", "flops"):
        assert sub in res.stdout
