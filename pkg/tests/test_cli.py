import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from tagi.attack import report_schema
from tagi.cli import main
from tagi.data import encode_idx
from tagi.net import load
from tagi.rl import RlConfig, sigma_v_at

FIXTURES = Path(__file__).parent / "fixtures"
SMALL_NET = ["--set", "hidden=8", "--set", "activations=tanh"]


def run(tmp, cmd, *extra, out="out"):
    return main([cmd, "--output-dir", str(tmp / out), *extra])


def read(tmp, out, name):
    return (tmp / out / name).read_bytes()


@pytest.fixture(scope="module")
def mnist_tiny(tmp_path_factory):
    """300 bundled digits in their own IDX files."""
    from tagi.data import load_idx

    d = load_idx("data/mnist5k/images-idx3-ubyte.gz", "data/mnist5k/labels-idx1-ubyte.gz")
    root = tmp_path_factory.mktemp("idx")
    img = (d.inputs[:300] * 255).round().astype(np.uint8).reshape(300, 28, 28)
    (root / "img").write_bytes(encode_idx(img))
    (root / "lab").write_bytes(encode_idx(d.labels[:300].astype(np.uint8)))
    (root / "empty_img").write_bytes(encode_idx(np.zeros((0, 28, 28), np.uint8)))
    (root / "empty_lab").write_bytes(encode_idx(np.zeros(0, np.uint8)))
    return root


def idx_args(root, n_train=200, n_test=50, prefix=""):
    return ["--set", "dataset=idx", "--set", f"images={root / (prefix + 'img')}",
            "--set", f"labels={root / (prefix + 'lab')}",
            "--set", f"n_train={n_train}", "--set", f"n_test={n_test}"]


def test_train_toy_and_determinism(tmp_path):
    args = [*SMALL_NET, "--set", "epochs=2", "--set", "n=50"]
    assert run(tmp_path, "train", *args) == 0
    assert run(tmp_path, "train", *args, out="again") == 0
    for f in ("model.tagi", "metrics.csv"):
        assert read(tmp_path, "out", f) == read(tmp_path, "again", f)
    rows = list(csv.reader(open(tmp_path / "out" / "metrics.csv", newline="")))
    assert rows[0] == ["epoch", "log_likelihood", "rmse", "clamped"] and len(rows) == 3
    assert list(load(tmp_path / "out" / "model.tagi").spec.widths) == [1, 8, 1]
    assert run(tmp_path, "train", *args, "--seed", "1", out="other") == 0
    assert read(tmp_path, "other", "model.tagi") != read(tmp_path, "out", "model.tagi")


def test_missing_dataset_exit_2(tmp_path):
    assert run(tmp_path, "train", "--set", "dataset=csv", "--set", "csv=/nope.csv") == 2
    assert run(tmp_path, "train", "--set", "dataset=idx", "--set", "images=/nope") == 2


def test_usage_errors(tmp_path):
    assert run(tmp_path, "train", "--set", "bogus=1") == 2
    assert run(tmp_path, "train", "--set", "epochs=many") == 2
    assert run(tmp_path, "train", "--set", "noequals") == 2
    assert run(tmp_path, "train", "--config", str(tmp_path / "missing.ini")) == 2
    assert main(["nonsense"]) == 2
    assert main(["train", "--threads", "0"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[wrong]\nx = 1\n")
    assert run(tmp_path, "train", "--config", str(bad)) == 2


def test_resolved_config_persisted_and_reusable(tmp_path):
    assert run(tmp_path, "optimize", *SMALL_NET, "--set", "epochs=1", "--set", "n=30", "--set", "alpha=-1") == 0
    resolved = (tmp_path / "out" / "resolved.ini").read_text()
    assert "alpha = -1" in resolved and "output_dir = " in resolved
    # the resolved file reproduces the run on its own
    cfg = tmp_path / "r.ini"
    cfg.write_text(resolved.replace(str(tmp_path / "out"), str(tmp_path / "again")))
    assert main(["optimize", "--config", str(cfg)]) == 0
    assert read(tmp_path, "out", "trace.csv") == read(tmp_path, "again", "trace.csv")


def test_alpha_none_echo(tmp_path):
    assert run(tmp_path, "optimize", *SMALL_NET, "--set", "epochs=0", "--set", "alpha=none") == 0
    assert "alpha = none" in (tmp_path / "out" / "resolved.ini").read_text()


def test_zero_epoch_optimize_returns_start(tmp_path):
    assert run(tmp_path, "optimize", *SMALL_NET, "--set", "epochs=0", "--set", "x0_mean=0.7") == 0
    rows = list(csv.reader(open(tmp_path / "out" / "trace.csv", newline="")))
    assert len(rows) == 2 and float(rows[1][1]) == pytest.approx(0.7)


def test_cubic_start_fixtures_parse():
    from tagi.cli import resolve

    names = sorted(p.name for p in (FIXTURES / "cubic_starts").glob("*.ini"))
    assert names == ["failure_1.9.ini"] + [f"row{k}.ini" for k in range(1, 7)]
    for p in (FIXTURES / "cubic_starts").glob("*.ini"):
        cfg = resolve("optimize", str(p), {}, {})
        assert cfg["dataset"] == "toy_cubic" and cfg["epochs"] == 5


def test_attack_end_to_end(tmp_path, mnist_tiny):
    data = idx_args(mnist_tiny)
    assert run(tmp_path, "train", *data, "--set", "hidden=16", "--set", "activations=relu",
               "--set", "epochs=1", "--set", "output_activation=identity") == 0
    header = next(csv.reader(open(tmp_path / "out" / "metrics.csv", newline="")))
    assert header[-1] == "test_accuracy"
    model = str(tmp_path / "out" / "model.tagi")
    before = (tmp_path / "out" / "model.tagi").read_bytes()
    args = [*data, "--set", f"model_path={model}", "--set", "n_images=6", "--set", "max_epochs=5"]
    assert main(["attack", "--output-dir", str(tmp_path / "a"), *args]) == 0
    assert main(["attack", "--output-dir", str(tmp_path / "b"), "--threads", "2", *args]) == 0
    assert read(tmp_path, "a", "attack_report.json") == read(tmp_path, "b", "attack_report.json")
    doc = json.loads(read(tmp_path, "a", "attack_report.json"))
    jsonschema.validate(doc, report_schema())
    assert doc["parameters_unchanged"] and doc["n_images"] == 6
    assert (tmp_path / "out" / "model.tagi").read_bytes() == before
    empty = ["--set", f"images={mnist_tiny / 'empty_img'}", "--set", f"labels={mnist_tiny / 'empty_lab'}"]
    assert main(["attack", "--output-dir", str(tmp_path / "c"), *args, *empty]) == 2
    assert main(["attack", "--output-dir", str(tmp_path / "d"), *data, "--set", "model_path=/nope"]) == 2


RL_TINY = ["--set", "policy_hidden=8", "--set", "q_hidden=8", "--set", "q_activations=relu",
           "--set", "horizon=16", "--set", "steps=300", "--set", "decay_every=50"]


def test_rl_determinism_and_schedule(tmp_path):
    assert run(tmp_path, "rl", *RL_TINY) == 0
    assert run(tmp_path, "rl", *RL_TINY, out="again") == 0
    assert read(tmp_path, "out", "rewards.csv") == read(tmp_path, "again", "rewards.csv")
    rows = list(csv.DictReader(open(tmp_path / "out" / "rewards.csv", newline="")))
    cfg = RlConfig(sigma_v0=0.5, decay=0.7, decay_every=50, sigma_v_min=0.05)
    assert [float(r["sigma_v"]) for r in rows] == [sigma_v_at(k, cfg) for k in range(300)]


def test_rl_zero_env_and_unknown(tmp_path):
    assert run(tmp_path, "rl", *RL_TINY, "--set", "env=zero", "--set", "gamma=0.9") == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "rewards.csv", newline="")))
    assert {float(r["reward"]) for r in rows} == {0.0}
    assert run(tmp_path, "rl", "--set", "env=cartpole") == 2


def test_oracle_report(tmp_path):
    args = ["--set", "suites=td_targets,exact_conditioning,mutations", "--set", "n_nets=4", "--set", "n_samples=100000"]
    assert run(tmp_path, "oracle", *args) == 0
    assert run(tmp_path, "oracle", *args, out="again") == 0
    assert read(tmp_path, "out", "oracle_report.json") == read(tmp_path, "again", "oracle_report.json")
    rep = json.loads(read(tmp_path, "out", "oracle_report.json"))
    assert rep["passed"] and [s["name"] for s in rep["suites"]] == ["td_targets", "exact_conditioning", "mutations"]
    for s in rep["suites"]:
        assert len(s["checks"]) == s["n_checks"] > 0
        assert all({"name", "delta", "tolerance", "passed"} <= set(c) for c in s["checks"])
    assert run(tmp_path, "oracle", "--set", "suites=nothing") == 2


def test_oracle_failure_exit_1(tmp_path, monkeypatch):
    from tagi import oracles

    monkeypatch.setattr(oracles, "td_suite", lambda seed: oracles.SuiteResult(
        "td_targets", [oracles.Check("broken", 1.0, 0.0, 0.0, False)]))
    assert run(tmp_path, "oracle", "--set", "suites=td_targets") == 1
    rep = json.loads(read(tmp_path, "out", "oracle_report.json"))
    assert not rep["passed"] and rep["suites"][0]["n_failed"] == 1
