import hashlib
import json

import numpy as np
import pytest

from fpgap.cli import main
from fpgap.core import PerturbationSet
from fpgap.modelio import load_dataset, load_model, package_data
from fpgap.verifier import verify_worst


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def small_config(tmp_path, demo_config):
    cfg = json.loads(json.dumps(demo_config))
    cfg["dataset"]["size"] = 60
    cfg["train"]["epochs"] = 2
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_loadable_model_deterministically(tmp_path, small_config):
    for run in ("a", "b"):
        assert main(["train", "--config", str(small_config), "--out-dir", str(tmp_path / run)]) == 0
    net = load_model(tmp_path / "a" / "demo_model.fpgap")
    assert net.input_shape == (8, 8, 1)
    assert len(load_dataset(tmp_path / "a" / "demo_dataset.fpgap")) == 60
    for name in ("demo_model.fpgap", "demo_model.bin", "demo_dataset.bin", "train_report.json"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)


def test_train_bad_arch_is_usage_error(tmp_path, small_config, capsys):
    code = main(["train", "--config", str(small_config), "--out-dir", str(tmp_path),
                 "--arch", '[{"type": "dense", "out": 3}]'])
    assert code == 2
    assert "dense" in capsys.readouterr().err
    assert main(["train", "--config", str(small_config), "--out-dir", str(tmp_path), "--arch", "{nope"]) == 2


def test_verify_zero_radius_is_robust(demo_dataset):
    idx = demo_dataset.indices("test")[0]
    assert main(["verify", "--index", str(idx), "--eps", "0"]) == 0


def test_verify_matches_library(tmp_path, demo_net, demo_dataset, demo_seeds):
    entry = demo_seeds["seeds"][0]
    idx = entry["index"]
    eps = 0.02
    code = main(["verify", "--index", str(idx), "--eps", str(eps), "--out-dir", str(tmp_path)])
    lib = verify_worst(demo_net, PerturbationSet(demo_dataset.images[idx], eps), int(demo_dataset.labels[idx]))
    report = json.loads((tmp_path / f"verify_{idx}.json").read_text())
    assert report["verdict"] == lib.verdict.value
    assert code == {"Robust": 0, "NotRobust": 10, "Timeout": 11}[lib.verdict.value]


def test_verify_bad_index():
    assert main(["verify", "--index", "100000"]) == 2


def test_errchar_outputs_are_deterministic(tmp_path):
    for run in ("a", "b"):
        assert main(["errchar", "--images", "5", "--steps", "21", "--out-dir", str(tmp_path / run)]) == 0
    for name in ("sweep.csv", "histogram.csv", "errchar_report.json"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)
    rows = (tmp_path / "a" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "delta,backend,linf_change"
    assert all(r.endswith(",0.0") for r in rows[1:] if r.startswith("0.0,"))


def test_quantize_demo(tmp_path, capsys):
    code = main(["quantize-demo", "--inputs", "50", "--measure-inputs", "10", "--out-dir", str(tmp_path)])
    assert code == 0
    assert "aligned: true" in capsys.readouterr().out
    report = json.loads((tmp_path / "quantize_report.json").read_text())
    assert report["aligned"] and not report["control_aligned"]


def test_quantize_demo_refuses_invalid_scheme(capsys):
    assert main(["quantize-demo", "--s0", "0.0078125", "--s1", "0.0078125", "--E", "1e-3", "--inputs", "1"]) == 2
    assert "refused" in capsys.readouterr().err
    # at 2^-8 the measured single-precision error already exceeds half a step
    assert main(["quantize-demo", "--s0", "0.00390625", "--s1", "0.00390625", "--inputs", "1",
                 "--measure-inputs", "20"]) == 2


def test_attack_single_seed(tmp_path, demo_seeds):
    seeds = tmp_path / "seeds.json"
    seeds.write_text(json.dumps({"eps": demo_seeds["eps"], "seeds": [FAST_SEED]}))
    args = ["attack", "--seeds", str(seeds), "--backend", "WINOGRAD_F32", "--iters", "20", "--bias-shift",
            "--time-limit", "120", "--deterministic"]
    code = main(args + ["--out-dir", str(tmp_path / "a")])
    assert code in (0, 10)
    summary = json.loads((tmp_path / "a" / "attack_summary.json").read_text())
    assert summary["quasi_adversarial"] == 1 and "min_test_acc" in summary
    table = (tmp_path / "a" / "attack_summary.txt").read_text()
    assert "WINOGRAD_F32" in table and "min test acc" in table
    report = json.loads((tmp_path / "a" / f"attack_seed_{FAST_SEED['index']}.json").read_text())
    assert report["quasi"]["gap"] < 1e-7
    assert (code == 10) == (report["attacks"]["WINOGRAD_F32"]["status"] == "success")


def test_unknown_backend_is_usage_error(tmp_path):
    assert main(["attack", "--backend", "GPU", "--out-dir", str(tmp_path)]) == 2


FAST_SEED = {"index": 485, "label": 2}
