import json

import numpy as np
import pytest

from inducing_weights.cli import main
from inducing_weights.datasets import gen_ood_uniform, gen_toy_regression, gen_two_moons, save_csv

TRAIN_CFG = {
    "data": {"name": "two_moons", "n": 120, "noise": 0.1},
    "network": {
        "widths": [2, 8, 2],
        "variant": {"kind": "ffg_u", "M_in": 3, "M_out": 2},
        "likelihood": {"kind": "categorical"},
    },
    "train": {"epochs": 4, "lr": 0.01, "batch_size": 40, "warmup_epochs": 1, "ramp_epochs": 2},
}


def _twice(tmp_path, build):
    """Run ``build(dir)`` in two fresh directories and return the produced files of each."""
    outs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        build(d)
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix != ".csv"})
    return outs


@pytest.fixture
def train_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TRAIN_CFG))
    return path


def _train(d, cfg, seed=3):
    main(["train", "--config", str(cfg), "--seed", str(seed), "--out", str(d / "ckpt.json")])


def test_train_is_deterministic(tmp_path, train_cfg):
    a, b = _twice(tmp_path, lambda d: _train(d, train_cfg))
    assert set(a) == {"ckpt.json", "ckpt.log.jsonl"}
    assert a == b
    assert len(a["ckpt.log.jsonl"].splitlines()) == 4


def test_train_timing_flag(tmp_path, train_cfg):
    main(["train", "--config", str(train_cfg), "--out", str(tmp_path / "c.json"), "--timing"])
    rec = json.loads((tmp_path / "c.log.jsonl").read_text().splitlines()[0])
    assert "wall_ms" in rec


def test_eval_is_deterministic(tmp_path, train_cfg):
    def build(d):
        _train(d, train_cfg)
        test = gen_two_moons(60, 0.1, 99)
        save_csv(d / "test.csv", test.X, test.Y)
        ood = gen_ood_uniform(30, seed=1)
        np.savetxt(d / "ood.csv", ood.T, delimiter=",", header="x0,x1", comments="")
        main(["eval", "--ckpt", str(d / "ckpt.json"), "--data", str(d / "test.csv"), "--ood", str(d / "ood.csv"),
              "--mc", "5", "--seed", "2", "--out", str(d / "report.json")])

    a, b = _twice(tmp_path, build)
    assert a == b
    report = json.loads(a["report.json"])
    assert set(report) == {"accuracy", "nll", "brier", "ece", "auroc", "aupr"}


def test_eval_regression(tmp_path):
    cfg = {
        "data": {"name": "toy"},
        "network": {"widths": [1, 6, 1], "variant": {"kind": "ffg_w"}},
        "train": {"epochs": 3},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    _train(tmp_path, tmp_path / "cfg.json")
    d = gen_toy_regression(5)
    save_csv(tmp_path / "toy.csv", d.X, d.Y)
    main(["eval", "--ckpt", str(tmp_path / "ckpt.json"), "--data", str(tmp_path / "toy.csv"),
          "--out", str(tmp_path / "r.json")])
    assert set(json.loads((tmp_path / "r.json").read_text())) == {"nll", "rmse"}


def test_sample_check_is_deterministic(tmp_path):
    def build(d):
        main(["sample-check", "--shape", "4,3,2,2", "--draws", "3000", "--seed", "1", "--out", str(d / "m.json")])

    a, b = _twice(tmp_path, build)
    assert a == b
    rep = json.loads(a["m.json"])
    assert rep["shape"] == [4, 3, 2, 2] and rep["draws"] == 3000


def test_sample_check_bench_runs(tmp_path):
    main(["sample-check", "--shape", "8,8,2,2", "--draws", "50", "--bench", "--out", str(tmp_path / "b.json")])
    rep = json.loads((tmp_path / "b.json").read_text())
    assert rep["speedup"] > 0


def test_prune_is_deterministic(tmp_path, train_cfg, capsys):
    printed = []

    def build(d):
        _train(d, train_cfg)
        capsys.readouterr()
        main(["prune", "--ckpt", str(d / "ckpt.json"), "--method", "z", "--fraction", "0.5",
              "--out", str(d / "pruned.json")])
        printed.append(capsys.readouterr().out)

    a, b = _twice(tmp_path, build)
    assert a == b and printed[0] == printed[1]
    rep = json.loads(printed[0])
    assert rep["params_before"] - rep["params_after"] == rep["zeroed"]


def test_prune_ffgw(tmp_path, capsys):
    cfg = dict(TRAIN_CFG, network={**TRAIN_CFG["network"], "variant": {"kind": "ffg_w"}})
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    _train(tmp_path, tmp_path / "cfg.json")
    capsys.readouterr()
    main(["prune", "--ckpt", str(tmp_path / "ckpt.json"), "--method", "ffgw", "--fraction", "0.25",
          "--out", str(tmp_path / "p.json")])
    rep = json.loads(capsys.readouterr().out)
    assert rep["zeroed"] == round(0.25 * (3 * 8 + 9 * 2))
    assert rep["params_before"] - rep["params_after"] == 2 * rep["zeroed"]


def test_count_params_is_deterministic(tmp_path):
    def build(d):
        main(["count-params", "--method", "ffg_u", "--M", "64", "--last-M-out", "10", "--out", str(d / "c.json")])

    a, b = _twice(tmp_path, build)
    assert a == b
    assert json.loads(a["c.json"])["deterministic_total"] == 23_520_842


def test_count_params_config_fills_defaults(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"method": "ensemble_u", "K": 3, "M": 8}))
    main(["count-params", "--config", str(tmp_path / "cfg.json"), "--K", "2", "--out", str(tmp_path / "c.json")])
    rep = json.loads((tmp_path / "c.json").read_text())
    assert rep["method"] == "ensemble_u"
    assert rep["per_layer"][0]["M_in"] == 8
    # the explicit --K wins over the config's K
    row = rep["per_layer"][0]
    d_in, d_out = row["d_in"], row["d_out"]
    assert row["count"] == (d_in + row["bias"]) * 8 + d_out * 8 + 16 + 1 + 2 * 64


def test_toy_regression_is_deterministic(tmp_path):
    def build(d):
        main(["toy-regression", "--variant", "ffg_u", "--steps", "15", "--samples", "4", "--mc", "8",
              "--seed", "1", "--out-dir", str(d)])

    a, b = _twice(tmp_path, build)
    assert set(a) == {"toy_ffg_u_seed1.svg", "toy_ffg_u_seed1.json"}
    assert a == b
    svg = a["toy_ffg_u_seed1.svg"].decode()
    assert svg.startswith("<?xml") and 'version="1.1"' in svg and "<script" not in svg
    assert svg.count("<circle") == 100


def test_unknown_dataset_exits(tmp_path):
    cfg = dict(TRAIN_CFG, data={"name": "nope"})
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    with pytest.raises(SystemExit):
        _train(tmp_path, tmp_path / "cfg.json")
