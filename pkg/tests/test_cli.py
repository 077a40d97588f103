import csv
import json

import numpy as np
import pytest

from lrvd import __version__
from lrvd.cli import main, parse_list
from lrvd.config import ConfigError, parse_config

SMALL = {
    "task.kind": "regression",
    "task.d_in": 8,
    "task.d_out": 8,
    "task.r_star": 2,
    "task.n_train": 128,
    "task.n_test": 64,
    "model.r_init": 4,
    "train.beta": 0.03,
    "train.steps": 200,
    "train.prune_steps": [100, 200],
    "train.eval_interval": 50,
    "train.eval_k": 2,
}

FULL = {
    "task.kind": "regression",
    "task.r_star": 3,
    "task.spectrum": [3.0, 2.0, 1.0],
    "train.beta": 0.03,
    "train.eval_k": 0,
    "train.eval_interval": 1000,
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def trained(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run"), "--quiet"]) == 0
    return cfg, tmp_path / "run"


# -- config ----------------------------------------------------------------


def test_parse_config_resolves_defaults():
    cfg = parse_config(SMALL)
    res = cfg.resolved()
    assert res["train.beta"] == 0.03 and res["task.noise_std"] == 0.1 and res["train.tau"] == 4.0
    assert all("." in k for k in res)


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="beta"):
        parse_config({k: v for k, v in SMALL.items() if k != "train.beta"})
    with pytest.raises(ConfigError, match="task.colour"):
        parse_config({**SMALL, "task.colour": 1})
    with pytest.raises(ConfigError, match="nonsense"):
        parse_config({**SMALL, "nonsense": 1})
    with pytest.raises(ConfigError, match="task.kind"):
        parse_config({**SMALL, "task.kind": "vision"})
    with pytest.raises(ConfigError, match="model.backbone_seed"):
        parse_config({**SMALL, "model.backbone_seed": 3})


def test_parse_list():
    assert parse_list("0,5,10", int) == [0, 5, 10]
    assert parse_list("1:8", float) == [float(v) for v in range(1, 9)]
    assert parse_list("0:16:4", int) == [0, 4, 8, 12, 16]
    assert parse_list("", int) == []


# -- train -----------------------------------------------------------------


def test_train_writes_bundle(trained):
    _, out = trained
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["r_eff"]) == {"layer0"}
    assert summary["version"] == __version__
    assert summary["config"] == SMALL
    assert summary["resolved_config"]["train.beta"] == 0.03
    rows = [json.loads(line) for line in (out / "run.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [50, 100, 150, 200]
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["extra"]["version"] == __version__


def test_train_is_byte_identical(tmp_path):
    cfg = write(tmp_path, SMALL)
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name), "--quiet"]) == 0
    assert (tmp_path / "a" / "run.jsonl").read_bytes() == (tmp_path / "b" / "run.jsonl").read_bytes()
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()


def test_seed_override_changes_run(tmp_path):
    cfg = write(tmp_path, SMALL)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7", "--quiet"])
    assert (tmp_path / "a" / "run.jsonl").read_bytes() != (tmp_path / "b" / "run.jsonl").read_bytes()
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["resolved_config"]["train.seed"] == 7 and summary["resolved_config"]["task.seed"] == 7


def test_missing_beta_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, {k: v for k, v in SMALL.items() if k != "train.beta"})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "beta" in capsys.readouterr().err


def test_bad_config_files_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"task.kind": "regression",')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    cfg = write(tmp_path, {**SMALL, "train.steps": 50})  # prune steps beyond total
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_numeric_failure_exit_3(tmp_path, capsys):
    cfg = write(tmp_path, {**SMALL, "train.adapter_lr": 1e200, "train.prune_steps": []})
    with np.errstate(all="ignore"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 3
    assert "step" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["--version"]) == 0


# -- eval ------------------------------------------------------------------


def test_eval_rows_and_reproducibility(trained, tmp_path):
    cfg, run = trained
    ck = str(run / "checkpoint.json")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ck, "--config", cfg, "--k", "0,5,10", "--out", str(tmp_path / name), "--quiet"]) == 0
    rows1, rows2 = read_csv(tmp_path / "e1" / "metrics.csv"), read_csv(tmp_path / "e2" / "metrics.csv")
    assert [r["k"] for r in rows1] == ["0", "5", "10"]
    assert list(rows1[0]) == ["k", "accuracy", "ece", "nll", "seconds"]
    assert rows1[0]["nll"] == rows2[0]["nll"]
    manifest = json.loads((tmp_path / "e1" / "eval_manifest.json").read_text())
    assert manifest["config"] == SMALL and manifest["version"] == __version__


def test_eval_errors(trained, tmp_path):
    cfg, run = trained
    ck = str(run / "checkpoint.json")
    assert main(["eval", "--checkpoint", ck, "--config", cfg, "--k", "", "--out", str(tmp_path / "x")]) == 2
    other = write(tmp_path, {**SMALL, "task.d_in": 6}, "other.json")
    assert main(["eval", "--checkpoint", ck, "--config", other, "--k", "0", "--out", str(tmp_path / "x")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text((run / "checkpoint.json").read_text()[:100])
    assert main(["eval", "--checkpoint", str(broken), "--config", cfg, "--k", "0", "--out", str(tmp_path / "x")]) == 2


def test_eval_classification_metrics(tmp_path):
    cfg = write(tmp_path, {
        "task.kind": "classification", "task.n_train": 64, "task.n_test": 128, "task.label_noise": 0.2,
        "model.hidden": 8, "model.r_init": 3, "train.beta": 0.03, "train.steps": 100,
        "train.prune_steps": [], "train.eval_interval": 100,
    })
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r"), "--quiet"]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"), "--config", cfg,
                 "--out", str(tmp_path / "e"), "--quiet"]) == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert [r["k"] for r in rows] == ["0", "5", "10"]
    for r in rows:
        assert 0 <= float(r["accuracy"]) <= 1 and 0 <= float(r["ece"]) <= 1 and float(r["nll"]) > 0


# -- diagnose --------------------------------------------------------------


def test_theorem_suite_report(tmp_path):
    assert main(["diagnose", "--theorem-suite", "--out", str(tmp_path), "--quiet"]) == 0
    report = json.loads((tmp_path / "symmetry_report.json").read_text())
    assert report["probes"] == 1000 and report["failures"] == [] and report["passed"]
    assert report["version"] == __version__


def test_diagnose_trained_rank3_adapter(tmp_path):
    cfg = write(tmp_path, FULL)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r"), "--quiet"]) == 0
    assert main(["diagnose", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"), "--out", str(tmp_path / "d"), "--quiet"]) == 0
    summary = read_csv(tmp_path / "d" / "auc_summary.csv")
    assert len(summary) == 1 and float(summary[0]["improvement"]) > 0
    curves = read_csv(tmp_path / "d" / "energy_curves.csv")
    orderings = {r["ordering"] for r in curves}
    assert orderings == {"svd", "learned-alpha", "random-permutation"}
    ends = [float(r["energy"]) for r in curves if r["step"] == summary[0]["active"]]
    assert ends and all(e == 1.0 for e in ends)


def test_diagnose_zero_update_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, {**SMALL, "train.steps": 0, "train.prune_steps": []})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r"), "--quiet"]) == 0
    assert main(["diagnose", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"), "--out", str(tmp_path / "d")]) == 2
    assert "zero" in capsys.readouterr().err


# -- sweep -----------------------------------------------------------------


def test_tau_sweep_monotone(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["sweep", "--kind", "tau", "--grid", "1:8", "--config", cfg, "--seeds", "0,1", "--out", str(tmp_path), "--quiet"]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    for seed in ("0", "1"):
        counts = [int(r["r_eff"]) for r in rows if r["seed"] == seed]
        assert len(counts) == 8 and counts == sorted(counts)
    assert json.loads((tmp_path / "sweep_manifest.json").read_text())["config"] == SMALL


def test_beta_sweep_row_count(tmp_path):
    cfg = write(tmp_path, {**SMALL, "train.steps": 20, "train.prune_steps": []})
    assert main(["sweep", "--kind", "beta", "--grid", "1e-6,1e-5,1e-4,1e-3,1e-2", "--config", cfg,
                 "--seeds", "0,1,2", "--out", str(tmp_path), "--quiet"]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    data = [r for r in rows if r["seed"] not in ("mean", "std")]
    assert len(data) == 15
    assert len(rows) == 15 + 10


def test_mc_sweep_seconds_roughly_affine(tmp_path):
    cfg = write(tmp_path, {
        "task.kind": "classification", "task.d_in": 32, "task.n_test": 4096, "model.hidden": 64,
        "train.beta": 0.03, "train.steps": 10, "train.prune_steps": [], "train.eval_k": 0,
    })
    assert main(["sweep", "--kind", "mc", "--grid", "0,1,2,4,8,16", "--config", cfg, "--seeds", "0",
                 "--out", str(tmp_path), "--quiet"]) == 0
    rows = [r for r in read_csv(tmp_path / "sweep.csv") if r["seed"] == "0"]
    k = np.array([float(r["k"]) for r in rows])
    t = np.array([float(r["seconds"]) for r in rows])
    slope, intercept = np.polyfit(k[1:], t[1:], 1)
    assert slope > 0
    pred = slope * k[1:] + intercept
    assert np.max(np.abs(t[1:] - pred)) < 0.5 * t[-1]  # loose band for scheduler noise


def test_sweep_invalid_kind_and_grid(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["sweep", "--kind", "gamma", "--grid", "1", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--kind", "tau", "--grid", "", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--kind", "mc", "--grid", "1.5", "--config", cfg, "--out", str(tmp_path)]) == 2
