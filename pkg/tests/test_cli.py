import json

import numpy as np
import pytest
import yaml

from pfonet import cli
from pfonet import experiments as ex


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(root))
    return root


def test_every_preset_validates():
    names = ex.list_presets()
    assert {"relax-onet", "relax-pinn", "ac2d-onet", "ch1d-pinn", "ch1d-onet", "tau-study",
            "smoothness-study", "oracle-relax"} <= set(names)
    for name in names:
        cfg = ex.load_config(name)
        assert cfg["experiment"] in ex.EXPERIMENTS


def test_validate_config_ok(capsys):
    assert cli.main(["validate-config", "relax-onet"]) == cli.EXIT_OK
    assert "ok" in capsys.readouterr().out


@pytest.mark.parametrize("bad,needle", [
    ({"experiment": "nope"}, "unknown experiment"),
    ({"experiment": "relax-onet", "version": 9}, "version"),
    ({"experiment": "relax-onet", "tau": -1}, "tau"),
    ({"experiment": "relax-onet", "grid": {"type": "grid1d", "n": 50}}, "sensors"),
    ({"experiment": "ch1d-onet", "metric": {"kind": "l2"}}, "H^-1"),
    ({"experiment": "relax-onet", "truth": "reference"}, "reference"),
    ({"experiment": "tau-study", "taus": [0.01, 0.03], "horizon": 0.2}, "multiple"),
    ({"experiment": "relax-onet", "thresholds": {"speed": 1}}, "threshold"),
    ({"experiment": "relax-pinn", "network": {"preset": "relaxation"}}, "pinn"),
])
def test_validate_config_failures(tmp_path, capsys, bad, needle):
    assert cli.main(["validate-config", write_cfg(tmp_path, bad)]) == cli.EXIT_VALIDATION
    assert needle in capsys.readouterr().err


def test_missing_config_is_validation_error(capsys):
    assert cli.main(["validate-config", "/no/such/file.yaml"]) == cli.EXIT_VALIDATION


def test_usage_error_is_validation_error():
    assert cli.main(["frobnicate"]) == cli.EXIT_VALIDATION


def test_run_smoothness_writes_artifacts(out_root):
    assert cli.main(["run", "smoothness-study"]) == cli.EXIT_OK
    out = out_root / "smoothness-study"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["monotone"] is True and summary["passed"] is True
    assert (out / "smoothness.csv").read_text().startswith("length_scale,roughness")
    snap = yaml.safe_load((out / "config.yaml").read_text())
    assert ex.resolve_config(snap) == snap


def test_run_oracle_relax_and_rerun_is_byte_identical(out_root, tmp_path):
    assert cli.main(["run", "oracle-relax"]) == cli.EXIT_OK
    out = out_root / "oracle-relax"
    first = (out / "summary.json").read_bytes()
    summary = json.loads(first)
    assert summary["max_rel_error"] < 0.01 and summary["energy_increases"] == 0
    # rerun from the snapshot into a fresh directory
    assert cli.main(["run", str(out / "config.yaml"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "summary.json").read_bytes() == first


def test_seed_override_recorded(out_root):
    assert cli.main(["run", "smoothness-study", "--seed", "5"]) == cli.EXIT_OK
    assert yaml.safe_load((out_root / "smoothness-study" / "config.yaml").read_text())["seed"] == 5


def test_threshold_miss_exit_code(tmp_path, out_root):
    cfg = yaml.safe_load((ex.PRESET_DIR / "oracle-relax.yaml").read_text())
    cfg["thresholds"] = {"max_rel_error": 1e-9}
    cfg["n_steps"] = 5
    assert cli.main(["run", write_cfg(tmp_path, cfg)]) == cli.EXIT_THRESHOLD


def test_runtime_failure_exit_code(tmp_path, out_root, monkeypatch, capsys):
    def boom(cfg, out, jobs):
        raise RuntimeError("solver exploded")

    monkeypatch.setitem(ex.RUNNERS, "smoothness-study", boom)
    assert cli.main(["run", "smoothness-study"]) == cli.EXIT_RUNTIME
    assert "solver exploded" in capsys.readouterr().err


def test_jobs_must_be_positive(out_root):
    assert cli.main(["run", "smoothness-study", "--jobs", "0"]) == cli.EXIT_VALIDATION


def test_one_step_truth_independent_of_jobs():
    cfg = ex.load_config("ch1d-onet")
    setup = ex.Setup.of(cfg)
    rows = np.random.default_rng(0).standard_normal((6, 40)) * 0.3
    serial = ex.one_step_truth(setup, rows, jobs=1)
    parallel = ex.one_step_truth(setup, rows, jobs=3)
    assert np.array_equal(serial, parallel)


def test_compare_self_and_mismatch(out_root, tmp_path, capsys):
    assert cli.main(["run", "oracle-relax"]) == 0
    run = str(out_root / "oracle-relax")
    capsys.readouterr()
    assert cli.main(["compare", run, run, "--json"]) == cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["mse"] == 0.0 and report["r2"] == 1.0 and report["max_error"] == 0.0

    cfg = yaml.safe_load((ex.PRESET_DIR / "oracle-relax.yaml").read_text())
    cfg["grid"]["n"] = 50
    cfg["n_steps"] = 2
    other = tmp_path / "other"
    assert cli.main(["run", write_cfg(tmp_path, cfg), "--out", str(other)]) == 0
    assert cli.main(["compare", run, str(other)]) == cli.EXIT_VALIDATION
    assert "grids differ" in capsys.readouterr().err


def test_compare_min_r2_gate(out_root, capsys):
    assert cli.main(["run", "oracle-relax"]) == 0
    run = str(out_root / "oracle-relax")
    assert cli.main(["compare", run, run, "--min-r2", "0.9"]) == cli.EXIT_OK


def test_export_tidy_csv(out_root, tmp_path):
    assert cli.main(["run", "oracle-relax"]) == 0
    dest = tmp_path / "exp"
    assert cli.main(["export", str(out_root / "oracle-relax"), "--out", str(dest)]) == 0
    lines = (dest / "fields.csv").read_text().splitlines()
    assert lines[0] == "index,node,x,u" and len(lines) == 1 + 101 * 100
    assert "max_rel_error" in (dest / "summary.csv").read_text()


def test_export_missing_run(tmp_path):
    assert cli.main(["export", str(tmp_path)]) == cli.EXIT_VALIDATION


@pytest.mark.parametrize("preset", ex.list_presets())
def test_every_preset_runs_end_to_end_at_toy_size(preset, tmp_path):
    cfg = yaml.safe_load((ex.PRESET_DIR / f"{preset}.yaml").read_text())
    cfg["thresholds"] = {}
    cfg["n_steps"] = 2
    cfg["eval_samples"] = 4
    cfg["samples"] = 8
    cfg.setdefault("sampler", {})["total"] = 16
    cfg["train"] = {**cfg.get("train", {}), "epochs": 2, "eval_every": 1}
    if cfg["train"].get("batch_size"):
        cfg["train"]["batch_size"] = 8
    out = tmp_path / "run"
    assert cli.main(["run", write_cfg(tmp_path, cfg), "--out", str(out)]) == cli.EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and (out / "config.yaml").exists()
