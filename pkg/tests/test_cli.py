import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from lfmtwin import cli
from lfmtwin.cli import ExitCode, build_config, csv_text, kf_flops_per_step, main, read_csv, scale_bench

TINY = {
    "study": "sdof_duffing",
    "duration_factor": 0.05,
    "seed": 3,
    "overrides": {"restarts": 1, "train": {"max_epochs": 15}},
}


def write_config(path: Path, **extra) -> Path:
    cfg = dict(TINY)
    cfg.update(extra)
    path.write_text(yaml.safe_dump(cfg))
    return path


def artifacts(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "run.yaml")
    code = main(["pipeline", "--config", str(cfg), "--out", str(root / "a"), "--quiet"])
    return root, cfg, code


def test_pipeline_emits_all_stage_artifacts(pipeline_run):
    root, _, code = pipeline_run
    assert code == ExitCode.OK
    out = root / "a"
    for rel in ("simulate/measurements.csv", "simulate/excitation_diagnosis.csv", "simulate/truth_sine.csv",
                "diagnose/theta_map.json", "diagnose/smoothed.csv", "diagnose/objective_trace.csv",
                "map/model.json", "map/training_trace.csv",
                "predict/predicted_sine.csv", "predict/pseudo_sine.csv", "predict/theta_star_sine.json",
                "predict/nmse_sine.json"):
        assert (out / rel).is_file(), rel
        assert (out / (rel + ".meta.json")).is_file(), rel


def test_sidecars_carry_hash_and_seed(pipeline_run):
    root, _, _ = pipeline_run
    out = root / "a"
    man = json.loads((out / "manifest.json").read_text())
    for side in out.rglob("*.meta.json"):
        meta = json.loads(side.read_text())
        assert meta["seed"] == 3
        assert meta["config_hash"] == man["config_hash"]


def test_manifest_checksums_and_timings(pipeline_run):
    root, _, _ = pipeline_run
    out = root / "a"
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["failed_stage"] is None
    assert set(man["stage_seconds"]) == {"simulate", "diagnose", "map", "predict"}
    assert set(man["artifacts"]) == {str(p) for p in artifacts(out)}
    for rel, digest in man["artifacts"].items():
        assert cli.sha256_file(out / rel) == digest
    assert not list(out.rglob("*.tmp"))


def test_rerun_is_byte_identical(pipeline_run):
    root, cfg, _ = pipeline_run
    assert main(["pipeline", "--config", str(cfg), "--out", str(root / "b"), "--quiet"]) == ExitCode.OK
    a, b = root / "a", root / "b"
    assert artifacts(a) == artifacts(b)
    for rel in artifacts(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_seed_flag_changes_results(pipeline_run):
    root, cfg, _ = pipeline_run
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "s5"), "--seed", "5", "--quiet"]) == 0
    a = (root / "a" / "simulate" / "measurements.csv").read_bytes()
    assert (root / "s5" / "simulate" / "measurements.csv").read_bytes() != a
    meta = json.loads((root / "s5" / "simulate" / "measurements.csv.meta.json").read_text())
    assert meta["seed"] == 5


def test_precomputed_diagnosis_skips_first_two_stages(pipeline_run, tmp_path):
    root, _, _ = pipeline_run
    a = root / "a"
    cfg = write_config(tmp_path / "skip.yaml", artifacts={"diagnosis": str(a / "diagnose"), "simulate": str(a / "simulate")})
    out = tmp_path / "skip"
    assert main(["pipeline", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["skipped_stages"] == ["simulate", "diagnose"]
    assert not (out / "simulate").exists() and not (out / "diagnose").exists()
    # the map is rebuilt from the stored smoothed covariance, so the prediction matches
    assert (out / "predict" / "predicted_sine.csv").read_bytes() == (a / "predict" / "predicted_sine.csv").read_bytes()


def test_stagewise_commands_match_pipeline(pipeline_run, tmp_path):
    root, cfg, _ = pipeline_run
    out = tmp_path / "steps"
    for stage in ("simulate", "diagnose", "map", "predict"):
        assert main([stage, "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    a = root / "a"
    for rel in ("diagnose/smoothed.csv", "map/model.json", "predict/predicted_sine.csv"):
        assert (out / rel).read_bytes() == (a / rel).read_bytes(), rel


def test_csv_full_precision_roundtrip(tmp_path):
    x = np.array([0.1, 1 / 3, -2.5e-300, 1e300, np.pi])
    p = tmp_path / "x.csv"
    p.write_text(csv_text(["a", "b"], [x, -x]))
    header, data = read_csv(p)
    assert header == ["a", "b"]
    np.testing.assert_array_equal(data[:, 0], x)
    np.testing.assert_array_equal(data[:, 1], -x)


def test_config_errors_exit_with_config_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("study: sdof_duffing\nunexpected: 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == ExitCode.CONFIG
    assert "unexpected" in capsys.readouterr().err
    bad.write_text("study: [unterminated\n")
    assert main(["simulate", "--config", str(bad)]) == ExitCode.CONFIG
    missing = write_config(tmp_path / "m.yaml", artifacts={"diagnosis": "does/not/exist"})
    assert main(["pipeline", "--config", str(missing)]) == ExitCode.CONFIG
    assert main(["simulate", "--config", str(tmp_path / "absent.yaml")]) == ExitCode.CONFIG


def test_missing_input_artifact_exit_code_and_failure_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "empty"
    assert main(["diagnose", "--config", str(cfg), "--out", str(out), "--quiet"]) == ExitCode.ARTIFACT
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_stage"] == "diagnose"


@pytest.mark.parametrize("stage,target,code", [
    ("simulate", "stage_simulate", ExitCode.SIMULATE),
    ("diagnose", "stage_diagnose", ExitCode.DIAGNOSE),
    ("map", "stage_map", ExitCode.MAP),
    ("predict", "stage_predict", ExitCode.PREDICT),
])
def test_stage_failures_have_distinct_codes(pipeline_run, tmp_path, monkeypatch, capsys, stage, target, code):
    root, _, _ = pipeline_run
    a = root / "a"

    def boom(*args, **kw):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(cli, target, boom)
    cfg = write_config(tmp_path / "c.yaml", artifacts={"simulate": str(a / "simulate"), "diagnosis": str(a / "diagnose"),
                                                      "model": str(a / "map" / "model.json")})
    out = tmp_path / "o"
    assert main([stage, "--config", str(cfg), "--out", str(out), "--quiet"]) == code
    assert f"stage '{stage}' failed" in capsys.readouterr().err
    man = json.loads((out / "manifest.json").read_text())
    assert man["failed_stage"] == stage


def test_pipeline_failure_keeps_partial_artifacts(tmp_path, monkeypatch):
    def boom(*args, **kw):
        raise FloatingPointError("synthetic")

    monkeypatch.setattr(cli, "stage_map", boom)
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "o"
    assert main(["pipeline", "--config", str(cfg), "--out", str(out), "--quiet"]) == ExitCode.MAP
    man = json.loads((out / "manifest.json").read_text())
    assert man["failed_stage"] == "map"
    assert "diagnose/theta_map.json" in man["artifacts"]
    assert (out / "simulate" / "measurements.csv").exists()


def test_config_hash_ignores_output_location(tmp_path):
    a = build_config(TINY, "pipeline", out=tmp_path / "x")
    b = build_config(TINY, "pipeline", out=tmp_path / "y")
    c = build_config(TINY, "pipeline", seed=9, out=tmp_path / "x")
    assert a.config_hash == b.config_hash != c.config_hash


def test_scale_bench_zero_iterations_is_empty(tmp_path):
    rep = scale_bench([1, 3, 5, 7], 0)
    assert rep["entries"] == [] and rep["slope"] is None
    cfg = tmp_path / "sb.yaml"
    cfg.write_text("scale_bench: {iterations: 0}\n")
    assert main(["scale-bench", "--config", str(cfg), "--out", str(tmp_path / "sb"), "--quiet"]) == 0
    report = json.loads((tmp_path / "sb" / "scale_bench" / "report.json").read_text())
    assert report["entries"] == []


def test_scale_bench_rejects_bad_dofs():
    with pytest.raises(ValueError):
        scale_bench([0, 3], 1)
    with pytest.raises(ValueError):
        scale_bench([11], 1)


def test_scale_bench_small_sweep():
    rep = scale_bench([1, 2], 2, n_steps=200)
    assert [e["n_dof"] for e in rep["entries"]] == [1, 2]
    assert all(e["median_seconds"] > 0 for e in rep["entries"])
    assert rep["slope"] is not None and rep["flop_slope"] > 2


def test_flop_model_is_cubic_for_large_systems():
    f = [kf_flops_per_step(2 * n, n, n) for n in (40, 80)]
    assert np.log2(f[1] / f[0]) == pytest.approx(3.0, abs=0.1)
    assert kf_flops_per_step(2, 1, 1) > 0


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "lfmtwin.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for stage in ("simulate", "diagnose", "map", "predict", "pipeline", "scale-bench"):
        assert stage in res.stdout
