"""Command-line orchestration: stages, artifacts, manifest and scaling harness.

Every stage reads and writes flat files under ``--out``::

    simulate/   excitation, truth and measurement CSVs
    diagnose/   theta_map.json, smoothed.csv, smoothed_full.csv, objective_trace.csv
    map/        model.json, training_trace.csv
    predict/    predicted_<name>.csv, pseudo_<name>.csv, theta_star_<name>.json, nmse_<name>.json
    manifest.json

Each artifact ``x`` has a provenance sidecar ``x.meta.json`` holding the
config hash and seed. The manifest is written atomically when the command
ends, including after a failure, so partial runs stay inspectable.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace
from enum import IntEnum
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .benchmarks import SimulationError, TrueSystem, add_measurement_noise, coverage, kanai_tajimi, nmse, simulate_true
from .bnn import BnnModel, TrainingError
from .diagnosis import GplfmProblem, MeasurementData, OptimizationError, neg_log_posterior
from .kalman import FilterError, SmootherResult
from .statespace import GpHyperparams, OutputSpec
from .studies import (
    CaseStudy,
    ExcitationSpec,
    builtin_study,
    diagnose_arrays,
    predict_arrays,
    simulate_experiment,
    train_map_from_smoother,
)

log = logging.getLogger("lfmtwin")

STAGES = ("simulate", "diagnose", "map", "predict")


class ExitCode(IntEnum):
    OK = 0
    CONFIG = 2
    SIMULATE = 3
    DIAGNOSE = 4
    MAP = 5
    PREDICT = 6
    SCALE_BENCH = 7
    ARTIFACT = 8


STAGE_CODES = {
    "simulate": ExitCode.SIMULATE,
    "diagnose": ExitCode.DIAGNOSE,
    "map": ExitCode.MAP,
    "predict": ExitCode.PREDICT,
    "scale-bench": ExitCode.SCALE_BENCH,
}


class ConfigError(ValueError):
    pass


class ArtifactError(FileNotFoundError):
    """A stage input artifact is missing or malformed."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = STAGE_CODES[stage]


def tool_version() -> str:
    try:
        return metadata.version("lfmtwin")
    except metadata.PackageNotFoundError:  # running from a source tree
        return "0.0.0+unknown"


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    study: CaseStudy
    stage: str
    seed: int
    out: Path
    artifacts: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    scale_bench: dict = field(default_factory=dict)
    source: Path | None = None

    def hash_payload(self) -> dict:
        # output location and input paths are deliberately excluded so the
        # same experiment hashes identically wherever it is run
        return {
            "study": self.study.to_dict(),
            "seed": self.seed,
            "predict": {k: v for k, v in self.predict.items() if k not in ("excitation_files", "truth_files")},
            "scale_bench": self.scale_bench,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hash_payload(), sort_keys=True, separators=(",", ":"), default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()


CONFIG_KEYS = {"study", "case", "overrides", "duration_factor", "seed", "out", "artifacts", "predict", "scale_bench"}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _resolve_path(p, base: Path) -> Path:
    p = Path(p).expanduser()
    return p if p.is_absolute() else (base / p)


def build_config(raw: dict, stage: str, seed: int | None = None, out=None, base_dir=None) -> RunConfig:
    """Turn a parsed config mapping into a :class:`RunConfig`."""
    raw = dict(raw or {})
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = Path(base_dir or ".")
    if "case" in raw and "study" in raw:
        raise ConfigError("give either 'study' (a builtin name) or 'case', not both")
    try:
        if "case" in raw:
            case = raw["case"]
            if isinstance(case, str):
                case = _read_yaml(_resolve_path(case, base))
            study = CaseStudy.from_dict(case)
        else:
            study = builtin_study(raw.get("study", "sdof_duffing"))
        if raw.get("overrides"):
            study = CaseStudy.from_dict(_deep_merge(study.to_dict(), raw["overrides"]))
        if raw.get("duration_factor") is not None:
            study = study.reduced(float(raw["duration_factor"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid study definition: {exc}") from exc
    run_seed = int(seed if seed is not None else raw.get("seed", study.seed))
    if run_seed < 0:
        raise ConfigError("seed must be non-negative")
    study = replace(study, seed=run_seed)
    out_dir = Path(out) if out is not None else _resolve_path(raw.get("out", "lfmtwin-run"), base)
    artifacts = {k: _resolve_path(v, base) for k, v in (raw.get("artifacts") or {}).items()}
    bad = set(artifacts) - {"simulate", "diagnosis", "model"}
    if bad:
        raise ConfigError(f"unknown artifact keys: {sorted(bad)}")
    for k, p in artifacts.items():
        if not p.exists():
            raise ConfigError(f"artifact '{k}' does not exist: {p}")
    predict = dict(raw.get("predict") or {})
    for key in ("excitation_files", "truth_files"):
        if key in predict:
            predict[key] = {n: _resolve_path(p, base) for n, p in predict[key].items()}
            for p in predict[key].values():
                if not p.exists():
                    raise ConfigError(f"predict file does not exist: {p}")
    bench = dict(raw.get("scale_bench") or {})
    return RunConfig(study, stage, run_seed, out_dir, artifacts, predict, bench)


def _read_yaml(path: Path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path, stage: str, seed: int | None = None, out=None) -> RunConfig:
    path = Path(path)
    cfg = build_config(_read_yaml(path), stage, seed, out, path.parent)
    cfg.source = path
    return cfg


# --------------------------------------------------------------- file I/O


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def atomic_write(path: Path, text: str):
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, columns) -> str:
    """CSV with a header row; floats use ``repr`` so they round-trip exactly."""
    cols = [np.asarray(c, dtype=float).reshape(-1) for c in columns]
    n = cols[0].size if cols else 0
    if any(c.size != n for c in cols):
        raise ValueError("CSV columns have different lengths")
    if len(header) != len(cols):
        raise ValueError("header and columns differ in length")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    rows = np.column_stack(cols) if cols else np.zeros((0, 0))
    for row in rows.tolist():
        w.writerow([repr(v) for v in row])
    return buf.getvalue()


def read_csv(path: Path):
    """Return ``(header, array)``; the array is (rows, columns)."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ArtifactError(f"{path} is empty") from None
        try:
            rows = [[float(x) for x in r] for r in reader if r]
        except ValueError as exc:
            raise ArtifactError(f"{path}: non-numeric entry ({exc})") from None
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: malformed JSON ({exc})") from None


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Tracks artifacts, sidecars and stage timings for one command."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.written: list[Path] = []
        self.timings: dict = {}
        self.skipped: list[str] = []

    def dir(self, stage: str) -> Path:
        d = self.cfg.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def sidecar(self, path: Path, stage: str, extra: dict | None = None) -> dict:
        study = self.cfg.study
        meta = {
            "artifact": path.name,
            "stage": stage,
            "tool_version": tool_version(),
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "study": study.name,
            "dt": study.dt,
            "system": {"kind": study.system.kind, "params": study.to_dict()["system"]["params"]},
        }
        meta.update(extra or {})
        return meta

    def emit(self, path: Path, text: str, stage: str, extra: dict | None = None):
        path = Path(path)
        atomic_write(path, text)
        side = path.with_name(path.name + ".meta.json")
        atomic_write(side, json.dumps(self.sidecar(path, stage, extra), indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.written += [path, side]

    def emit_csv(self, path, header, columns, stage, extra=None):
        self.emit(path, csv_text(header, columns), stage, extra)

    def emit_json(self, path, obj, stage, extra=None):
        self.emit(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", stage, extra)

    def manifest(self, status: str = "ok", failed_stage: str | None = None, message: str | None = None) -> dict:
        out = self.cfg.out.resolve()
        arts = {}
        for p in self.written:
            if p.exists():
                arts[str(p.resolve().relative_to(out))] = sha256_file(p)
        return {
            "tool": "lfmtwin",
            "tool_version": tool_version(),
            "command": self.cfg.stage,
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "status": status,
            "failed_stage": failed_stage,
            "message": message,
            "stage_seconds": self.timings,
            "skipped_stages": self.skipped,
            "artifacts": dict(sorted(arts.items())),
        }

    def write_manifest(self, **kw) -> dict:
        man = self.manifest(**kw)
        atomic_write(self.cfg.out / "manifest.json", json.dumps(man, indent=2) + "\n")
        return man


# ----------------------------------------------------------------- labels


def state_labels(n: int):
    return [f"q{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)]


def lf_labels(study: CaseStudy):
    dofs = range(study.system.n_dof) if study.lf_dofs is None else study.lf_dofs
    return [f"eta{d + 1}" for d in dofs]


def channel_labels(study: CaseStudy):
    return [f"{kind}{dof + 1}" for kind, dof in study.channels]


def excitation_column(spec: ExcitationSpec) -> str:
    return "ground_acceleration" if spec.target == "ground" else f"force_dof{spec.dof + 1}"


def parse_excitation_column(name: str):
    """Inverse of :func:`excitation_column`: returns ``(target, dof)``."""
    if name == "ground_acceleration":
        return "ground", 0
    if name.startswith("force_dof"):
        try:
            return "force", int(name[len("force_dof"):]) - 1
        except ValueError:
            pass
    raise ArtifactError(f"unrecognised excitation column {name!r}")


def _band_columns(labels, mean, std):
    header, cols = [], []
    for j, lab in enumerate(labels):
        header += [f"{lab}_mean", f"{lab}_lower", f"{lab}_upper"]
        cols += [mean[:, j], mean[:, j] - 2 * std[:, j], mean[:, j] + 2 * std[:, j]]
    return header, cols


# ----------------------------------------------------------------- stages


def stage_simulate(run: Run) -> Path:
    st = run.cfg.study
    d = run.dir("simulate")
    n = st.system.n_dof
    jobs = [("diagnosis", st.diagnosis_excitation, st.diagnosis_duration, True)]
    jobs += [(name, spec, st.prognosis_duration, False) for name, spec in st.prognosis_excitations.items()]
    for name, spec, duration, measure in jobs:
        tag = "diagnosis" if measure else f"prognosis/{name}"
        exp = simulate_experiment(st, spec, duration, tag, measure=measure)
        t = exp.truth.t
        extra = {"excitation": spec.to_dict(), "duration": duration, "experiment": name}
        run.emit_csv(d / f"excitation_{name}.csv", ["time", excitation_column(spec)], [t, exp.signal.samples], "simulate", extra)
        header = ["time"] + state_labels(n) + [f"a{i + 1}" for i in range(n)] + [f"mfe{i + 1}" for i in range(n)]
        cols = [t, *exp.truth.q.T, *exp.truth.v.T, *exp.truth.acc.T, *exp.truth.force.T]
        if exp.truth.hysteretic is not None:
            header.append("z")
            cols.append(exp.truth.hysteretic)
        run.emit_csv(d / f"truth_{name}.csv", header, cols, "simulate", extra)
        if measure:
            labels = channel_labels(st)
            clean = exp.truth.channels(st.output_spec)
            noise_std = np.sqrt(np.diag(exp.noise_cov))
            mextra = dict(extra, channels=[list(c) for c in st.channels], noise_fraction=st.noise_fraction,
                          noise_std=noise_std.tolist())
            run.emit_csv(d / "measurements_clean.csv", ["time"] + labels, [t, *clean.T], "simulate", mextra)
            run.emit_csv(d / "measurements.csv", ["time"] + labels, [t, *exp.measurements.T], "simulate", mextra)
    return d


def load_excitation(path: Path):
    """Read an excitation CSV: returns ``(u, ug, dof, n_samples)``."""
    header, data = read_csv(path)
    if len(header) != 2 or header[0] != "time":
        raise ArtifactError(f"{path}: expected columns 'time' and one excitation column")
    target, dof = parse_excitation_column(header[1])
    x = data[:, 1]
    return (x[:, None], None, dof, x.size) if target == "force" else (None, x, dof, x.size)


def stage_diagnose(run: Run, sim_dir: Path) -> Path:
    st = run.cfg.study
    header, y = read_csv(sim_dir / "measurements.csv")
    side = read_json(sim_dir / "measurements.csv.meta.json")
    if header[1:] != channel_labels(st):
        raise ArtifactError(f"measurement channels {header[1:]} do not match the study {channel_labels(st)}")
    u, ug, dof, n_exc = load_excitation(sim_dir / "excitation_diagnosis.csv")
    if n_exc != y.shape[0]:
        raise ArtifactError("excitation and measurements differ in length")
    noise_cov = np.diag(np.asarray(side["noise_std"], float) ** 2)
    try:
        diag = diagnose_arrays(st, y[:, 1:], noise_cov, u, ug, dof)
    except (OptimizationError, FilterError, FloatingPointError, ValueError) as exc:
        raise StageError("diagnose", exc) from exc
    d = run.dir("diagnose")
    n = st.system.n_dof
    labels = state_labels(n) + lf_labels(st)
    summary = diag.summary()
    summary["excitation_dof"] = dof
    run.emit_json(d / "theta_map.json", summary, "diagnose")
    t = diag.times
    mean, std = diag.smoother.means, diag.smoother.std()
    h, cols = _band_columns(labels, mean, std)
    run.emit_csv(d / "smoothed.csv", ["time"] + h, [t] + cols, "diagnose")
    write_full_moments(run, d / "smoothed_full.csv", t, labels, diag.smoother, "diagnose", {"n_struct": diag.n_struct})
    trace = diag.objective_trace
    run.emit_csv(d / "objective_trace.csv", ["evaluation", "best_objective"], [np.arange(1, trace.size + 1), trace], "diagnose")
    return d


def write_full_moments(run, path, t, labels, smoother: SmootherResult, stage, extra):
    dim = len(labels)
    iu = np.triu_indices(dim)
    header = ["time"] + [f"m_{lab}" for lab in labels] + [f"P_{labels[i]}_{labels[j]}" for i, j in zip(*iu)]
    cols = [t, *smoother.means.T, *smoother.covs[:, iu[0], iu[1]].T]
    run.emit_csv(path, header, cols, stage, extra)


def read_full_moments(path: Path) -> tuple[SmootherResult, int]:
    header, data = read_csv(path)
    side = read_json(path.with_name(path.name + ".meta.json"))
    n_m = sum(1 for h in header if h.startswith("m_"))
    iu = np.triu_indices(n_m)
    if len(header) != 1 + n_m + iu[0].size:
        raise ArtifactError(f"{path}: inconsistent moment columns")
    means = np.ascontiguousarray(data[:, 1:1 + n_m])
    covs = np.zeros((data.shape[0], n_m, n_m))
    covs[:, iu[0], iu[1]] = data[:, 1 + n_m:]
    covs[:, iu[1], iu[0]] = data[:, 1 + n_m:]
    return SmootherResult(means, covs, np.zeros((0, n_m, n_m))), int(side["n_struct"])


def stage_map(run: Run, diag_dir: Path) -> Path:
    st = run.cfg.study
    smoother, n_struct = read_full_moments(diag_dir / "smoothed_full.csv")
    if n_struct != 2 * st.system.n_dof:
        raise ArtifactError("diagnosis artifact does not match the study's number of DOFs")
    try:
        model, res = train_map_from_smoother(st, smoother, n_struct)
    except (TrainingError, FloatingPointError, ValueError) as exc:
        raise StageError("map", exc) from exc
    d = run.dir("map")
    extra = {"epochs": res.epochs, "hidden": list(st.hidden), "activation": st.activation}
    run.emit(d / "model.json", json.dumps(model.to_dict()) + "\n", "map", extra)
    trace = np.asarray(res.loss_trace, float)
    run.emit_csv(d / "training_trace.csv", ["epoch", "loss"], [np.arange(1, trace.size + 1), trace], "map")
    return d


def _prognosis_targets(run: Run, sim_dir: Path | None):
    """Map name -> (excitation csv, truth csv or None)."""
    pcfg = run.cfg.predict
    files = pcfg.get("excitation_files")
    truths = pcfg.get("truth_files", {})
    if files:
        return {name: (Path(p), truths.get(name)) for name, p in files.items()}
    if sim_dir is None:
        raise ArtifactError("predict needs either a simulate directory or 'predict.excitation_files'")
    names = pcfg.get("excitations") or list(run.cfg.study.prognosis_excitations)
    out = {}
    for name in names:
        truth = sim_dir / f"truth_{name}.csv"
        out[name] = (sim_dir / f"excitation_{name}.csv", truth if pcfg.get("score", True) and truth.exists() else None)
    return out


def stage_predict(run: Run, model_path: Path, theta_path: Path, sim_dir: Path | None) -> Path:
    st = run.cfg.study
    try:
        model = BnnModel.load(model_path)
    except FileNotFoundError:
        raise ArtifactError(f"missing model {model_path}") from None
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{model_path}: invalid model ({exc})") from None
    theta = GpHyperparams(**read_json(theta_path)["theta_map"])
    n = st.system.n_dof
    d = run.dir("predict")
    for name, (exc_path, truth_path) in _prognosis_targets(run, sim_dir).items():
        u, ug, dof, n_steps = load_excitation(exc_path)
        try:
            res = predict_arrays(st, model, theta, u, ug, dof)
        except (FilterError, OptimizationError, FloatingPointError, ValueError) as exc:
            raise StageError("predict", exc) from exc
        extra = {"excitation_file": exc_path.name, "experiment": name}
        t = res.times
        m, s = res.states()
        h, cols = _band_columns(state_labels(n), m, s)
        run.emit_csv(d / f"predicted_{name}.csv", ["time"] + h, [t] + cols, "predict", extra)
        lfl = lf_labels(st)
        iu = np.triu_indices(len(lfl))
        covs = res.passes.noise_covs
        header = ["time"] + [f"{lab}_value" for lab in lfl] + [f"R_{lfl[i]}_{lfl[j]}" for i, j in zip(*iu)]
        run.emit_csv(d / f"pseudo_{name}.csv", header, [t, *res.passes.values.T, *covs[:, iu[0], iu[1]].T], "predict", extra)
        run.emit_json(d / f"theta_star_{name}.json", res.summary(), "predict", extra)
        if truth_path is not None:
            report = score_against_truth(Path(truth_path), n, m, s)
            run.emit_json(d / f"nmse_{name}.json", report, "predict", dict(extra, truth_file=Path(truth_path).name))
            log.info("predict %s: NMSE q %.4g%%, v %.4g%%", name, report["nmse_displacement"], report["nmse_velocity"])
    return d


def score_against_truth(path: Path, n: int, mean, std) -> dict:
    """Used for scoring only: the truth never enters the prediction."""
    header, data = read_csv(path)
    idx = [header.index(lab) for lab in state_labels(n)]
    truth = data[:, idx]
    if truth.shape != mean.shape:
        raise ArtifactError(f"{path}: truth has {truth.shape[0]} rows, prediction {mean.shape[0]}")
    q, v = truth[:, :n], truth[:, n:]
    return {
        "nmse_displacement": nmse(q, mean[:, :n]),
        "nmse_velocity": nmse(v, mean[:, n:]),
        "coverage_displacement": coverage(q, mean[:, :n], std[:, :n]),
        "coverage_velocity": coverage(v, mean[:, n:], std[:, n:]),
    }


# --------------------------------------------------------------- pipeline


def _timed(run: Run, stage: str, fn, *args):
    t0 = time.perf_counter()
    try:
        return fn(*args)
    finally:
        run.timings[stage] = time.perf_counter() - t0


def _wrap(stage: str, fn, *args):
    try:
        return fn(*args)
    except (StageError, ArtifactError, ConfigError):
        raise
    except (SimulationError, FilterError, OptimizationError, TrainingError, FloatingPointError, ValueError) as exc:
        raise StageError(stage, exc) from exc


def run_pipeline(cfg: RunConfig, run: Run | None = None) -> dict:
    """simulate -> diagnose -> map -> predict, skipping stages whose artifact is given.

    Returns the manifest. A supplied ``artifacts.model`` skips diagnosis
    and mapping; ``artifacts.diagnosis`` skips simulation and diagnosis.
    """
    run = run or Run(cfg)
    arts = cfg.artifacts
    sim_dir = arts.get("simulate")
    diag_dir = arts.get("diagnosis")
    model_path = arts.get("model")
    if model_path is not None and diag_dir is None:
        raise ConfigError("a precomputed model needs the diagnosis artifact for its theta")
    if sim_dir is None and diag_dir is None:
        sim_dir = _timed(run, "simulate", _wrap, "simulate", stage_simulate, run)
    else:
        run.skipped.append("simulate")
    if diag_dir is None:
        diag_dir = _timed(run, "diagnose", _wrap, "diagnose", stage_diagnose, run, sim_dir)
    else:
        run.skipped.append("diagnose")
    if model_path is None:
        map_dir = _timed(run, "map", _wrap, "map", stage_map, run, diag_dir)
        model_path = map_dir / "model.json"
    else:
        run.skipped.append("map")
    _timed(run, "predict", _wrap, "predict", stage_predict, run, model_path, diag_dir / "theta_map.json", sim_dir)
    return run.write_manifest()


def run_stage(cfg: RunConfig, run: Run | None = None) -> dict:
    """Execute a single subcommand (or the pipeline) for ``cfg``."""
    run = run or Run(cfg)
    arts = cfg.artifacts
    stage = cfg.stage
    if stage == "pipeline":
        return run_pipeline(cfg, run)
    if stage == "simulate":
        _timed(run, stage, _wrap, stage, stage_simulate, run)
    elif stage == "diagnose":
        sim = arts.get("simulate", cfg.out / "simulate")
        _timed(run, stage, _wrap, stage, stage_diagnose, run, sim)
    elif stage == "map":
        diag = arts.get("diagnosis", cfg.out / "diagnose")
        _timed(run, stage, _wrap, stage, stage_map, run, diag)
    elif stage == "predict":
        diag = arts.get("diagnosis", cfg.out / "diagnose")
        model = arts.get("model", cfg.out / "map" / "model.json")
        sim = arts.get("simulate", cfg.out / "simulate")
        _timed(run, stage, _wrap, stage, stage_predict, run, model, diag / "theta_map.json", sim if sim.exists() else None)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return run.write_manifest()


# ------------------------------------------------------------ scale bench


def kf_flops_per_step(n_struct: int, n_lf: int, n_meas: int) -> int:
    """Closed-form multiply-add count of one Joseph-form filter step.

    ``d`` is the augmented state size and ``m`` the number of measured
    channels. Matrix products count 2 flops per multiply-add; the Cholesky
    factorisation of the innovation covariance counts m^3/3.
    """
    d, m = n_struct + n_lf, n_meas
    predict = 2 * d * d + 4 * d**3 + d * d              # F m, F P F^T, + Q
    innov = 2 * m * d + 2 * m * d * d + 2 * m * m * d + m * m
    gain = m**3 // 3 + 2 * d * m * m + 2 * d * d * m    # chol(S), solves, P H^T
    joseph = 2 * d * d * m + 4 * d**3 + 2 * d * m * m + 2 * d * m * d + 2 * d * d
    loglik = m * m + 2 * m
    return predict + innov + gain + joseph + loglik


def scale_bench_system(n: int) -> TrueSystem:
    """Shear-storey chain with a cubic spring at DOF 1."""
    return TrueSystem("sdof_duffing", {"masses": [1.0] * n, "stiffnesses": [100.0] * n,
                                       "dampings": [0.2] * n, "knl": 1000.0})


def scale_bench(dofs, iterations: int, seed: int = 0, n_steps: int = 2000, dt: float = 0.005) -> dict:
    """Median wall-clock of the diagnosis objective versus the number of DOFs."""
    dofs = [int(n) for n in dofs]
    if any(n < 1 or n > 10 for n in dofs):
        raise ValueError("dofs must lie in 1..10")
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    report = {"dofs": dofs, "iterations": iterations, "n_steps": n_steps, "dt": dt, "entries": [],
              "slope": None, "flop_slope": None}
    if iterations == 0 or not dofs:
        return report
    ug = kanai_tajimi(dt=dt, duration=n_steps * dt, intensity=2.0, seed=seed).samples
    for n in dofs:
        system = scale_bench_system(n)
        truth = simulate_true(system, dt, ug=ug)
        spec = OutputSpec(tuple(("acceleration", i) for i in range(n)))
        meas = add_measurement_noise(truth.channels(spec), 0.05, seed=seed + n)
        data = MeasurementData(dt, meas.values, spec, meas.noise_cov, ug=ug)
        problem = GplfmProblem.from_data(system.nominal(), data)
        theta = GpHyperparams(np.ones(n), np.ones(n))
        neg_log_posterior(theta, problem)  # warm-up (JIT compilation)
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            neg_log_posterior(theta, problem)
            times.append(time.perf_counter() - t0)
        flops = kf_flops_per_step(2 * n, n, n) * n_steps
        report["entries"].append({"n_dof": n, "state_dim": 3 * n, "median_seconds": float(np.median(times)),
                                  "seconds": times, "model_flops": int(flops)})
    e = report["entries"]
    if len({x["n_dof"] for x in e}) >= 2:
        ln = np.log([x["n_dof"] for x in e])
        report["slope"] = float(np.polyfit(ln, np.log([x["median_seconds"] for x in e]), 1)[0])
        report["flop_slope"] = float(np.polyfit(ln, np.log([x["model_flops"] for x in e]), 1)[0])
    return report


def run_scale_bench(cfg: RunConfig) -> dict:
    run = Run(cfg)
    opts = {"dofs": [1, 3, 5, 7], "iterations": 5, "n_steps": 2000, "dt": 0.005}
    opts.update(cfg.scale_bench)
    unknown = set(opts) - {"dofs", "iterations", "n_steps", "dt"}
    if unknown:
        raise ConfigError(f"unknown scale_bench keys: {sorted(unknown)}")
    try:
        report = _timed(run, "scale-bench", scale_bench, opts["dofs"], int(opts["iterations"]), cfg.seed,
                        int(opts["n_steps"]), float(opts["dt"]))
    except (ValueError, SimulationError, FilterError) as exc:
        raise StageError("scale-bench", exc) from exc
    d = run.dir("scale_bench")
    e = report["entries"]
    run.emit_csv(d / "timings.csv", ["n_dof", "state_dim", "median_seconds", "model_flops"],
                 [[x["n_dof"] for x in e], [x["state_dim"] for x in e], [x["median_seconds"] for x in e],
                  [x["model_flops"] for x in e]], "scale-bench")
    run.emit_json(d / "report.json", report, "scale-bench")
    return run.write_manifest() | {"report": report}


# -------------------------------------------------------------------- main


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfmtwin", description="Latent-force digital-twin pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate truth, excitations and noisy measurements",
        "diagnose": "MAP hyperparameters and smoothed states/latent forces",
        "map": "train the state-to-force BNN on diagnosis samples",
        "predict": "measurement-free prognosis with pseudo-measurements",
        "pipeline": "run all stages, skipping those whose artifacts are supplied",
        "scale-bench": "time the diagnosis objective against the number of DOFs",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, required=name != "scale-bench", help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
        sp.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", force=True)
    stage = args.command
    cfg = None
    try:
        if args.config is not None:
            cfg = load_config(args.config, stage, args.seed, args.out)
        else:
            cfg = build_config({}, stage, args.seed, args.out)
        if stage == "scale-bench":
            man = run_scale_bench(cfg)
            rep = man["report"]
            if rep["slope"] is not None:
                log.info("log-log slope of median objective time vs DOFs: %.3f (FLOP model %.3f)",
                         rep["slope"], rep["flop_slope"])
            return int(ExitCode.OK)
        run = Run(cfg)
        try:
            man = run_stage(cfg, run)
        except StageError as exc:
            run.write_manifest(status="failed", failed_stage=exc.stage, message=str(exc))
            raise
        except ArtifactError as exc:
            run.write_manifest(status="failed", failed_stage=stage, message=str(exc))
            raise
        log.info("%s finished: %d artifacts in %s", stage, len(man["artifacts"]), cfg.out)
        return int(ExitCode.OK)
    except ConfigError as exc:
        print(f"lfmtwin: configuration error: {exc}", file=sys.stderr)
        return int(ExitCode.CONFIG)
    except ArtifactError as exc:
        print(f"lfmtwin: {exc}", file=sys.stderr)
        return int(ExitCode.ARTIFACT)
    except StageError as exc:
        print(f"lfmtwin: {exc}", file=sys.stderr)
        return int(exc.code)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
