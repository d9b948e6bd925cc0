"""The four case studies as configurable end-to-end runs.

A :class:`CaseStudy` bundles a ground-truth system, the diagnosis
experiment (excitation, sensors, noise), the BNN settings and one or more
prognosis excitations. :func:`run_case` drives simulate -> diagnose -> map
-> predict and scores the prediction against the simulated truth, which is
used for scoring only and never reaches the prognosis code.

Builtin configurations are available through :func:`builtin_study`.
"""
from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .benchmarks import (
    SILVERBOX_FS,
    ExcitationSignal,
    SimulationResult,
    TrueSystem,
    add_measurement_noise,
    bouc_wen,
    coverage,
    filtered_white_noise,
    kanai_tajimi,
    multisine,
    nmse,
    sdof_duffing,
    silverbox_surrogate,
    simulate_true,
    sine,
    three_dof_local_nl,
)
from .bnn import BnnModel, BnnTopology, MapDataset, TrainConfig
from .diagnosis import DiagnosisConfig, DiagnosisResult, MeasurementData, OptimizerConfig, run_diagnosis
from .kalman import SmootherResult, sample_smoothed_marginals
from .prognosis import PrognosisConfig, PrognosisInputs, PrognosisResult, run_prognosis
from .statespace import GpHyperparams, OutputSpec, PhysicalParams

EXCITATION_KINDS = ("kanai_tajimi", "sine", "filtered_white_noise", "multisine", "ramped_noise")


def sub_seed(seed: int, tag: str) -> int:
    """Independent integer seed for a named stream of a run."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(tag.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --------------------------------------------------------------- excitation


@dataclass(frozen=True)
class ExcitationSpec:
    """Recipe for an excitation signal.

    ``target`` is ``"ground"`` for base acceleration or ``"force"`` for an
    external force at ``dof``. ``options`` are passed to the generator.
    """

    kind: str
    target: str = "force"
    dof: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXCITATION_KINDS:
            raise ValueError(f"unknown excitation kind {self.kind!r}")
        if self.target not in ("ground", "force"):
            raise ValueError("target must be 'ground' or 'force'")

    def generate(self, dt: float, duration: float, seed: int) -> ExcitationSignal:
        o = dict(self.options)
        if self.kind == "kanai_tajimi":
            return kanai_tajimi(dt=dt, duration=duration, seed=seed, **o)
        if self.kind == "sine":
            return sine(dt=dt, duration=duration, **o)
        if self.kind == "filtered_white_noise":
            return filtered_white_noise(dt=dt, duration=duration, seed=seed, **o)
        if self.kind == "ramped_noise":
            return ramped_noise(dt=dt, duration=duration, seed=seed, **o)
        n = int(round(duration / dt))
        period = int(o.pop("period_samples", n))
        peak = o.pop("peak", None)
        sig = multisine(dt, period, periods=math.ceil(n / period), seed=seed, **o)
        x = sig.samples[:n]
        if peak is not None:
            x = x * (peak / np.abs(x).max())
        return ExcitationSignal("multisine", x, dt, self.dof)

    def to_dict(self):
        return {"kind": self.kind, "target": self.target, "dof": self.dof, "options": dict(self.options)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("target", "force"), int(d.get("dof", 0)), dict(d.get("options", {})))


def ramped_noise(dt, duration, start=0.2, end=1.0, cutoff=5.0, order=4, amplitude=1.0, seed=0):
    """Filtered noise whose amplitude grows linearly from ``start`` to ``end`` times ``amplitude``."""
    base = filtered_white_noise(dt, duration, cutoff=cutoff, order=order, amplitude=1.0, seed=seed).samples
    env = np.linspace(start, end, base.size) * amplitude
    return ExcitationSignal("ramped_noise", base * env, dt, 0)


# -------------------------------------------------------------- case study


@dataclass(frozen=True)
class CaseStudy:
    name: str
    system: TrueSystem
    dt: float
    diagnosis_excitation: ExcitationSpec
    diagnosis_duration: float
    channels: tuple
    prognosis_excitations: dict
    prognosis_duration: float
    noise_fraction: float = 0.05
    lf_dofs: tuple | None = None
    seed: int = 0
    restarts: int = 5
    mapping_samples: int = 2
    hidden: tuple = (20, 10)
    activation: str = "relu"
    train: TrainConfig = TrainConfig(learning_rate=3e-3, max_epochs=300)
    prognosis_restarts: int = 1
    sample_mode: str = "sample"
    weight_samples: int = 32
    substeps: int = 4
    amplitude_bound: float | None = None

    @property
    def output_spec(self) -> OutputSpec:
        return OutputSpec(tuple((k, int(d)) for k, d in self.channels))

    def nominal(self, force_dofs=(0,)) -> PhysicalParams:
        return self.system.nominal(self.lf_dofs, force_dofs)

    def reduced(self, factor: float) -> "CaseStudy":
        """Same study with durations scaled by ``factor`` (for quick runs)."""
        return replace(self, diagnosis_duration=self.diagnosis_duration * factor,
                       prognosis_duration=self.prognosis_duration * factor)

    def to_dict(self):
        return {
            "name": self.name,
            "system": {"kind": self.system.kind, "params": _plain(self.system.params)},
            "dt": self.dt,
            "diagnosis_excitation": self.diagnosis_excitation.to_dict(),
            "diagnosis_duration": self.diagnosis_duration,
            "channels": [list(c) for c in self.channels],
            "prognosis_excitations": {k: v.to_dict() for k, v in self.prognosis_excitations.items()},
            "prognosis_duration": self.prognosis_duration,
            "noise_fraction": self.noise_fraction,
            "lf_dofs": None if self.lf_dofs is None else list(self.lf_dofs),
            "seed": self.seed,
            "restarts": self.restarts,
            "mapping_samples": self.mapping_samples,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "train": _plain(self.train.__dict__),
            "prognosis_restarts": self.prognosis_restarts,
            "sample_mode": self.sample_mode,
            "weight_samples": self.weight_samples,
            "substeps": self.substeps,
            "amplitude_bound": self.amplitude_bound,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sysd = d.pop("system")
        kw = {
            "system": TrueSystem(sysd["kind"], dict(sysd.get("params", {}))),
            "diagnosis_excitation": ExcitationSpec.from_dict(d.pop("diagnosis_excitation")),
            "prognosis_excitations": {k: ExcitationSpec.from_dict(v) for k, v in d.pop("prognosis_excitations").items()},
            "channels": tuple((c[0], int(c[1])) for c in d.pop("channels")),
        }
        if "train" in d:
            kw["train"] = TrainConfig(**d.pop("train"))
        for key in ("lf_dofs", "hidden"):
            if d.get(key) is not None:
                kw[key] = tuple(d.pop(key))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown case-study keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ----------------------------------------------------------------- builtins


def sdof_study(seed: int = 0) -> CaseStudy:
    return CaseStudy(
        name="sdof_duffing",
        system=sdof_duffing(),
        dt=0.005,
        diagnosis_excitation=ExcitationSpec("kanai_tajimi", "ground", options={"intensity": 6.0}),
        diagnosis_duration=60.0,
        channels=(("acceleration", 0),),
        prognosis_excitations={"sine": ExcitationSpec("sine", options={"amplitude": 8.0, "frequency": 1.0})},
        prognosis_duration=60.0,
        seed=seed,
        restarts=3,
    )


def three_dof_study(seed: int = 0) -> CaseStudy:
    return CaseStudy(
        name="three_dof",
        system=three_dof_local_nl(),
        dt=0.005,
        diagnosis_excitation=ExcitationSpec("kanai_tajimi", "ground", options={"intensity": 6.0}),
        diagnosis_duration=60.0,
        channels=(("acceleration", 0), ("acceleration", 1), ("acceleration", 2)),
        prognosis_excitations={
            "sine": ExcitationSpec("sine", dof=0, options={"amplitude": 8.0, "frequency": 1.0}),
            "filtered_noise": ExcitationSpec("filtered_white_noise", dof=0, options={"amplitude": 5.0, "cutoff": 5.0}),
        },
        prognosis_duration=60.0,
        seed=seed,
        restarts=3,
    )


def bouc_wen_study(seed: int = 0) -> CaseStudy:
    return CaseStudy(
        name="bouc_wen",
        system=bouc_wen(),
        dt=0.002,
        diagnosis_excitation=ExcitationSpec("sine", options={"amplitude": 120.0, "frequency": 1.0}),
        diagnosis_duration=10.0,
        channels=(("displacement", 0), ("acceleration", 0)),
        prognosis_excitations={
            "filtered_noise": ExcitationSpec("filtered_white_noise", options={"amplitude": 40.0, "cutoff": 1.5}),
        },
        prognosis_duration=10.0,
        seed=seed,
        restarts=3,
    )


def silverbox_study(seed: int = 0, fs: float = SILVERBOX_FS) -> CaseStudy:
    bound = 0.075
    return CaseStudy(
        name="silverbox",
        system=silverbox_surrogate(),
        dt=1.0 / fs,
        diagnosis_excitation=ExcitationSpec("multisine", options={"period_samples": 1024, "f_max": 200.0, "peak": bound}),
        diagnosis_duration=3073 / fs,
        channels=(("displacement", 0),),
        prognosis_excitations={
            "ramped_noise": ExcitationSpec("ramped_noise", options={"amplitude": 0.035, "start": 0.2, "end": 1.0, "cutoff": 200.0}),
        },
        prognosis_duration=40000 / fs,
        seed=seed,
        restarts=3,
        amplitude_bound=bound,
    )


BUILTIN = {
    "sdof_duffing": sdof_study,
    "three_dof": three_dof_study,
    "bouc_wen": bouc_wen_study,
    "silverbox": silverbox_study,
}


def builtin_study(name: str, seed: int = 0) -> CaseStudy:
    try:
        return BUILTIN[name](seed)
    except KeyError:
        raise ValueError(f"unknown study {name!r}; choose from {sorted(BUILTIN)}") from None


# ------------------------------------------------------------------ stages


@dataclass
class Experiment:
    """Simulated excitation, truth and (for diagnosis) noisy measurements."""

    excitation: ExcitationSpec
    signal: ExcitationSignal
    truth: SimulationResult
    measurements: np.ndarray | None = None
    noise_cov: np.ndarray | None = None

    @property
    def u(self):
        return self.signal.samples[:, None] if self.excitation.target == "force" else None

    @property
    def ug(self):
        return self.signal.samples if self.excitation.target == "ground" else None


def simulate_experiment(study: CaseStudy, spec: ExcitationSpec, duration: float, tag: str,
                        measure: bool = False) -> Experiment:
    seed = sub_seed(study.seed, tag)
    sig = spec.generate(study.dt, duration, seed)
    force_dofs = (spec.dof,)
    kw = {"u": sig.samples[:, None]} if spec.target == "force" else {"ug": sig.samples}
    truth = simulate_true(study.system, study.dt, force_dofs=force_dofs, substeps=study.substeps, **kw)
    exp = Experiment(spec, sig, truth)
    if measure:
        noisy = add_measurement_noise(truth.channels(study.output_spec), study.noise_fraction, sub_seed(study.seed, tag + "/noise"))
        exp.measurements = noisy.values
        exp.noise_cov = noisy.noise_cov
    return exp


def diagnose_experiment(study: CaseStudy, exp: Experiment) -> DiagnosisResult:
    return diagnose_arrays(study, exp.measurements, exp.noise_cov, exp.u, exp.ug, exp.excitation.dof)


def diagnose_arrays(study: CaseStudy, y, noise_cov, u=None, ug=None, dof: int = 0) -> DiagnosisResult:
    params = study.nominal((dof,))
    data = MeasurementData(study.dt, y, study.output_spec, noise_cov, u=u, ug=ug)
    cfg = DiagnosisConfig(optimizer=OptimizerConfig(restarts=study.restarts, seed=sub_seed(study.seed, "diagnosis/opt")))
    return run_diagnosis(params, data, cfg)


def train_map(study: CaseStudy, diag: DiagnosisResult):
    return train_map_from_smoother(study, diag.smoother, diag.n_struct)


def train_map_from_smoother(study: CaseStudy, smoother: SmootherResult, n_struct: int):
    """Fit the BNN on samples of stored smoothed marginals."""
    states, forces = sample_smoothed_marginals(smoother, study.mapping_samples, sub_seed(study.seed, "mapping"), n_struct)
    ds = MapDataset.from_samples(states, forces)
    topo = BnnTopology(states.shape[1], study.hidden, study.activation, n_out=forces.shape[1])
    train_cfg = replace(study.train, seed=sub_seed(study.seed, "bnn"))
    return BnnModel.fit(ds, topo, train_cfg)


def predict_experiment(study: CaseStudy, model: BnnModel, theta: GpHyperparams, exp: Experiment) -> PrognosisResult:
    return predict_arrays(study, model, theta, exp.u, exp.ug, exp.excitation.dof)


def predict_arrays(study: CaseStudy, model: BnnModel, theta: GpHyperparams, u=None, ug=None, dof: int = 0) -> PrognosisResult:
    params = study.nominal((dof,))
    cfg = PrognosisConfig(theta_star_init=theta, seed=sub_seed(study.seed, "prognosis"), sample_mode=study.sample_mode,
                          restarts=study.prognosis_restarts, weight_samples=study.weight_samples)
    return run_prognosis(params, model, PrognosisInputs(study.dt, u=u, ug=ug), cfg)


# ----------------------------------------------------------------- scoring


def score_states(truth: SimulationResult, mean, std, n: int) -> dict:
    """NMSE (percent) of the displacement and velocity vectors and 2-sigma coverage."""
    q, v = truth.q, truth.v
    return {
        "nmse_displacement": nmse(q, mean[:, :n]),
        "nmse_velocity": nmse(v, mean[:, n:2 * n]),
        "coverage_displacement": coverage(q, mean[:, :n], std[:, :n]),
        "coverage_velocity": coverage(v, mean[:, n:2 * n], std[:, n:2 * n]),
    }


def score_diagnosis(study: CaseStudy, diag: DiagnosisResult, exp: Experiment) -> dict:
    n = study.system.n_dof
    xm, xs = diag.states()
    em, es = diag.latent_forces()
    lf = list(range(n)) if study.lf_dofs is None else list(study.lf_dofs)
    true_eta = exp.truth.force[:, lf]
    out = score_states(exp.truth, xm, xs, n)
    out["theta"] = diag.theta_map.to_dict()
    out["eta_rms"] = np.sqrt(np.mean(em**2, axis=0)).tolist()
    out["eta_true_rms"] = np.sqrt(np.mean(true_eta**2, axis=0)).tolist()
    out["eta_rmse"] = np.sqrt(np.mean((em - true_eta) ** 2, axis=0)).tolist()
    out["eta_coverage"] = coverage(true_eta, em, es)
    return out


def nominal_prediction(study: CaseStudy, exp: Experiment) -> SimulationResult:
    """Open-loop response of the linear nominal model (no MFE correction)."""
    m, c, k = study.system.matrices()
    lin = TrueSystem("linear", {"masses": np.diag(m).tolist(), "stiffnesses": study.system.params["stiffnesses"],
                                "dampings": study.system.params.get("dampings", 0.0)})
    kw = {"u": exp.u} if exp.u is not None else {"ug": exp.ug}
    return simulate_true(lin, study.dt, force_dofs=(exp.excitation.dof,), substeps=study.substeps, **kw)


def score_prognosis(study: CaseStudy, res: PrognosisResult, exp: Experiment) -> dict:
    n = study.system.n_dof
    m, s = res.states()
    out = score_states(exp.truth, m, s, n)
    nom = nominal_prediction(study, exp)
    out["nominal_nmse_displacement"] = nmse(exp.truth.q, nom.q)
    out["nominal_nmse_velocity"] = nmse(exp.truth.v, nom.v)
    out["theta_star"] = res.theta_star_map.to_dict()
    if study.amplitude_bound is not None:
        over = np.flatnonzero(np.abs(exp.signal.samples) > study.amplitude_bound)
        split = int(over[0]) if over.size else exp.signal.samples.size
        out["split_index"] = split
        if split > 10:
            t = exp.truth
            out["nmse_displacement_in_range"] = nmse(t.q[:split], m[:split, :n])
            out["nmse_velocity_in_range"] = nmse(t.v[:split], m[:split, n:2 * n])
            out["nominal_nmse_displacement_in_range"] = nmse(t.q[:split], nom.q[:split])
    return out


# -------------------------------------------------------------------- run


@dataclass
class CaseOutcome:
    study: CaseStudy
    diagnosis_experiment: Experiment
    diagnosis: DiagnosisResult
    model: BnnModel
    predictions: dict
    prognosis_experiments: dict
    metrics: dict
    timings: dict


def run_case(study: CaseStudy, excitations=None, log=None) -> CaseOutcome:
    """Run the whole pipeline for ``study`` and score every stage."""
    say = log or (lambda msg: None)
    timings = {}
    t0 = time.perf_counter()
    dexp = simulate_experiment(study, study.diagnosis_excitation, study.diagnosis_duration, "diagnosis", measure=True)
    timings["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    diag = diagnose_experiment(study, dexp)
    timings["diagnose"] = time.perf_counter() - t0
    say(f"[{study.name}] diagnosis theta={diag.theta_map.to_dict()} ({timings['diagnose']:.1f} s)")

    t0 = time.perf_counter()
    model, train_res = train_map(study, diag)
    timings["map"] = time.perf_counter() - t0
    say(f"[{study.name}] BNN trained for {train_res.epochs} epochs ({timings['map']:.1f} s)")

    metrics = {"diagnosis": score_diagnosis(study, diag, dexp), "prognosis": {}}
    predictions, experiments = {}, {}
    names = list(study.prognosis_excitations) if excitations is None else list(excitations)
    t0 = time.perf_counter()
    for name in names:
        spec = study.prognosis_excitations[name]
        pexp = simulate_experiment(study, spec, study.prognosis_duration, f"prognosis/{name}")
        res = predict_experiment(study, model, diag.theta_map, pexp)
        predictions[name], experiments[name] = res, pexp
        metrics["prognosis"][name] = score_prognosis(study, res, pexp)
        say(f"[{study.name}] prognosis {name}: " + ", ".join(
            f"{k}={v:.4g}" for k, v in metrics["prognosis"][name].items() if isinstance(v, float)))
    timings["predict"] = time.perf_counter() - t0
    return CaseOutcome(study, dexp, diag, model, predictions, experiments, metrics, timings)
