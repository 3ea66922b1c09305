"""Paired Monte-Carlo robustness experiments.

For every weight trial a vanilla and a convergent trajectory are solved, then
both are tracked with their own LQR gains from identical random initial
perturbations. The report aggregates the error ratio ``E = |dx_f| / |dx_0|``
and the feedback effort ``F = sum |v_i - u_i|^2`` per trajectory and
covariance.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
import yaml

from .hybrid import DomainError, HybridError, HybridSystem, HybridTrajectory, simulate
from .ilqr import (
    CostWeights,
    GainSchedule,
    IterationRecord,
    Problem,
    SolveArtifacts,
    SolverError,
    SolverOptions,
    solve,
    total_cost,
)
from .models import hopper as hop
from .models import quadruped as quad
from .models.task import TaskSpec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TRAJ_KINDS = ("vanilla", "chi")
HIST_BINS = 30
MAX_REDRAWS = 100


class ConfigError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class ModelSpec:
    name: str
    params_type: type
    make_system: Callable
    make_task: Callable
    make_guess: Callable
    positions: tuple[int, ...]
    default_bound: float
    solver_defaults: Mapping[str, Any] = field(default_factory=dict)


MODELS = {
    "hopper": ModelSpec(
        "hopper", hop.HopperParams, hop.hopper_system, hop.hopper_task,
        lambda task, p, system, **kw: hop.hopper_initial_guess(task, p, **kw),
        (0, 1, 2), 100.0,
    ),
    "quadruped": ModelSpec(
        "quadruped", quad.QuadrupedParams, quad.quadruped_system, quad.quadruped_task,
        lambda task, p, system, **kw: quad.quadruped_initial_guess(task, p, system, **kw),
        tuple(range(7)), 100.0,
        # the stance Jacobians of the massless legs make state-space damping stall early
        {"regularize": "control", "rho_raise_alpha": 0.25},
    ),
}


# ---------------------------------------------------------------- config


@dataclass
class WeightTrial:
    """Scalar weights: ``Q_N = q_n I``, ``R = r I`` (or one scalar per mode)."""

    q_chi: float
    q_n: float
    r: Any

    def __post_init__(self):
        if self.q_chi < 0 or self.q_n <= 0:
            raise ConfigError("weight trial needs q_chi >= 0 and q_n > 0")
        vals = self.r.values() if isinstance(self.r, Mapping) else [self.r]
        if any(float(v) <= 0 for v in vals):
            raise ConfigError("input weights must be positive")

    def weights(self, task: TaskSpec, m: int) -> CostWeights:
        n = len(task.x0)
        if isinstance(self.r, Mapping):
            R = {str(k): float(v) * np.eye(m) for k, v in self.r.items()}
        else:
            R = float(self.r) * np.eye(m)
        return CostWeights(Q_N=self.q_n * np.eye(n), R=R, x_goal=task.x_goal, Q_chi=float(self.q_chi))


@dataclass
class ExperimentConfig:
    model: str
    weight_trials: list[WeightTrial]
    covariances: list[float] = field(default_factory=lambda: [1e-4])
    trials: int = 100
    seed: int = 0
    out: str = "out"
    thresholds: list[float] = field(default_factory=lambda: [50.0, 10.0, 5.0])
    bounds: Optional[float] = None
    task: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    initial_guess: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    substeps: int = 10
    warm_start: bool = True

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {sorted(MODELS)}")
        self.weight_trials = [w if isinstance(w, WeightTrial) else _weight_trial(w) for w in self.weight_trials]
        if not self.weight_trials:
            raise ConfigError("at least one weight trial is required")
        if self.trials < 0:
            raise ConfigError("trials must be non-negative")
        if not self.covariances or any(c <= 0 for c in self.covariances):
            raise ConfigError("covariances must be positive")
        if any(a <= b for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError("thresholds must be strictly descending")
        if self.substeps < 1:
            raise ConfigError("substeps must be positive")
        if self.bounds is not None and self.bounds <= 0:
            raise ConfigError("bounds must be positive")
        spec = MODELS[self.model]
        known = {f.name for f in dataclasses.fields(spec.params_type)}
        bad = set(self.params) - known
        if bad:
            raise ConfigError(f"unknown model parameters {sorted(bad)}")
        bad = set(self.solver) - {f.name for f in dataclasses.fields(SolverOptions)}
        if bad:
            raise ConfigError(f"unknown solver options {sorted(bad)}")

    @property
    def spec(self) -> ModelSpec:
        return MODELS[self.model]

    def model_params(self):
        return self.spec.params_type(**self.params)

    def system(self) -> HybridSystem:
        from .hybrid import SimOptions

        bound = self.bounds if self.bounds is not None else self.spec.default_bound
        task = self.task_spec()
        n = len(task.x0)
        opts = SimOptions(substeps=self.substeps, bounds=(-bound * np.ones(n), bound * np.ones(n)))
        return self.spec.make_system(self.model_params(), opts)

    def task_spec(self) -> TaskSpec:
        try:
            return self.spec.make_task(**self.task)
        except TypeError as err:
            raise ConfigError(f"bad task override: {err}") from err

    def solver_options(self) -> SolverOptions:
        try:
            return SolverOptions(**{**self.spec.solver_defaults, **self.solver})
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad solver options: {err}") from err

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weight_trials"] = [dataclasses.asdict(w) for w in self.weight_trials]
        return d


def _weight_trial(d) -> WeightTrial:
    if not isinstance(d, Mapping):
        raise ConfigError("each weight trial must be a mapping with keys q_chi, q_n, r")
    bad = set(d) - {"q_chi", "q_n", "r"}
    if bad or not {"q_chi", "q_n", "r"} <= set(d):
        raise ConfigError(f"weight trial keys must be exactly q_chi, q_n, r (got {sorted(d)})")
    return WeightTrial(float(d["q_chi"]), float(d["q_n"]), d["r"])


def config_from_dict(d: Mapping) -> ExperimentConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("config must be a mapping")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        return ExperimentConfig(**d)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from err
    return config_from_dict(data or {})


# ---------------------------------------------------------------- sampling and rollouts


def trial_stream(seed: int, trial_id: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, trial_id)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial_id)])))


def sample_perturbation(var: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian with covariance ``var * I``."""
    if var < 0:
        raise ValueError("variance must be non-negative")
    return math.sqrt(var) * rng.standard_normal(n)


def _valid_start(system: HybridSystem, mode0: str, x0: np.ndarray) -> bool:
    eps = system.options.eps_guard
    for tr in system.outgoing(mode0):
        g = float(np.real(tr.guard(np.zeros(1), x0[None], np.zeros((1, system.m))))[0])
        if g < -eps:
            return False
    return True


def paired_perturbation(system: HybridSystem, mode0: str, x0: np.ndarray, var: float, seed: int,
                        trial_id: int) -> Optional[np.ndarray]:
    """First draw of the trial's stream that keeps ``x0 + dx0`` inside the start mode's domain.

    The unit draws do not depend on ``var``, so a trial id perturbs along the
    same direction at every covariance.
    """
    rng = trial_stream(seed, trial_id)
    for _ in range(MAX_REDRAWS):
        dx0 = sample_perturbation(var, len(x0), rng)
        if _valid_start(system, mode0, x0 + dx0):
            return dx0
    return None


@dataclass
class TrialRecord:
    trial_id: int
    traj: str
    weight_trial: int
    cov: float
    dx0: tuple[float, ...]
    dxf: tuple[float, ...]
    E: float
    F: float
    E_pos: float
    diverged: bool
    paired: bool = True


def tracked_rollout(system: HybridSystem, nominal: HybridTrajectory, K: np.ndarray, mode0: str,
                    dx0, positions: Sequence[int] = ()) -> dict:
    """Track ``nominal`` with ``v_i = u_i - K_i (x_i - x_nom_i)`` from ``x_nom_0 + dx0``."""
    dx0 = np.asarray(dx0, dtype=float)
    U = nominal.inputs
    X = nominal.states
    effort = [0.0]

    def ctrl(i, x):
        v = U[i] - K[i] @ (x - X[i])
        effort[0] += float(np.sum((v - U[i]) ** 2))
        return v

    n0 = float(np.linalg.norm(dx0))
    try:
        sim = simulate(system, X[0] + dx0, mode0, ctrl, float(nominal.times[0]), float(nominal.times[-1]), nominal.N)
    except HybridError as err:
        log.debug("tracked rollout diverged: %s", err)
        nan = tuple([math.nan] * len(dx0))
        return dict(dxf=nan, E=math.inf, F=effort[0], E_pos=math.inf, diverged=True)
    dxf = sim.states[-1] - X[-1]
    E = float(np.linalg.norm(dxf)) / n0 if n0 > 0 else 0.0
    pos = list(positions)
    p0 = float(np.linalg.norm(dx0[pos])) if pos else 0.0
    E_pos = float(np.linalg.norm(dxf[pos])) / p0 if p0 > 0 else 0.0
    return dict(dxf=tuple(map(float, dxf)), E=E, F=effort[0], E_pos=E_pos, diverged=False)


# ---------------------------------------------------------------- report


@dataclass
class SolveSummary:
    weight_trial: int
    traj: str
    status: str
    J: float
    J_chi: float
    chi: float
    J_vanilla_cost: float
    iterations: int
    seconds: float
    message: str = ""
    log: list[dict] = field(default_factory=list)


@dataclass
class CellSummary:
    weight_trial: int
    traj: str
    cov: float
    n: int
    excluded: int
    mean_E: float
    mean_F: float
    mean_E_pos: float
    success: dict[str, float]
    histogram: list[tuple[float, int]]


@dataclass
class ExperimentReport:
    config: dict
    solves: list[SolveSummary] = field(default_factory=list)
    cells: list[CellSummary] = field(default_factory=list)
    records: list[TrialRecord] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported report format {d.get('format_version')!r}")
        records = [TrialRecord(**{**r, "dx0": tuple(r["dx0"]), "dxf": tuple(r["dxf"])}) for r in d["records"]]
        cells = [CellSummary(**{**c, "histogram": [tuple(b) for b in c["histogram"]]}) for c in d["cells"]]
        return cls(d["config"], [SolveSummary(**s) for s in d["solves"]], cells, records, d["format_version"])

    def cell(self, weight_trial: int, traj: str, cov: float) -> CellSummary:
        for c in self.cells:
            if c.weight_trial == weight_trial and c.traj == traj and c.cov == cov:
                return c
        raise KeyError((weight_trial, traj, cov))

    def solve_summary(self, weight_trial: int, traj: str) -> SolveSummary:
        for s in self.solves:
            if s.weight_trial == weight_trial and s.traj == traj:
                return s
        raise KeyError((weight_trial, traj))


def success_rates(E: Sequence[float], thresholds: Sequence[float]) -> dict[str, float]:
    E = np.asarray(E, dtype=float)
    if len(E) == 0:
        return {str(float(t)): math.nan for t in thresholds}
    return {str(float(t)): float(np.mean(E < t)) for t in thresholds}


def success_curves(report: ExperimentReport, thresholds: Optional[Sequence[float]] = None) -> dict:
    """``{(weight_trial, traj, threshold): [(cov, rate), ...]}`` with covariances ascending."""
    thresholds = thresholds if thresholds is not None else report.config["thresholds"]
    groups: dict[tuple, dict[float, list[float]]] = {}
    for r in report.records:
        groups.setdefault((r.weight_trial, r.traj), {}).setdefault(r.cov, []).append(r.E)
    out = {}
    for (wt, traj), by_cov in groups.items():
        for t in thresholds:
            out[(wt, traj, float(t))] = [(c, success_rates(by_cov[c], [t])[str(float(t))]) for c in sorted(by_cov)]
    return out


def failure_onset(report: ExperimentReport, weight_trial: int, traj: str, threshold: float) -> float:
    """Smallest covariance at which some trial has ``E > threshold`` (inf if none)."""
    covs = [r.cov for r in report.records
            if r.weight_trial == weight_trial and r.traj == traj and not r.E <= threshold]
    return min(covs) if covs else math.inf


def log_histogram(E: Sequence[float], bins: int = HIST_BINS) -> list[tuple[float, int]]:
    """``(left edge, count)`` pairs over log-spaced bins spanning the finite positive samples."""
    E = np.asarray([e for e in E if np.isfinite(e) and e > 0], dtype=float)
    if len(E) == 0:
        return []
    lo, hi = float(E.min()), float(E.max())
    if hi <= lo:
        hi = lo * (1 + 1e-9)
    with np.errstate(over="ignore"):
        edges = np.exp(np.linspace(math.log(lo), math.log(hi), bins + 1))
    edges[0], edges[-1] = lo, hi  # exp(log(.)) may round past the data range
    counts, _ = np.histogram(E, bins=edges)
    return [(float(e), int(c)) for e, c in zip(edges[:-1], counts)]


def summarize_cell(records: Sequence[TrialRecord], thresholds: Sequence[float], weight_trial: int, traj: str,
                   cov: float) -> CellSummary:
    ok = [r for r in records if not r.diverged]
    E_all = [r.E for r in records]

    def mean(vals):
        return float(np.mean(vals)) if len(vals) else math.nan

    return CellSummary(
        weight_trial, traj, cov, len(records), len(records) - len(ok),
        mean([r.E for r in ok]), mean([r.F for r in ok]), mean([r.E_pos for r in ok]),
        success_rates(E_all, thresholds), log_histogram(E_all),
    )


# ---------------------------------------------------------------- solves and artifacts


def solve_pair(config: ExperimentConfig, index: int, modes: Sequence[str] = TRAJ_KINDS,
               system: Optional[HybridSystem] = None) -> dict[str, SolveArtifacts]:
    """Solve one weight trial. The convergent solve starts from the vanilla optimum when both run."""
    system = system or config.system()
    task = config.task_spec()
    w = config.weight_trials[index].weights(task, system.m)
    problem = task.problem(system, w)
    U0 = config.spec.make_guess(task, config.model_params(), system, **config.initial_guess)
    opts = config.solver_options()
    out: dict[str, SolveArtifacts] = {}
    for kind in modes:
        start = U0
        if kind == "chi" and config.warm_start and "vanilla" in out:
            start = out["vanilla"].trajectory.inputs
        t0 = time.perf_counter()
        art = solve(problem, start, mode=kind, options=opts)
        art.seconds = time.perf_counter() - t0  # type: ignore[attr-defined]
        log.info("trial %d %s: J=%.5g chi=%.5g (%s, %d it, %.1fs)", index, kind, art.J, art.chi, art.status,
                 art.iterations, art.seconds)
        out[kind] = art
    return out


def summarize_solve(index: int, kind: str, art: SolveArtifacts, base: CostWeights) -> SolveSummary:
    return SolveSummary(
        index, kind, art.status, float(art.J), float(art.J_chi), float(art.chi),
        float(total_cost(art.trajectory, base)), art.iterations, float(getattr(art, "seconds", 0.0)), art.message,
        [dataclasses.asdict(r) for r in art.log],
    )


def write_solve_csv(path, art: SolveArtifacts) -> None:
    """One row per knot: time, mode, state, input and flattened tracking gain (blank at the last knot)."""
    traj = art.trajectory
    n, m = traj.states.shape[1], traj.inputs.shape[1]
    header = ["knot", "t", "mode"] + [f"x{j}" for j in range(n)] + [f"u{j}" for j in range(m)]
    header += [f"K{a}_{b}" for a in range(m) for b in range(n)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(traj.N + 1):
            row = [i, repr(float(traj.times[i])), traj.modes[i]] + [repr(float(v)) for v in traj.states[i]]
            if i < traj.N:
                row += [repr(float(v)) for v in traj.inputs[i]]
                row += [repr(float(v)) for v in art.tracking_gains.K[i].ravel()]
            else:
                row += [""] * (m + m * n)
            wr.writerow(row)


def read_solve_csv(path) -> tuple[HybridTrajectory, np.ndarray]:
    """Nominal knots and tracking gains; events are not stored and are re-detected in rollouts."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(h.startswith("x") for h in header)
    m = sum(h.startswith("u") for h in header)
    times = np.array([float(r[1]) for r in body])
    modes = tuple(r[2] for r in body)
    states = np.array([[float(v) for v in r[3:3 + n]] for r in body])
    inputs = np.array([[float(v) for v in r[3 + n:3 + n + m]] for r in body[:-1]])
    K = np.array([[float(v) for v in r[3 + n + m:]] for r in body[:-1]]).reshape(-1, m, n)
    return HybridTrajectory(times, states, inputs, modes), K


def solve_name(index: int, kind: str) -> str:
    return f"{index}_{kind}"


# ---------------------------------------------------------------- evaluation


def evaluate(config: ExperimentConfig, nominals: Mapping[tuple[int, str], tuple[HybridTrajectory, np.ndarray]],
             covariances: Sequence[float], trials: int, seed: int,
             system: Optional[HybridSystem] = None) -> tuple[list[TrialRecord], list[CellSummary]]:
    """Paired tracked rollouts for every nominal, covariance and trial id."""
    system = system or config.system()
    task = config.task_spec()
    positions = config.spec.positions
    records: list[TrialRecord] = []
    cells: list[CellSummary] = []
    weight_ids = sorted({k[0] for k in nominals})
    for wt in weight_ids:
        kinds = [k for k in TRAJ_KINDS if (wt, k) in nominals]
        for cov in covariances:
            cell_records: dict[str, list[TrialRecord]] = {k: [] for k in kinds}
            for tid in range(trials):
                dx0 = paired_perturbation(system, task.mode0, nominals[(wt, kinds[0])][0].states[0], cov, seed, tid)
                if dx0 is None:
                    raise EvaluationError(f"no valid initial perturbation for trial {tid} at cov {cov:g}")
                for k in kinds:
                    traj, K = nominals[(wt, k)]
                    res = tracked_rollout(system, traj, K, task.mode0, dx0, positions)
                    rec = TrialRecord(tid, k, wt, float(cov), tuple(map(float, dx0)), **res,
                                      paired=len(kinds) > 1)
                    cell_records[k].append(rec)
            for k in kinds:
                records.extend(cell_records[k])
                cells.append(summarize_cell(cell_records[k], config.thresholds, wt, k, float(cov)))
    return records, cells


def run_experiment(config: ExperimentConfig, out: Optional[str] = None) -> ExperimentReport:
    """Paired solves for every weight trial, Monte-Carlo evaluation, and report files."""
    out_dir = Path(out or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    system = config.system()
    task = config.task_spec()
    report = ExperimentReport(config.to_dict())
    nominals = {}
    for idx in range(len(config.weight_trials)):
        base = config.weight_trials[idx].weights(task, system.m).with_q_chi(0.0)
        try:
            arts = solve_pair(config, idx, system=system)
        except (SolverError, HybridError) as err:
            log.error("weight trial %d failed: %s", idx, err)
            for kind in TRAJ_KINDS:
                report.solves.append(SolveSummary(idx, kind, "failed", math.nan, math.nan, math.nan, math.nan,
                                                  0, 0.0, str(err)))
            continue
        for kind, art in arts.items():
            report.solves.append(summarize_solve(idx, kind, art, base))
            write_solve_csv(out_dir / f"solve_{solve_name(idx, kind)}.csv", art)
            nominals[(idx, kind)] = (art.trajectory, art.tracking_gains.K)
    if config.trials > 0 and nominals:
        report.records, report.cells = evaluate(config, nominals, config.covariances, config.trials,
                                                config.seed, system)
    write_report(report, out_dir)
    return report


def write_trials_csv(path, records: Sequence[TrialRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["trial_id", "traj", "cov", "E", "F", "diverged"])
        for r in records:
            wr.writerow([r.trial_id, solve_name(r.weight_trial, r.traj), repr(r.cov), repr(r.E), repr(r.F),
                         int(r.diverged)])


def write_report(report: ExperimentReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    write_trials_csv(out_dir / "trials.csv", report.records)


def load_artifacts(art_dir) -> tuple[ExperimentConfig, ExperimentReport, dict]:
    """Config echo, solve summaries and nominal trajectories from a previous ``solve``/``sweep`` output."""
    art_dir = Path(art_dir)
    try:
        report = ExperimentReport.from_json((art_dir / "report.json").read_text())
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise EvaluationError(f"cannot read artifacts in {art_dir}: {err}") from err
    config = config_from_dict(report.config)
    nominals = {}
    for s in report.solves:
        path = art_dir / f"solve_{solve_name(s.weight_trial, s.traj)}.csv"
        if path.exists():
            nominals[(s.weight_trial, s.traj)] = read_solve_csv(path)
    if not nominals:
        raise EvaluationError(f"no solve_<trial>.csv files in {art_dir}")
    return config, report, nominals


def artifacts_from_solve(art: SolveArtifacts) -> tuple[HybridTrajectory, np.ndarray]:
    return art.trajectory, art.tracking_gains.K


def problem_for(config: ExperimentConfig, index: int, system: Optional[HybridSystem] = None) -> Problem:
    system = system or config.system()
    task = config.task_spec()
    return task.problem(system, config.weight_trials[index].weights(task, system.m))


__all__ = [
    "ConfigError", "EvaluationError", "ExperimentConfig", "ExperimentReport", "TrialRecord", "WeightTrial",
    "CellSummary", "SolveSummary", "MODELS", "load_config", "config_from_dict", "sample_perturbation",
    "trial_stream", "paired_perturbation", "tracked_rollout", "run_experiment", "evaluate", "success_curves",
    "success_rates", "failure_onset", "log_histogram", "solve_pair", "write_solve_csv", "read_solve_csv",
    "load_artifacts", "write_report", "GainSchedule", "IterationRecord",
]
