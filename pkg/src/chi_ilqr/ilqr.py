"""Hybrid iLQR with an optional convergence-measure term in the cost.

Vanilla mode minimizes the quadratic cost

    J = dx_N' Q_N dx_N + sum_i [ dx_i' Q dx_i + u_i' R_mode(i) u_i ]

with ``dx_N = x_N - x_goal`` and ``dx_i = x_i - x_ref_i``. Convergent mode
minimizes ``J_chi = Q_chi * chi + J`` where ``chi`` is the spectral norm of the
closed-loop fundamental solution built with the tracking gains of the current
iterate.

Each iteration runs a search backward pass on ``J_chi`` (chi gradients from
the variational module, chi Hessian blocks from a BFGS model), then a
backtracking line search whose every trial is followed by a tracking backward
pass on ``J`` to evaluate ``J_chi`` at the trial trajectory.

Gain convention: ``u = u_nom + k - K (x - x_nom)`` so the closed-loop step
matrix is ``A - B K``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

import numpy as np

from .hybrid import HybridError, HybridSystem, HybridTrajectory, simulate
from .variational import (
    FactorDerivatives,
    FragilityError,
    FundamentalSolution,
    GrazingError,
    StepFactors,
    bfgs_update,
    chi_gradients,
    factor_derivative_tensors,
    fundamental_solution,
    linearize,
    prefix_products,
)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class BackwardPassError(SolverError):
    """Regularization cap exceeded without a positive definite ``Q_uu``."""


@dataclass
class CostWeights:
    """Quadratic weights; ``R`` is one matrix or a mapping from mode label to matrix."""

    Q_N: np.ndarray
    R: Union[np.ndarray, Mapping[str, np.ndarray]]
    x_goal: np.ndarray
    Q_chi: float = 0.0
    Q: Optional[np.ndarray] = None
    x_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Q_N = np.asarray(self.Q_N, dtype=float)
        self.x_goal = np.asarray(self.x_goal, dtype=float)
        if self.Q_chi < 0:
            raise ValueError("Q_chi must be non-negative")
        for name, M in [("Q_N", self.Q_N), ("Q", self.Q)] + [(f"R[{k}]", v) for k, v in self._R_items()]:
            if M is None:
                continue
            M = np.asarray(M, dtype=float)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
        for k, v in self._R_items():
            if np.min(np.linalg.eigvalsh(np.asarray(v, dtype=float))) <= 0:
                raise ValueError(f"R[{k}] must be positive definite")

    def _R_items(self):
        if isinstance(self.R, Mapping):
            return list(self.R.items())
        return [("*", self.R)]

    def R_for(self, mode: str) -> np.ndarray:
        if isinstance(self.R, Mapping):
            return np.asarray(self.R[mode], dtype=float)
        return np.asarray(self.R, dtype=float)

    def with_q_chi(self, q_chi: float) -> "CostWeights":
        return replace(self, Q_chi=float(q_chi))


@dataclass
class GainSchedule:
    k: np.ndarray  # (N, m)
    K: np.ndarray  # (N, m, n)

    def __post_init__(self):
        if len(self.k) != len(self.K):
            raise ValueError("feedforward and feedback schedules differ in length")
        if not (np.all(np.isfinite(self.k)) and np.all(np.isfinite(self.K))):
            raise ValueError("gain schedule has non-finite entries")

    @property
    def N(self) -> int:
        return len(self.K)


@dataclass(frozen=True)
class Problem:
    system: HybridSystem
    x0: np.ndarray
    mode0: str
    weights: CostWeights
    tf: float
    N: int
    t0: float = 0.0


@dataclass
class SolverOptions:
    n_iterations: int = 100
    armijo_c: float = 1e-4
    alpha_min: float = 1.0 / 64
    rho_min: float = 1e-6
    rho_max: float = 1e6
    rho_factor: float = 10.0
    stop_rel_tol: float = 1e-6
    stop_patience: int = 3
    max_exhausted: int = 3
    rho_init: float = 0.0
    rho_raise_alpha: float = 0.5
    rho_exhausted: float = 1e-3
    regularize: str = "state"
    bfgs_rescale: bool = False
    bfgs_init: float = 1e-4
    bfgs_stiffen: float = 10.0  # chi curvature growth after a failed line search
    fd_rel_step: float = 1e-6

    def __post_init__(self):
        if self.regularize not in ("state", "control"):
            raise ValueError(f"regularize must be 'state' or 'control', got {self.regularize!r}")
        if not 0 < self.alpha_min <= 1 or self.rho_factor <= 1:
            raise ValueError("need 0 < alpha_min <= 1 and rho_factor > 1")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    J_chi: float
    chi: float
    alpha: float
    rho: float
    accepted: bool
    fragile_steps: int = 0
    note: str = ""


@dataclass
class TrackingPass:
    trajectory: HybridTrajectory
    factors: list[StepFactors]
    gains: GainSchedule
    fs: FundamentalSolution
    J: float
    J_chi: float
    expected_decrease: float


@dataclass
class SolveArtifacts:
    trajectory: HybridTrajectory
    tracking_gains: GainSchedule
    J: float
    J_chi: float
    chi: float
    weights: CostWeights
    mode: str
    log: list[IterationRecord] = field(default_factory=list)
    status: str = "max_iterations"
    message: str = ""

    @property
    def iterations(self) -> int:
        return sum(r.accepted for r in self.log)


def step_input_weight(traj: HybridTrajectory, w: CostWeights, i: int) -> np.ndarray:
    """``R`` of step ``i`` averaged over the time spent in each mode.

    Charging the start mode's ``R`` for the whole step would make the cost jump
    whenever an event slides across a knot.
    """
    evs = traj.step_events(i)
    R = w.R_for(traj.modes[i])
    if not evs or not isinstance(w.R, Mapping):
        return R
    t, h = traj.times[i], traj.h
    out = np.zeros_like(R)
    for ev in evs:
        out += (ev.time - t) / h * w.R_for(ev.key[0])
        t = ev.time
    return out + (traj.times[i + 1] - t) / h * w.R_for(evs[-1].key[1])


def total_cost(traj: HybridTrajectory, w: CostWeights) -> float:
    """Terminal plus stage cost of a trajectory (deviations from goal and reference)."""
    dN = traj.states[-1] - w.x_goal
    J = float(dN @ w.Q_N @ dN)
    for i in range(traj.N):
        u = traj.inputs[i]
        J += float(u @ step_input_weight(traj, w, i) @ u)
        if w.Q is not None:
            dx = traj.states[i] - (w.x_ref[i] if w.x_ref is not None else 0.0)
            J += float(dx @ w.Q @ dx)
    return J


def _stage_derivatives(traj: HybridTrajectory, w: CostWeights, i: int,
                       factor: Optional[StepFactors] = None):
    n, m = traj.states.shape[1], traj.inputs.shape[1]
    u = traj.inputs[i]
    R = step_input_weight(traj, w, i)
    lu = 2.0 * R @ u
    luu = 2.0 * R
    if w.Q is not None:
        dx = traj.states[i] - (w.x_ref[i] if w.x_ref is not None else 0.0)
        lx, lxx = 2.0 * w.Q @ dx, 2.0 * np.asarray(w.Q, dtype=float)
    else:
        lx, lxx = np.zeros(n), np.zeros((n, n))
    if factor is not None and factor.event_times is not None and isinstance(w.R, Mapping):
        # event times move the mode split; curvature of t_e itself is dropped
        g = np.zeros(n + m)
        for ev, dt in zip(traj.step_events(i), factor.event_times):
            dR = w.R_for(ev.key[0]) - w.R_for(ev.key[1])
            g += float(u @ dR @ u) / traj.h * dt
        lx = lx + g[:n]
        lu = lu + g[n:]
    return lx, lu, lxx, luu, np.zeros((m, n))


def riccati_pass(traj: HybridTrajectory, factors, w: CostWeights, rho: float = 0.0,
                 extra_grad: Optional[np.ndarray] = None, extra_hess: Optional[np.ndarray] = None,
                 options: SolverOptions = SolverOptions(), return_values: bool = False):
    """Backward Riccati recursion with ``rho * I`` added to ``Q_uu``.

    ``extra_grad`` ``(N, n+m)`` and ``extra_hess`` ``(N, n+m, n+m)`` are added to
    the stage expansions (the chi terms of the search pass). The regularization
    escalates from ``rho`` by ``rho_factor`` (starting at ``rho_min``) until every
    ``Q_uu`` is positive definite. Returns gains, the expected decrease
    ``-sum k' Q_u`` and the regularization used.
    """
    N = traj.N
    n, m = traj.states.shape[1], traj.inputs.shape[1]
    dN = traj.states[-1] - w.x_goal
    while True:
        k = np.zeros((N, m))
        K = np.zeros((N, m, n))
        Vx = 2.0 * w.Q_N @ dN
        Vxx = 2.0 * w.Q_N
        values = [None] * (N + 1)
        values[N] = (Vx, Vxx)
        dec = 0.0
        ok = True
        for i in range(N - 1, -1, -1):
            A, B = factors[i].A, factors[i].B
            lx, lu, lxx, luu, lux = _stage_derivatives(traj, w, i, factors[i])
            if extra_grad is not None:
                lx = lx + extra_grad[i, :n]
                lu = lu + extra_grad[i, n:]
            if extra_hess is not None:
                H = extra_hess[i]
                lxx = lxx + H[:n, :n]
                luu = luu + H[n:, n:]
                lux = lux + H[n:, :n]
            Qx = lx + A.T @ Vx
            Qu = lu + B.T @ Vx
            Qxx = lxx + A.T @ Vxx @ A
            Quu = luu + B.T @ Vxx @ B
            Qux = lux + B.T @ Vxx @ A
            if options.regularize == "state":
                Quu_r = Quu + rho * (B.T @ B)
                Qux_r = Qux + rho * (B.T @ A)
            else:
                Quu_r = Quu + rho * np.eye(m)
                Qux_r = Qux
            Quu_r = 0.5 * (Quu_r + Quu_r.T)
            try:
                L = np.linalg.cholesky(Quu_r)
            except np.linalg.LinAlgError:
                ok = False
                break
            sol = np.linalg.solve(L.T, np.linalg.solve(L, np.hstack([Qu[:, None], Qux_r])))
            k[i] = -sol[:, 0]
            K[i] = sol[:, 1:]
            dec -= float(k[i] @ Qu)
            Vx = Qx - K[i].T @ Qu - K[i].T @ Quu @ k[i] + Qux.T @ k[i]
            Vxx = Qxx + K[i].T @ Quu @ K[i] - K[i].T @ Qux - Qux.T @ K[i]
            Vxx = 0.5 * (Vxx + Vxx.T)
            values[i] = (Vx, Vxx)
        if ok:
            break
        rho = options.rho_min if rho < options.rho_min else rho * options.rho_factor
        if rho > options.rho_max:
            raise BackwardPassError(f"Q_uu not positive definite with regularization up to {options.rho_max:g}")
    gains = GainSchedule(k, K)
    if return_values:
        return gains, dec, rho, values
    return gains, dec, rho


def tracking_backward_pass(system: HybridSystem, traj: HybridTrajectory, w: CostWeights,
                           options: SolverOptions = SolverOptions(),
                           factors: Optional[list[StepFactors]] = None) -> TrackingPass:
    """Riccati pass on ``J``; returns tracking gains, ``Phi`` data and ``J_chi``."""
    if factors is None:
        factors = linearize(system, traj)
    gains, dec, _ = riccati_pass(traj, factors, w, 0.0, options=options)
    fs = fundamental_solution(factors, gains.K, n=system.n)
    J = total_cost(traj, w)
    J_chi = w.Q_chi * fs.chi + J
    return TrackingPass(traj, factors, gains, fs, J, J_chi, dec)


def compute_O(factors: list[StepFactors], K: np.ndarray) -> np.ndarray:
    """Prefix products ``O_i = M_{i-1} ... M_0`` of the closed-loop step matrices."""
    return prefix_products(np.stack([f.closed_loop(K[i]) for i, f in enumerate(factors)]))


def search_backward_pass(tp: TrackingPass, w: CostWeights, chi_grad: Optional[np.ndarray],
                         chi_hess: Optional[np.ndarray], rho: float = 0.0,
                         options: SolverOptions = SolverOptions()):
    """Riccati pass on ``J_chi``; with ``Q_chi = 0`` it reduces to the tracking pass."""
    if w.Q_chi == 0 or chi_grad is None:
        if rho == 0.0:
            return tp.gains, tp.expected_decrease, 0.0
        return riccati_pass(tp.trajectory, tp.factors, w, rho, options=options)
    g = w.Q_chi * chi_grad
    H = w.Q_chi * chi_hess if chi_hess is not None else None
    return riccati_pass(tp.trajectory, tp.factors, w, rho, g, H, options=options)


def line_search_accept(J_new: float, J_old: float, alpha: float, expected_decrease: float,
                       c: float = 1e-4) -> bool:
    """Armijo sufficient-decrease test."""
    if not (np.isfinite(J_new) and np.isfinite(J_old)):
        return False
    if expected_decrease > 0:
        return J_new <= J_old - c * alpha * expected_decrease
    return J_new <= J_old


def rollout(problem: Problem, U: np.ndarray, prev: Optional[HybridTrajectory] = None,
            gains: Optional[GainSchedule] = None, alpha: float = 1.0) -> tuple[HybridTrajectory, float]:
    """Open-loop rollout of ``U``, or a forward pass around ``prev`` with search gains."""
    if prev is None:
        ctrl = lambda i, x: U[i]
    else:
        Up, Xp = prev.inputs, prev.states
        ctrl = lambda i, x: Up[i] + alpha * gains.k[i] - gains.K[i] @ (x - Xp[i])
    traj = simulate(problem.system, problem.x0, problem.mode0, ctrl, problem.t0, problem.tf, problem.N)
    return traj, total_cost(traj, problem.weights)


def _stack(traj: HybridTrajectory) -> np.ndarray:
    return np.hstack([traj.states[:-1], traj.inputs]).ravel()


def _chi_derivs(system, traj, options):
    try:
        return factor_derivative_tensors(system, traj, rel_step=options.fd_rel_step, on_fragile="skip")
    except GrazingError:
        return {}, list(range(traj.N))


def solve(problem: Problem, U_init, mode: str = "chi", options: SolverOptions = SolverOptions(),
          n_iterations: Optional[int] = None) -> SolveArtifacts:
    """Run hybrid iLQR (``mode='vanilla'``) or convergent iLQR (``mode='chi'``)."""
    if mode not in ("vanilla", "chi"):
        raise ValueError(f"unknown solver mode {mode!r}")
    w = problem.weights if mode == "chi" else problem.weights.with_q_chi(0.0)
    n_it = options.n_iterations if n_iterations is None else n_iterations
    system = problem.system
    U_init = np.asarray(U_init, dtype=float)
    try:
        traj, _ = rollout(problem, U_init)
        tp = tracking_backward_pass(system, traj, w, options)
    except (HybridError, GrazingError, BackwardPassError) as err:
        raise SolverError(f"initial rollout failed: {err}") from err

    records: list[IterationRecord] = [IterationRecord(0, tp.J, tp.J_chi, tp.fs.chi, 0.0, 0.0, True)]
    D = system.n + system.m
    use_chi = w.Q_chi > 0
    h_scale = options.bfgs_init
    H = h_scale * np.eye(problem.N * D) if use_chi else None
    fresh = True
    prev_z = prev_g = None
    prev_sig = None
    rho = options.rho_init
    exhausted = 0
    small = 0
    status, message = "max_iterations", ""

    for it in range(1, n_it + 1):
        grad = None
        hess_blocks = None
        fragile = 0
        if use_chi:
            derivs, fragile_steps = _chi_derivs(system, tp.trajectory, options)
            fragile = len(fragile_steps)
            grad = chi_gradients(tp.fs, derivs, tp.gains.K, N=problem.N, D=D)
            z = _stack(tp.trajectory)
            sig = tp.trajectory.signature()
            if prev_sig is not None and sig != prev_sig:
                H = h_scale * np.eye(problem.N * D)
                fresh = True
            elif prev_z is not None:
                H_new = bfgs_update(H, z - prev_z, grad.ravel() - prev_g, rescale=fresh and options.bfgs_rescale)
                fresh = fresh and H_new is H
                H = H_new
            prev_z, prev_g, prev_sig = z, grad.ravel(), sig
            hess_blocks = np.stack([H[i * D:(i + 1) * D, i * D:(i + 1) * D] for i in range(problem.N)])
        try:
            gains, dec, rho_used = search_backward_pass(tp, w, grad, hess_blocks, rho, options)
        except BackwardPassError as err:
            status, message = "backward_pass_failed", str(err)
            records.append(IterationRecord(it, tp.J, tp.J_chi, tp.fs.chi, 0.0, rho, False, fragile, message))
            break

        if dec <= 1e-12 * max(1.0, abs(tp.J_chi)):
            status = "converged"
            records.append(IterationRecord(it, tp.J, tp.J_chi, tp.fs.chi, 0.0, rho_used, False, fragile,
                                           "stationary"))
            break

        accepted = None
        alpha = 1.0
        note = ""
        while alpha >= options.alpha_min:
            try:
                traj_new, _ = rollout(problem, None, tp.trajectory, gains, alpha)
                tp_new = tracking_backward_pass(system, traj_new, w, options)
            except (HybridError, GrazingError, BackwardPassError) as err:
                note = f"alpha={alpha:g}: {type(err).__name__}"
                alpha *= 0.5
                continue
            if line_search_accept(tp_new.J_chi, tp.J_chi, alpha, dec, options.armijo_c):
                accepted = tp_new
                break
            alpha *= 0.5

        if accepted is None:
            exhausted += 1
            records.append(IterationRecord(it, tp.J, tp.J_chi, tp.fs.chi, 0.0, rho_used, False, fragile,
                                           note or "line search exhausted"))
            if exhausted >= options.max_exhausted:
                status, message = "line_search_exhausted", f"{exhausted} consecutive line searches failed"
                break
            if use_chi and options.bfgs_stiffen > 1.0:
                # the chi model overpredicts: trust it less before touching rho
                h_scale *= options.bfgs_stiffen
                H = H * options.bfgs_stiffen
                continue
            rho = max(options.rho_exhausted, rho_used * options.rho_factor)
            if rho > options.rho_max:
                status, message = "backward_pass_failed", "regularization cap reached"
                break
            continue

        exhausted = 0
        dJ = abs(accepted.J_chi - tp.J_chi)
        tp = accepted
        if alpha >= 1.0:
            rho = rho_used / options.rho_factor if rho_used > options.rho_min else 0.0
        elif alpha <= options.rho_raise_alpha:
            rho = min(options.rho_max, max(options.rho_min, rho_used * options.rho_factor))
        else:
            rho = rho_used
        rho = max(rho, options.rho_init)
        records.append(IterationRecord(it, tp.J, tp.J_chi, tp.fs.chi, alpha, rho_used, True, fragile))
        log.debug("iter %d J=%.6g chi=%.6g J_chi=%.6g alpha=%g", it, tp.J, tp.fs.chi, tp.J_chi, alpha)
        small = small + 1 if dJ < options.stop_rel_tol * max(1.0, abs(tp.J_chi)) else 0
        if small >= options.stop_patience:
            status = "converged"
            break

    return SolveArtifacts(tp.trajectory, GainSchedule(np.zeros_like(tp.gains.k), tp.gains.K), tp.J, tp.J_chi,
                          tp.fs.chi, w, mode, records, status, message)


def recompute_chi(system: HybridSystem, art: SolveArtifacts) -> float:
    """``chi`` rebuilt from the stored trajectory and tracking gains."""
    factors = linearize(system, art.trajectory)
    return fundamental_solution(factors, art.tracking_gains.K, n=system.n).chi
