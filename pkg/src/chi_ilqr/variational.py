"""Linearized variational data along hybrid trajectories.

Each knot interval is represented by a time-ordered list of augmented factors
acting on ``(dx, du)``::

    flow piece   [[A_s, B_s], [0, I]]      (held input through the piece)
    event        [[Xi,  Xi_u], [0, I]]     (saltation; Xi_u is nonzero when
                                            the guard depends on the input)

Their product ``[[A, B], [0, I]]`` is the exact Jacobian of the discrete step
map, so the closed-loop step matrix under ``u = u_nom - K dx`` is ``A - B K``
and the fundamental solution matrix is the time-ordered product of those.

Jacobians of smooth pieces, guards and resets use complex steps. They are
exact to round-off, which keeps the outer central differences (derivatives of
the factors with respect to ``x_i`` and ``u_i``) accurate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .hybrid import (
    HybridSystem,
    HybridTrajectory,
    ModeSequenceError,
    StepResult,
    Transition,
    advance,
    segment_flow,
)

CSTEP = 1e-30
EPS_TRANSVERSAL = 1e-8
EPS_SV = 1e-8
FD_REL_STEP = 1e-6


class GrazingError(ArithmeticError):
    """Near-tangential guard crossing; the saltation matrix is singular."""


class FragilityError(RuntimeError):
    """Finite-difference perturbations change the event sequence of a step."""

    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"mode sequence is fragile at step {step}")
        self.step = step


def complex_jacobian(fun, Z: np.ndarray, h: float = CSTEP) -> np.ndarray:
    """Jacobian of a row-wise map ``fun: (B, d) -> (B, p)`` at each row of ``Z``.

    Returns ``(B, p, d)``.
    """
    B, d = Z.shape
    Zc = (Z[:, None, :] + 1j * h * np.eye(d)[None]).reshape(B * d, d)
    out = np.asarray(fun(Zc))
    p = out.shape[-1]
    return np.imag(out.reshape(B, d, p)).transpose(0, 2, 1) / h


def discrete_jacobians_batch(system: HybridSystem, seg, U: np.ndarray):
    """``(A, B)`` of one smooth segment for each row, shapes ``(R, n, n)``, ``(R, n, m)``."""
    f = system.modes[seg.mode].dynamics
    n = system.n
    d = n + system.m
    rep = lambda a: np.repeat(a, d, axis=0)
    t0, hs, nf, pa = rep(seg.t0), rep(seg.hs), rep(seg.n_full), rep(seg.partial)

    def fun(zc):
        return segment_flow(f, t0, zc[:, :n], zc[:, n:], hs, nf, pa)

    J = complex_jacobian(fun, np.hstack([seg.x0, U]))
    return J[:, :, :n], J[:, :, n:]


def discrete_jacobians(mode, t_i: float, x_i, u_i, h: float, substeps: int = 10):
    """State and input Jacobians of an event-free knot step of one mode."""
    x_i = np.asarray(x_i, dtype=float)
    u_i = np.atleast_1d(np.asarray(u_i, dtype=float))
    n, m = len(x_i), len(u_i)

    def fun(zc):
        R = len(zc)
        return segment_flow(mode.dynamics, np.full(R, float(t_i)), zc[:, :n], zc[:, n:],
                            np.full(R, h / substeps), np.full(R, substeps), np.zeros(R))

    J = complex_jacobian(fun, np.concatenate([x_i, u_i])[None])[0]
    if not np.all(np.isfinite(J)):
        bad = np.argwhere(~np.isfinite(J))[0]
        raise ArithmeticError(f"non-finite Jacobian entry at output {bad[0]}, coordinate {bad[1]}")
    return J[:, :n], J[:, n:]


def saltation(transition: Transition, f_pre, f_post, x_minus, t_e, u=None,
              eps_transversal: float = EPS_TRANSVERSAL):
    """Saltation matrix ``Xi`` and input column block ``Xi_u`` of an event.

    ``Xi = DxR + (f_post - DxR f_pre - DtR) Dxg / (Dtg + Dxg f_pre)`` and
    ``Xi_u`` is the same outer product with ``Dug``. Batched: ``x_minus`` may be
    ``(B, n)`` with per-row ``t_e``; single events return unbatched arrays.
    """
    single = np.ndim(x_minus) == 1
    X = np.atleast_2d(np.asarray(x_minus, dtype=float))
    B, n = X.shape
    Fm = np.atleast_2d(np.asarray(f_pre, dtype=float))
    Fp = np.atleast_2d(np.asarray(f_post, dtype=float))
    T = np.broadcast_to(np.asarray(t_e, dtype=float), (B,)).astype(float)
    if u is None:
        u = np.zeros((B, 0))
    U = np.broadcast_to(np.atleast_2d(np.asarray(u, dtype=float)), (B, np.shape(u)[-1]))
    m = U.shape[1]

    Z = np.hstack([T[:, None], X, U])

    def reset_fun(zc):
        return transition.reset(zc[:, 0], zc[:, 1:n + 1])

    def guard_fun(zc):
        return transition.guard(zc[:, 0], zc[:, 1:n + 1], zc[:, n + 1:])[:, None]

    JR = complex_jacobian(reset_fun, Z[:, :n + 1])
    Jg = complex_jacobian(guard_fun, Z)[:, 0, :]
    DtR, DxR = JR[:, :, 0], JR[:, :, 1:]
    Dtg, Dxg, Dug = Jg[:, 0], Jg[:, 1:n + 1], Jg[:, n + 1:]
    denom = Dtg + np.einsum("bi,bi->b", Dxg, Fm)
    if np.any(np.abs(denom) <= eps_transversal):
        raise GrazingError(f"guard {transition.key} is crossed tangentially (rate {np.min(np.abs(denom)):.2e})")
    w = Fp - np.einsum("bij,bj->bi", DxR, Fm) - DtR
    Xi = DxR + w[:, :, None] * (Dxg / denom[:, None])[:, None, :]
    Xi_u = w[:, :, None] * (Dug / denom[:, None])[:, None, :]
    if single:
        return Xi[0], Xi_u[0]
    return Xi, Xi_u


def event_time_row(transition: Transition, f_pre, x_minus, t_e, u) -> np.ndarray:
    """Row ``-(Dxg, Dug) / (Dtg + Dxg f_pre)``: event time sensitivity to ``(dx-, du)``."""
    x = np.asarray(x_minus, dtype=float)
    u = np.asarray(u, dtype=float)
    n = len(x)
    Z = np.concatenate([[float(t_e)], x, u])[None]

    def guard_fun(zc):
        return transition.guard(zc[:, 0], zc[:, 1:n + 1], zc[:, n + 1:])[:, None]

    Jg = complex_jacobian(guard_fun, Z)[0, 0]
    denom = Jg[0] + Jg[1:n + 1] @ np.asarray(f_pre, dtype=float)
    if abs(denom) <= EPS_TRANSVERSAL:
        raise GrazingError(f"guard {transition.key} is crossed tangentially (rate {abs(denom):.2e})")
    return -Jg[1:] / denom


def _aug(A, B):
    R, n, m = B.shape
    out = np.zeros((R, n + m, n + m))
    out[:, :n, :n] = A
    out[:, :n, n:] = B
    out[:, n:, n:] = np.eye(m)
    return out


def _factors_from_result(system: HybridSystem, res: StepResult, U: np.ndarray):
    kinds: list[str] = []
    mats: list[np.ndarray] = []
    for k, seg in enumerate(res.segments):
        A, Bm = discrete_jacobians_batch(system, seg, U)
        kinds.append("flow")
        mats.append(_aug(A, Bm))
        if k < len(res.events):
            ev = res.events[k]
            tr = system.transitions[ev.key]
            f_pre = system.modes[tr.source].dynamics(ev.time, ev.x_minus, U)
            f_post = system.modes[tr.target].dynamics(ev.time, ev.x_plus, U)
            Xi, Xi_u = saltation(tr, f_pre, f_post, ev.x_minus, ev.time, U)
            kinds.append("event")
            mats.append(_aug(Xi, Xi_u))
    return tuple(kinds), np.stack(mats, axis=1)  # (R, L, D, D)


@dataclass
class StepFactors:
    """Time-ordered augmented factors of one knot interval."""

    kinds: tuple[str, ...]
    F: np.ndarray  # (L, D, D)
    n: int
    event_times: Optional[np.ndarray] = None  # (E, D) d t_e / d (x_i, u_i)

    @property
    def composite(self) -> np.ndarray:
        C = self.F[0]
        for Fj in self.F[1:]:
            C = Fj @ C
        return C

    @property
    def A(self) -> np.ndarray:
        return self.composite[:self.n, :self.n]

    @property
    def B(self) -> np.ndarray:
        return self.composite[:self.n, self.n:]

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        C = self.composite
        return C[:self.n, :self.n] - C[:self.n, self.n:] @ K

    @property
    def has_event(self) -> bool:
        return "event" in self.kinds


@dataclass
class FactorDerivatives:
    """Central differences of a step's factors w.r.t. ``z = (x_i, u_i)``."""

    kinds: tuple[str, ...]
    F: np.ndarray   # (L, D, D)
    dF: np.ndarray  # (L, D, D, D); dF[j, k] = d F_j / d z_k
    n: int

    def _sides(self, K):
        L, D = self.F.shape[:2]
        n = self.n
        right = [np.vstack([np.eye(n), -K])]  # (D, n) maps dx_i to (dx, du)
        for j in range(L - 1):
            right.append(self.F[j] @ right[-1])
        left = [np.hstack([np.eye(n), np.zeros((n, D - n))])]
        for j in range(L - 1, 0, -1):
            left.append(left[-1] @ self.F[j])
        left = left[::-1]
        return left, right

    def closed_loop_tensor(self, K: np.ndarray) -> np.ndarray:
        """``dM/dz_k`` for ``M = A - B K`` with ``K`` held fixed, shape ``(D, n, n)``."""
        left, right = self._sides(K)
        return sum(np.einsum("ab,kbc,cd->kad", left[j], self.dF[j], right[j]) for j in range(len(self.F)))

    def contracted_terms(self, a: np.ndarray, b: np.ndarray, K: np.ndarray):
        """Split ``a^T (dM/dz_k) b`` into the saltation and flow contributions."""
        left, right = self._sides(K)
        xi_term = np.zeros(self.dF.shape[1])
        flow_term = np.zeros(self.dF.shape[1])
        for j, kind in enumerate(self.kinds):
            contrib = np.einsum("b,kbc,c->k", a @ left[j], self.dF[j], right[j] @ b)
            if kind == "event":
                xi_term += contrib
            else:
                flow_term += contrib
        return xi_term, flow_term


def _z_steps(Z: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(Z))


def _step_batch(system, traj: HybridTrajectory, steps: Sequence[int], Z: np.ndarray, mode: str,
                expected):
    n = system.n
    h = traj.h
    t0 = traj.times[np.asarray(steps)]
    fresh = [traj.fresh_start(int(i), system.options.substeps) for i in steps]
    res = advance(system, mode, t0, Z[:, :n], Z[:, n:], h, expected=expected, fresh=fresh)
    kinds, F = _factors_from_result(system, res, Z[:, n:])
    return kinds, F


def linearize(system: HybridSystem, traj: HybridTrajectory) -> list[StepFactors]:
    """Step factors for every knot interval of ``traj`` (open loop)."""
    n = system.n
    Z = np.hstack([traj.states[:-1], traj.inputs])
    out: list[Optional[StepFactors]] = [None] * traj.N
    groups: dict[str, list[int]] = {}
    for i in range(traj.N):
        if traj.event_keys(i):
            kinds, F = _step_batch(system, traj, [i], Z[i:i + 1], traj.modes[i], traj.event_keys(i))
            out[i] = StepFactors(kinds, F[0], n, _event_time_grads(system, traj, i, kinds, F[0]))
        else:
            groups.setdefault(traj.modes[i], []).append(i)
    for mode, steps in groups.items():
        kinds, F = _step_batch(system, traj, steps, Z[steps], mode, ())
        for r, i in enumerate(steps):
            out[i] = StepFactors(kinds, F[r], n)
    return out  # type: ignore[return-value]


def _event_time_grads(system, traj, i, kinds, F):
    u = traj.inputs[i]
    rows = []
    C = np.eye(F.shape[-1])
    evs = iter(traj.step_events(i))
    for kind, Fj in zip(kinds, F):
        if kind == "event":
            ev = next(evs)
            tr = system.transitions[ev.key]
            f_pre = system.modes[tr.source].dynamics(ev.time, ev.x_minus[None], u[None])[0]
            rows.append(event_time_row(tr, f_pre, ev.x_minus, ev.time, u) @ C)
        C = Fj @ C
    return np.array(rows)


def _derivatives_for_steps(system, traj, steps, mode, expected, rel):
    n = system.n
    D = n + system.m
    Z0 = np.hstack([traj.states[:-1], traj.inputs])[steps]  # (S, D)
    S = len(steps)
    dz = _z_steps(Z0, rel)  # (S, D)
    E = np.eye(D)
    Zp = (Z0[:, None, :] + dz[:, :, None] * E[None]).reshape(S * D, D)
    Zm = (Z0[:, None, :] - dz[:, :, None] * E[None]).reshape(S * D, D)
    Zall = np.vstack([Z0, Zp, Zm])
    rows_steps = np.concatenate([steps, np.repeat(steps, D), np.repeat(steps, D)])
    kinds, F = _step_batch(system, traj, rows_steps, Zall, mode, expected)
    F0 = F[:S]
    Fp = F[S:S + S * D].reshape(S, D, *F.shape[1:])
    Fm = F[S + S * D:].reshape(S, D, *F.shape[1:])
    dF = (Fp - Fm) / (2 * dz[:, :, None, None, None])  # (S, D, L, D, D)
    return kinds, F0, dF.transpose(0, 2, 1, 3, 4)


def _rows_to_steps(rows, S, D):
    rows = np.asarray(rows)
    idx = np.where(rows < S, rows, (rows - S) % (S * D) // D)
    return sorted(set(idx.tolist()))


def factor_derivative_tensors(system: HybridSystem, traj: HybridTrajectory, steps=None,
                              rel_step: float = FD_REL_STEP, on_fragile: str = "raise"):
    """Central-difference tensors of every step's factors w.r.t. ``(x_i, u_i)``.

    Steps whose event sequence changes under the perturbation are retried once
    with a ten times smaller step. If they still change, ``on_fragile="raise"``
    raises :class:`FragilityError` naming the step; ``"skip"`` leaves the step
    out and returns ``(tensors, fragile_steps)`` instead of just the tensors.
    """
    n = system.n
    D = n + system.m
    steps = list(range(traj.N)) if steps is None else list(steps)
    out: dict[int, FactorDerivatives] = {}
    groups: dict[tuple, list[int]] = {}
    for i in steps:
        groups.setdefault((traj.modes[i], traj.event_keys(i)), []).append(i)

    pending: list[tuple[tuple, list[int]]] = []
    for (mode, keys), idx in groups.items():
        # event steps are batched one at a time: their rows share a structure
        chunks = [[i] for i in idx] if keys else [idx]
        pending.extend(((mode, keys), c) for c in chunks)

    retry: list[tuple[tuple, int]] = []
    for (mode, keys), chunk in pending:
        try:
            kinds, F0, dF = _derivatives_for_steps(system, traj, np.array(chunk), mode, keys, rel_step)
        except ModeSequenceError as err:
            bad = set(_rows_to_steps(err.rows, len(chunk), D))
            bad_steps = [chunk[b] for b in bad]
            retry.extend(((mode, keys), i) for i in bad_steps)
            good = [i for i in chunk if i not in bad_steps]
            if good:
                pending.append(((mode, keys), good))
            continue
        for r, i in enumerate(chunk):
            out[i] = FactorDerivatives(kinds, F0[r], dF[r], n)

    fragile = []
    for (mode, keys), i in sorted(retry, key=lambda r: r[1]):
        try:
            kinds, F0, dF = _derivatives_for_steps(system, traj, np.array([i]), mode, keys, rel_step / 10)
        except ModeSequenceError as err:
            if on_fragile == "raise":
                raise FragilityError(i) from err
            fragile.append(i)
            continue
        out[i] = FactorDerivatives(kinds, F0[0], dF[0], n)
    if on_fragile == "skip":
        return out, fragile
    return out


@dataclass
class FundamentalSolution:
    """Closed-loop product ``Phi = M_{N-1} ... M_0`` with its top singular triple.

    ``P[i] = M_{N-1} ... M_{i+1}`` and ``O[i] = M_{i-1} ... M_0`` so that
    ``Phi = P[i] @ M[i] @ O[i]`` for every step.
    """

    Phi: np.ndarray
    chi: float
    u: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    M: np.ndarray
    P: np.ndarray
    O: np.ndarray

    @property
    def gap(self) -> float:
        if len(self.sigma) < 2 or self.sigma[0] == 0:
            return np.inf
        return (self.sigma[0] - self.sigma[1]) / self.sigma[0]


def convergence_measure(Phi: np.ndarray) -> float:
    """Largest singular value (induced 2-norm) of ``Phi``."""
    return float(np.linalg.norm(Phi, 2))


def prefix_products(M: np.ndarray) -> np.ndarray:
    N, n, _ = M.shape
    O = np.empty((N, n, n))
    acc = np.eye(n)
    for i in range(N):
        O[i] = acc
        acc = M[i] @ acc
    return O


def suffix_products(M: np.ndarray) -> np.ndarray:
    N, n, _ = M.shape
    P = np.empty((N, n, n))
    acc = np.eye(n)
    for i in range(N - 1, -1, -1):
        P[i] = acc
        acc = acc @ M[i]
    return P


def top_singular(Phi: np.ndarray):
    U, s, Vt = np.linalg.svd(Phi)
    return float(s[0]), U[:, 0], Vt[0], s


def closed_loop_matrices(factors: Sequence[StepFactors], K: np.ndarray) -> np.ndarray:
    if not len(factors):
        return np.zeros((0, 0, 0))
    return np.stack([sf.closed_loop(K[i]) for i, sf in enumerate(factors)])


def fundamental_solution(factors: Sequence[StepFactors], K: np.ndarray, n: Optional[int] = None,
                         P: Optional[np.ndarray] = None) -> FundamentalSolution:
    """Assemble ``Phi`` from step factors under tracking gains ``K`` (``(N, m, n)``).

    A precomputed suffix-product array ``P`` (from the tracking backward pass)
    may be passed to avoid recomputing it.
    """
    if not len(factors):
        n = n if n is not None else 0
        I = np.eye(n)
        s = np.ones(n)
        e = I[:, 0] if n else np.zeros(0)
        return FundamentalSolution(I, 1.0 if n else 0.0, e, e, s, np.zeros((0, n, n)),
                                   np.zeros((0, n, n)), np.zeros((0, n, n)))
    M = closed_loop_matrices(factors, K)
    if P is None:
        P = suffix_products(M)
    O = prefix_products(M)
    Phi = P[0] @ M[0]
    chi, u, v, s = top_singular(Phi)
    return FundamentalSolution(Phi, chi, u, v, s, M, P, O)


def chi_gradients(fs: FundamentalSolution, derivs: dict[int, FactorDerivatives], K: np.ndarray,
                  split: bool = False, N: Optional[int] = None, D: Optional[int] = None):
    """Gradient of ``chi`` w.r.t. each ``(x_i, u_i)``, shape ``(N, n + m)``.

    Steps missing from ``derivs`` get a zero row. With ``split`` the saltation
    and flow contributions are returned separately.
    """
    if fs.gap < EPS_SV:
        warnings.warn(f"top singular value is nearly repeated (gap {fs.gap:.2e}); chi is nonsmooth here",
                      RuntimeWarning, stacklevel=2)
    N = len(fs.M) if N is None else N
    if D is None:
        D = next(iter(derivs.values())).dF.shape[1] if derivs else 0
    xi = np.zeros((N, D))
    fl = np.zeros((N, D))
    for i, fd in derivs.items():
        a = fs.P[i].T @ fs.u
        b = fs.O[i] @ fs.v
        xi[i], fl[i] = fd.contracted_terms(a, b, K[i])
    if split:
        return xi, fl
    return xi + fl


def chi_state_gradient(fs: FundamentalSolution, deriv: FactorDerivatives, K_i: np.ndarray, i: int) -> np.ndarray:
    a = fs.P[i].T @ fs.u
    b = fs.O[i] @ fs.v
    xi, fl = deriv.contracted_terms(a, b, K_i)
    return (xi + fl)[:deriv.n]


def chi_input_gradient(fs: FundamentalSolution, deriv: FactorDerivatives, K_i: np.ndarray, i: int) -> np.ndarray:
    a = fs.P[i].T @ fs.u
    b = fs.O[i] @ fs.v
    xi, fl = deriv.contracted_terms(a, b, K_i)
    return (xi + fl)[deriv.n:]


def bfgs_update(H: np.ndarray, s: np.ndarray, y: np.ndarray, skip_tol: float = 1e-10,
                rescale: bool = False) -> np.ndarray:
    """BFGS update of a Hessian approximation; skipped on insufficient curvature.

    With ``rescale`` the current ``H`` (assumed to be the initial identity) is
    first replaced by ``(y'y / s'y) I`` so its scale matches the observed
    curvature.
    """
    sy = float(s @ y)
    if sy <= skip_tol * np.linalg.norm(s) * np.linalg.norm(y):
        return H
    if rescale:
        H = (float(y @ y) / sy) * np.eye(len(s))
    Hs = H @ s
    return H - np.outer(Hs, Hs) / float(s @ Hs) + np.outer(y, y) / sy
