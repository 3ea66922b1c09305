"""Hybrid systems: modes, guarded transitions, and event-aware simulation.

Every state-valued function in this module works on batches. A vector field
takes ``t`` with shape ``(B,)``, ``x`` with shape ``(B, n)`` and ``u`` with shape
``(B, m)`` and returns ``(B, n)``. Guards return ``(B,)`` and resets ``(B, n)``.
Model code must stay complex-safe (no ``abs``, comparisons or ``maximum`` on
state-dependent quantities) because the variational module differentiates it
with complex steps.

Integration uses fixed-size Dormand-Prince (order 5) substeps. A knot interval
is split into ``substeps`` equal pieces, so the discrete step map is a smooth
function of the initial state and the input, which keeps nested finite
differences of the step map meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

VectorField = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
GuardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
ResetFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
Controller = Callable[[int, np.ndarray], np.ndarray]


class HybridError(RuntimeError):
    """Base class for simulation failures."""


class IntegrationDiverged(HybridError):
    pass


class DivergenceError(HybridError):
    """The state left the configured bounding box."""


class ZenoError(HybridError):
    pass


class BracketError(HybridError):
    pass


class EventToleranceError(HybridError):
    pass


class DomainError(HybridError):
    """Initial state is not inside the domain of its mode."""


class ModeSequenceError(HybridError):
    """Rows of a batched step did not share one event sequence.

    ``rows`` holds the indices of the rows that disagree with the expected
    sequence (or with row 0 when nothing was expected).
    """

    def __init__(self, msg: str, rows: Sequence[int] = ()):
        super().__init__(msg)
        self.rows = np.asarray(rows, dtype=int)


def identity_reset(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x


@dataclass(frozen=True)
class HybridMode:
    id: str
    n: int
    m: int
    dynamics: VectorField


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    guard: GuardFn
    reset: ResetFn = identity_reset

    @property
    def key(self) -> tuple[str, str]:
        return (self.source, self.target)


@dataclass(frozen=True)
class SimOptions:
    """Numerical settings shared by simulation and linearization.

    ``substeps`` equal Dormand-Prince substeps per knot interval (and per
    partial interval after an event). ``bounds`` is an optional ``(lo, hi)``
    box; leaving it raises :class:`DivergenceError`.
    """

    substeps: int = 10
    eps_guard: float = 1e-10
    max_events_per_step: int = 4
    max_bisection: int = 100
    bounds: Optional[tuple[np.ndarray, np.ndarray]] = None


@dataclass(frozen=True)
class HybridSystem:
    modes: Mapping[str, HybridMode]
    transitions: Mapping[tuple[str, str], Transition]
    options: SimOptions = field(default_factory=SimOptions)

    def __post_init__(self):
        dims = {(md.n, md.m) for md in self.modes.values()}
        if len(dims) != 1:
            raise ValueError(f"modes must share state/input dimensions, got {dims}")
        for key, tr in self.transitions.items():
            if key != tr.key:
                raise ValueError(f"transition stored under {key} but declares {tr.key}")
            if tr.source not in self.modes or tr.target not in self.modes:
                raise ValueError(f"transition {key} references an unknown mode")

    @property
    def n(self) -> int:
        return next(iter(self.modes.values())).n

    @property
    def m(self) -> int:
        return next(iter(self.modes.values())).m

    def outgoing(self, mode: str) -> list[Transition]:
        return [tr for tr in self.transitions.values() if tr.source == mode]

    def with_options(self, **kw) -> "HybridSystem":
        opts = SimOptions(**{**self.options.__dict__, **kw})
        return HybridSystem(self.modes, self.transitions, opts)


@dataclass(frozen=True)
class EventRecord:
    step: int
    key: tuple[str, str]
    time: float
    x_minus: np.ndarray
    x_plus: np.ndarray


@dataclass(frozen=True)
class HybridTrajectory:
    """Knots ``t_0..t_N`` on a uniform grid, with mid-step hybrid events."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    modes: tuple[str, ...]
    events: tuple[EventRecord, ...] = ()

    @property
    def N(self) -> int:
        return len(self.inputs)

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0]) if self.N else 0.0

    def step_events(self, i: int) -> list[EventRecord]:
        return [ev for ev in self.events if ev.step == i]

    def event_keys(self, i: int) -> tuple[tuple[str, str], ...]:
        return tuple(ev.key for ev in self.events if ev.step == i)

    def fresh_start(self, i: int, substeps: int) -> bool:
        """Whether knot ``i`` follows a reset that happened within the last substep."""
        if i == 0:
            return False
        evs = self.step_events(i - 1)
        return bool(evs) and self.times[i] - evs[-1].time <= self.h / substeps

    def signature(self) -> tuple:
        """Hashable summary of the discrete execution (knot modes and events)."""
        return (self.modes, tuple((ev.step, ev.key) for ev in self.events))


# Dormand-Prince 5(4) tableau; only the fifth-order weights are used.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)


def rk_step(f: VectorField, t, x, u, h):
    """One Dormand-Prince step of size ``h`` (per-row array) with held input."""
    hh = h[:, None]
    ks = []
    for c, row in zip(_DP_C, _DP_A):
        xi = x
        for a, kj in zip(row, ks):
            xi = xi + (hh * a) * kj
        ks.append(f(t + c * h, xi, u))
    incr = sum(b * kj for b, kj in zip(_DP_B, ks) if b)
    return x + hh * incr


def segment_flow(f: VectorField, t0, x0, u, hs, n_full, partial):
    """Integrate ``n_full`` substeps of size ``hs`` and a final ``partial`` step.

    All arguments are per-row arrays; rows may use different substep counts.
    """
    x = x0
    t = t0
    n_full = np.asarray(n_full)
    nmax = int(n_full.max()) if n_full.size else 0
    uniform = bool(np.all(n_full == nmax))
    for j in range(nmax):
        xn = rk_step(f, t, x, u, hs)
        if uniform:
            x, t = xn, t + hs
        else:
            live = j < n_full
            x = np.where(live[:, None], xn, x)
            t = t + np.where(live, hs, 0.0)
    if np.any(partial != 0):
        x = rk_step(f, t, x, u, partial)
    return x


def _as_rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


def integrate_smooth(mode: HybridMode, t: float, x, u, h: float, substeps: int = 10) -> np.ndarray:
    """Advance one mode by ``h`` with a zero-order-hold input, ignoring guards."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged(f"non-finite initial state in mode {mode.id} at t={t}")
    X = _as_rows(x)
    U = _as_rows(u)
    B = len(X)
    hs = np.full(B, h / substeps)
    out = segment_flow(mode.dynamics, np.full(B, float(t)), X, U, hs, np.full(B, substeps), np.zeros(B))
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(f"integration diverged in mode {mode.id} near t={t}")
    return out.reshape(x.shape)


def apply_reset(transition: Transition, t_e: float, x_minus) -> np.ndarray:
    x = np.asarray(x_minus, dtype=float)
    out = np.asarray(transition.reset(np.atleast_1d(float(t_e)), _as_rows(x)), dtype=float)
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(f"reset {transition.key} produced a non-finite state")
    return out.reshape(x.shape)


def _guards(transitions: Sequence[Transition], t, x, u) -> np.ndarray:
    if not transitions:
        return np.zeros((len(x), 0))
    return np.stack([np.real(tr.guard(t, x, u)) for tr in transitions], axis=1)


def _bisect_event(f, guard, t_sub, x_sub, u, width, g_lo, eps, maxiter, lo=None):
    """Locate guard zeros inside one substep per row.

    ``x_sub`` is the state at the start ``t_sub`` of the bracketing substep and
    ``width`` its length; ``lo`` optionally moves the lower end of the bracket
    into the substep, and ``g_lo`` is the guard there. Returns the offset
    ``tau`` into the substep and the state there. Rows whose guard already
    sits within ``eps`` of zero (or below it) return ``tau = lo``.
    """
    lo = np.zeros_like(width) if lo is None else np.asarray(lo, dtype=float).copy()
    hi = np.asarray(width, dtype=float).copy()
    at_start = g_lo <= eps
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        open_ = (~at_start) & (mid > lo) & (mid < hi)
        if not np.any(open_):
            break
        gm = np.real(guard(t_sub + mid, rk_step(f, t_sub, x_sub, u, mid), u))
        inside = gm >= 0
        lo = np.where(open_ & inside, mid, lo)
        hi = np.where(open_ & ~inside, mid, hi)
    else:
        raise EventToleranceError("event bisection did not converge")
    x_e = rk_step(f, t_sub, x_sub, u, lo)
    g_e = np.real(guard(t_sub + lo, x_e, u))
    bad = (~at_start) & (np.abs(g_e) > eps)
    if np.any(bad):
        raise EventToleranceError(f"guard residual {np.max(np.abs(g_e[bad])):.3e} exceeds {eps:.1e}")
    return lo, x_e


@dataclass
class Segment:
    """Smooth piece of a knot interval, batched over rows."""

    mode: str
    t0: np.ndarray
    x0: np.ndarray
    hs: np.ndarray
    n_full: np.ndarray
    partial: np.ndarray


@dataclass
class BatchEvent:
    key: tuple[str, str]
    time: np.ndarray
    x_minus: np.ndarray
    x_plus: np.ndarray


@dataclass
class StepResult:
    x_end: np.ndarray
    mode: str
    segments: list[Segment]
    events: list[BatchEvent]


def _state_ok(system: HybridSystem, x: np.ndarray) -> np.ndarray:
    ok = np.all(np.isfinite(x), axis=-1)
    bounds = system.options.bounds
    if bounds is not None:
        lo, hi = bounds
        ok &= np.all((x >= lo) & (x <= hi), axis=-1)
    return ok


def _check_state(system: HybridSystem, x: np.ndarray, mode: str, t) -> None:
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged(f"non-finite state in mode {mode} near t={float(np.min(t)):.6g}")
    bounds = system.options.bounds
    if bounds is not None:
        lo, hi = bounds
        if np.any(x < lo) or np.any(x > hi):
            raise DivergenceError(f"state left the bounding box in mode {mode} near t={float(np.min(t)):.6g}")


_PROBES = 8


def _probe_first_substep(f, trans, t, X, U, hs, G, crossing, settled, eps):
    """Re-admit first-substep crossings suppressed after a reset when the guard rises above eps inside.

    Returns per ``(row, transition)`` the probe offset where the guard was
    last seen above eps before dropping below zero (0 where unused) and the
    guard value there. ``crossing`` is updated in place.
    """
    B, T = G.shape[1:]
    lo = np.zeros((B, T))
    g_at = np.zeros((B, T))
    sup = (G[0] <= eps) & (G[1] < 0) & ~settled
    if not np.any(sup):
        return lo, g_at
    rows = np.nonzero(sup.any(axis=1))[0]
    probes = []
    for k in range(1, _PROBES):
        tau = hs[rows] * k / _PROBES
        xk = rk_step(f, t[rows], X[rows], U[rows], tau)
        probes.append((tau, _guards(trans, t[rows] + tau, xk, U[rows])))
    for r_i, r in enumerate(rows):
        for ti in np.nonzero(sup[r])[0]:
            above = [k for k, (_, g) in enumerate(probes) if g[r_i, ti] > eps]
            if not above:
                continue
            k0 = above[0]
            # last probe above eps before the first probe below zero
            k1 = k0
            for k in range(k0, len(probes)):
                if probes[k][1][r_i, ti] < 0:
                    break
                if probes[k][1][r_i, ti] > eps:
                    k1 = k
            lo[r, ti] = probes[k1][0][r_i]
            g_at[r, ti] = probes[k1][1][r_i, ti]
            crossing[0, r, ti] = True
    return lo, g_at


def advance(system: HybridSystem, mode: str, t0, x0, u, h, expected=None, fresh=False) -> StepResult:
    """Advance a batch of rows over one knot interval of length ``h``.

    All rows start in ``mode`` and must undergo the same sequence of
    transitions; ``expected`` (a sequence of transition keys) pins that
    sequence. Disagreement raises :class:`ModeSequenceError`. ``fresh`` (per
    row) marks rows whose knot state comes straight out of a reset.

    Arithmetic failures inside model code (overflow, singular kinematics)
    surface as :class:`IntegrationDiverged`.
    """
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _advance(system, mode, t0, x0, u, h, expected, fresh)
    except ArithmeticError as err:
        raise IntegrationDiverged(f"model evaluation failed in mode {mode}: {err}") from err


def _advance(system, mode, t0, x0, u, h, expected, fresh) -> StepResult:
    opts = system.options
    X = _as_rows(x0)
    B = len(X)
    U = np.broadcast_to(_as_rows(u), (B, system.m))
    t = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
    t_end = t + h
    cur = mode
    segments: list[Segment] = []
    events: list[BatchEvent] = []
    n = opts.substeps
    fresh = np.broadcast_to(np.asarray(fresh, dtype=bool), (B,))

    for count in range(opts.max_events_per_step + 1):
        f = system.modes[cur].dynamics
        trans = system.outgoing(cur)
        remaining = t_end - t
        hs = remaining / n
        xs = [X]
        gs = [_guards(trans, t, X, U)]
        xk, tk = X, t
        # the box is checked only up to each row's first crossing: past an
        # event the pre-event dynamics may legitimately run away
        valid = np.ones((n + 1, B), dtype=bool)
        for k in range(n):
            xk = rk_step(f, tk, xk, U, hs)
            tk = tk + hs
            valid[k + 1] = valid[k] & _state_ok(system, xk)
            xs.append(xk)
            gs.append(_guards(trans, tk, xk, U))
        G = np.stack(gs)  # (n+1, B, T)
        crossing = (G[:-1] >= 0) & (G[1:] < 0)
        # right after a reset a guard sitting on or below zero (typically the
        # surface just left) is not an event; it must first rise above eps and
        # come back down
        settled = ~fresh[:, None] if count == 0 else np.zeros((B, 1), dtype=bool)
        crossing[0] &= (G[0] > opts.eps_guard) | settled
        # a genuine departure that returns within the first substep (a quick
        # bounce) is found by probing inside it
        lo_first, g_first = _probe_first_substep(f, trans, t, X, U, hs, G, crossing, settled, opts.eps_guard)
        hit = crossing.any(axis=2)  # (n, B)
        any_hit = hit.any(axis=0)
        last = np.where(any_hit, np.argmax(hit, axis=0) + 1, n)
        bad_rows = ~valid[last, np.arange(B)]
        if np.any(bad_rows):
            xb = np.stack(xs)[:, bad_rows]
            if not np.all(np.isfinite(xb[: int(last[bad_rows].max()) + 1])):
                raise IntegrationDiverged(f"non-finite state in mode {cur} near t={float(np.min(t)):.6g}")
            raise DivergenceError(f"state left the bounding box in mode {cur} near t={float(np.min(t)):.6g}")

        exp_key = None
        if expected is not None:
            exp_key = expected[len(events)] if len(events) < len(expected) else None
            want = exp_key is not None
            bad = np.nonzero(any_hit != want)[0]
            if len(bad):
                raise ModeSequenceError(f"rows {bad.tolist()} deviate from the expected event sequence", bad)
        elif B > 1 and not (np.all(any_hit) or not np.any(any_hit)):
            bad = np.nonzero(any_hit != any_hit[0])[0]
            raise ModeSequenceError("rows disagree on whether an event occurs", bad)

        if not np.any(any_hit):
            segments.append(Segment(cur, t, X, hs, np.full(B, n), np.zeros(B)))
            return StepResult(xs[-1], cur, segments, events)

        if count == opts.max_events_per_step:
            raise ZenoError(f"more than {opts.max_events_per_step} events in one step near t={float(t[0]):.6g}")

        j = np.argmax(hit, axis=0)  # first substep with a crossing, per row
        rows = np.arange(B)
        x_sub = np.stack(xs)[j, rows]
        t_sub = t + j * hs
        cand = crossing[j, rows]  # (B, T)
        best_tau = np.full(B, np.inf)
        best_tr = np.full(B, -1)
        best_x = np.empty_like(x_sub)
        for ti, tr in enumerate(trans):
            sel = cand[:, ti]
            if not np.any(sel):
                continue
            idx = np.nonzero(sel)[0]
            g_lo = np.real(tr.guard(t_sub[idx], x_sub[idx], U[idx]))
            lo = np.where(j[idx] == 0, lo_first[idx, ti], 0.0)
            g_lo = np.where(lo > 0, g_first[idx, ti], g_lo)
            tau, x_e = _bisect_event(f, tr.guard, t_sub[idx], x_sub[idx], U[idx], hs[idx], g_lo,
                                     opts.eps_guard, opts.max_bisection, lo)
            better = tau < best_tau[idx]
            upd = idx[better]
            best_tau[upd] = tau[better]
            best_tr[upd] = ti
            best_x[upd] = x_e[better]
        keys = [trans[k].key for k in best_tr]
        target_key = exp_key if exp_key is not None else keys[0]
        bad = [r for r, k in enumerate(keys) if k != target_key]
        if bad:
            raise ModeSequenceError(f"rows {bad} take a different transition than {target_key}", bad)
        tr = system.transitions[target_key]
        t_e = t_sub + best_tau
        segments.append(Segment(cur, t, X, hs, j, best_tau))
        x_plus = np.asarray(tr.reset(t_e, best_x), dtype=float)
        _check_state(system, x_plus, tr.target, t_e)
        events.append(BatchEvent(target_key, t_e, best_x, x_plus))
        cur, X, t = tr.target, x_plus, t_e
    raise ZenoError("event loop exhausted")  # pragma: no cover


def locate_event(mode: HybridMode, transition: Transition, t_lo: float, x_lo, u, t_hi: float,
                 substeps: int = 10, eps_guard: float = 1e-10, max_iter: int = 100):
    """Find the first downward zero of ``transition.guard`` on ``[t_lo, t_hi]``.

    The segment is integrated with ``substeps`` equal substeps and the crossing
    is refined by bisection inside the bracketing substep.
    """
    x_lo = np.asarray(x_lo, dtype=float)
    X = _as_rows(x_lo)
    U = _as_rows(u)
    t = np.array([float(t_lo)])
    g0 = float(np.real(transition.guard(t, X, U))[0])
    if abs(g0) <= eps_guard:
        return float(t_lo), x_lo.copy()
    if g0 < 0:
        raise BracketError(f"guard is already negative ({g0:.3e}) at t_lo")
    hs = np.array([(t_hi - t_lo) / substeps])
    xk, tk = X, t
    for _ in range(substeps):
        xn = rk_step(mode.dynamics, tk, xk, U, hs)
        if float(np.real(transition.guard(tk + hs, xn, U))[0]) < 0:
            g_lo = np.real(transition.guard(tk, xk, U))
            tau, x_e = _bisect_event(mode.dynamics, transition.guard, tk, xk, U, hs, g_lo, eps_guard, max_iter)
            return float(tk[0] + tau[0]), x_e[0]
        xk, tk = xn, tk + hs
    raise BracketError(f"no sign change of guard {transition.key} on [{t_lo}, {t_hi}]")


def simulate(system: HybridSystem, x0, mode0: str, controller: Controller, t0: float, tf: float,
             N: int) -> HybridTrajectory:
    """Execute the hybrid system under a knot-indexed feedback policy.

    The input ``controller(i, x_i)`` is held over ``[t_i, t_{i+1}]``, including
    across any events inside the interval. A controller with a true
    ``uses_mode`` attribute is called as ``controller(i, x_i, mode_i)``.
    """
    with_mode = bool(getattr(controller, "uses_mode", False))
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.n,):
        raise ValueError(f"x0 must have shape ({system.n},), got {x.shape}")
    eps = system.options.eps_guard
    for tr in system.outgoing(mode0):
        g = float(np.real(tr.guard(np.array([t0]), x[None], np.zeros((1, system.m))))[0])
        if g < -eps:
            raise DomainError(f"x0 violates guard {tr.key} of mode {mode0} (g={g:.3e})")
    times = t0 + (tf - t0) * np.arange(N + 1) / N if N else np.array([float(t0)])
    h = (tf - t0) / N if N else 0.0
    states = np.empty((N + 1, system.n))
    inputs = np.empty((N, system.m))
    modes = [mode0]
    events: list[EventRecord] = []
    states[0] = x
    mode = mode0
    for i in range(N):
        u = controller(i, x, mode) if with_mode else controller(i, x)
        u = np.asarray(u, dtype=float).reshape(system.m)
        if not np.all(np.isfinite(u)):
            raise IntegrationDiverged(f"controller returned a non-finite input at step {i}")
        inputs[i] = u
        fresh = bool(events) and events[-1].step == i - 1 and times[i] - events[-1].time <= h / system.options.substeps
        res = advance(system, mode, times[i], x[None], u[None], h, fresh=fresh)
        for ev in res.events:
            events.append(EventRecord(i, ev.key, float(ev.time[0]), ev.x_minus[0].copy(), ev.x_plus[0].copy()))
        x = res.x_end[0].copy()
        mode = res.mode
        states[i + 1] = x
        modes.append(mode)
    return HybridTrajectory(times, states, inputs, tuple(modes), tuple(events))


def open_loop(U) -> Controller:
    U = np.asarray(U, dtype=float)
    return lambda i, x: U[i]
