"""Planar quadruped with massless two-link legs and parallel knee springs.

Positions ``q = (x_B, y_B, theta_B, alpha_f, beta_f, alpha_b, beta_b)`` followed
by their rates; inputs are ``(tau_alpha_f, tau_beta_f, tau_alpha_b, tau_beta_b)``.
Left and right legs of each pair move together, so a front and a back leg
remain.

Angles: the thigh points along ``theta_B - pi/2 + alpha`` (``alpha`` is measured
from the body's downward axis, positive forward) and the shank along
``thigh + beta - pi`` with ``beta`` the interior knee angle (``pi`` is a straight
leg). Hips sit on the body axis at ``+-length/2``.

Flight: the body is ballistic and each joint is driven through a rotor inertia
against the knee spring. Stance: the foot is pinned, the leg is massless, so
joint torques (including the spring) map to a foot force
``lambda = -J_j^{-T} tau`` and reach the body through ``J_b^T``. Joint
accelerations follow from the pinned-foot constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..hybrid import HybridMode, HybridSystem, SimOptions, Transition, identity_reset
from ..ilqr import CostWeights
from .task import TaskSpec

AIR, FRONT, BACK, FULL = "D1", "D2", "D3", "D4"
LEGS = {"front": (3, +1.0), "back": (5, -1.0)}  # joint offset into q, hip side
STANCE_LEGS = {AIR: (), FRONT: ("front",), BACK: ("back",), FULL: ("front", "back")}


class SingularLegError(ArithmeticError):
    """Knee is straight; the leg Jacobian cannot be inverted."""


@dataclass(frozen=True)
class QuadrupedParams:
    mass: float = 7.388
    inertia: float = 0.1285
    length: float = 0.445
    height: float = 0.104
    upper: float = 0.206
    lower: float = 0.206
    knee_spring: float = 75.0
    knee_rest: float = 1.2
    rotor_inertia: float = 1e-3
    gravity: float = 9.81

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"quadruped parameter {k} must be positive, got {v}")


def _e(a):
    return np.cos(a), np.sin(a)


def _ep(a):
    return -np.sin(a), np.cos(a)


def leg_angles(x, leg: str):
    j, _ = LEGS[leg]
    th = x[:, 2]
    psi_t = th - 0.5 * np.pi + x[:, j]
    psi_s = psi_t + x[:, j + 1] - np.pi
    return psi_t, psi_s


def foot_position(p: QuadrupedParams, x, leg: str):
    """Foot coordinates ``(B, 2)``."""
    x = np.atleast_2d(x)
    _, side = LEGS[leg]
    psi_t, psi_s = leg_angles(x, leg)
    cb, sb = _e(x[:, 2])
    ct, st = _e(psi_t)
    cs, ss = _e(psi_s)
    h = side * 0.5 * p.length
    fx = x[:, 0] + h * cb + p.upper * ct + p.lower * cs
    fy = x[:, 1] + h * sb + p.upper * st + p.lower * ss
    return np.stack([fx, fy], axis=1)


class _Leg:
    """Kinematic terms of one leg, as per-row component arrays."""

    __slots__ = ("jax", "jay", "jsx", "jsy", "bx", "by", "i00", "i01", "i10", "i11")

    def __init__(self, p: QuadrupedParams, x, leg: str):
        _, side = LEGS[leg]
        psi_t, psi_s = leg_angles(x, leg)
        h = side * 0.5 * p.length
        st, ct = np.sin(psi_t), np.cos(psi_t)
        ss, cs = np.sin(psi_s), np.cos(psi_s)
        self.jsx, self.jsy = -p.lower * ss, p.lower * cs
        self.jax, self.jay = -p.upper * st + self.jsx, p.upper * ct + self.jsy
        self.bx = -h * np.sin(x[:, 2]) + self.jax
        self.by = h * np.cos(x[:, 2]) + self.jay
        det = self.jax * self.jsy - self.jsx * self.jay
        if np.any(np.abs(det) < 1e-12):
            raise SingularLegError("leg Jacobian is singular (straight knee)")
        self.i00, self.i01 = self.jsy / det, -self.jsx / det
        self.i10, self.i11 = -self.jay / det, self.jax / det

    def force(self, t0, t1):
        """``-J_j^{-T} tau`` for joint torques ``(t0, t1)``."""
        return -(self.i00 * t0 + self.i10 * t1), -(self.i01 * t0 + self.i11 * t1)

    def joint_rates(self, rx, ry):
        """``-J_j^{-1} r`` for a foot-space vector ``r``."""
        return -(self.i00 * rx + self.i01 * ry), -(self.i10 * rx + self.i11 * ry)


def leg_jacobians(p: QuadrupedParams, x, leg: str):
    """Foot Jacobians w.r.t. body coordinates ``(B, 2, 3)`` and joints ``(B, 2, 2)``."""
    L = _Leg(p, x, leg)
    one, zero = np.ones_like(L.bx), np.zeros_like(L.bx)
    Jb = np.stack([np.stack([one, zero, L.bx], axis=1), np.stack([zero, one, L.by], axis=1)], axis=1)
    Jj = np.stack([np.stack([L.jax, L.jsx], axis=1), np.stack([L.jay, L.jsy], axis=1)], axis=1)
    return Jb, Jj


def joint_torques(p: QuadrupedParams, x, u, leg: str):
    """Motor plus knee spring torques on the leg's hip and knee."""
    j, _ = LEGS[leg]
    k = j - 3
    return u[:, k], u[:, k + 1] - p.knee_spring * (x[:, j + 1] - p.knee_rest)


def foot_force(p: QuadrupedParams, x, u, leg: str):
    """Ground reaction on a pinned foot, ``(B, 2)``."""
    x, u = np.atleast_2d(x), np.atleast_2d(u)
    fx, fy = _Leg(p, x, leg).force(*joint_torques(p, x, u, leg))
    return np.stack([fx, fy], axis=1)


def _convective(p: QuadrupedParams, x, leg: str):
    j, side = LEGS[leg]
    psi_t, psi_s = leg_angles(x, leg)
    wb = x[:, 9]
    wt = wb + x[:, 7 + j]
    ws = wt + x[:, 8 + j]
    h = side * 0.5 * p.length
    a, bt, bs = h * wb * wb, p.upper * wt * wt, p.lower * ws * ws
    cx = -a * np.cos(x[:, 2]) - bt * np.cos(psi_t) - bs * np.cos(psi_s)
    cy = -a * np.sin(x[:, 2]) - bt * np.sin(psi_t) - bs * np.sin(psi_s)
    return cx, cy


def make_dynamics(p: QuadrupedParams, stance: tuple[str, ...]):
    def f(t, x, u):
        fx = 0.0 * x[:, 0]
        fy = fx - p.mass * p.gravity
        mt = fx
        legs = {}
        for leg in stance:
            L = _Leg(p, x, leg)
            lx, ly = L.force(*joint_torques(p, x, u, leg))
            fx, fy, mt = fx + lx, fy + ly, mt + L.bx * lx + L.by * ly
            legs[leg] = L
        ax, ay, at = fx / p.mass, fy / p.mass, mt / p.inertia
        cols = [x[:, 7:], ax[:, None], ay[:, None], at[:, None]]
        for leg in ("front", "back"):
            if leg in legs:
                L = legs[leg]
                cx, cy = _convective(p, x, leg)
                qa, qb = L.joint_rates(ax + L.bx * at + cx, ay + L.by * at + cy)
            else:
                ta, tb = joint_torques(p, x, u, leg)
                qa, qb = ta / p.rotor_inertia, tb / p.rotor_inertia
            cols += [qa[:, None], qb[:, None]]
        return np.concatenate(cols, axis=1)

    return f


def foot_height(p: QuadrupedParams, leg: str):
    def g(t, x, u):
        return foot_position(p, x, leg)[:, 1]
    return g


def normal_force(p: QuadrupedParams, leg: str):
    def g(t, x, u):
        return foot_force(p, x, u, leg)[:, 1]
    return g


def impact_reset(p: QuadrupedParams, leg: str):
    """Replace the landing leg's joint rates so its foot velocity is zero."""
    j, _ = LEGS[leg]

    def r(t, x):
        L = _Leg(p, x, leg)
        qa, qb = L.joint_rates(x[:, 7] + L.bx * x[:, 9], x[:, 8] + L.by * x[:, 9])
        out = x.copy()
        out[:, 7 + j] = qa
        out[:, 8 + j] = qb
        return out
    return r


def quadruped_system(params: QuadrupedParams = QuadrupedParams(),
                     options: SimOptions = SimOptions(substeps=10)) -> HybridSystem:
    p = params
    modes = {
        AIR: HybridMode(AIR, 14, 4, make_dynamics(p, ())),
        FRONT: HybridMode(FRONT, 14, 4, make_dynamics(p, ("front",))),
        BACK: HybridMode(BACK, 14, 4, make_dynamics(p, ("back",))),
        FULL: HybridMode(FULL, 14, 4, make_dynamics(p, ("front", "back"))),
    }
    spec = [
        (AIR, FRONT, foot_height(p, "front"), impact_reset(p, "front")),
        (AIR, BACK, foot_height(p, "back"), impact_reset(p, "back")),
        (FRONT, FULL, foot_height(p, "back"), impact_reset(p, "back")),
        (BACK, FULL, foot_height(p, "front"), impact_reset(p, "front")),
        (FULL, FRONT, normal_force(p, "back"), identity_reset),
        (FULL, BACK, normal_force(p, "front"), identity_reset),
        (FRONT, AIR, normal_force(p, "front"), identity_reset),
        (BACK, AIR, normal_force(p, "back"), identity_reset),
    ]
    trans = {(a, b): Transition(a, b, g, r) for a, b, g, r in spec}
    return HybridSystem(modes, trans, options)


def mechanical_energy(p: QuadrupedParams, x, mode: str) -> np.ndarray:
    """Body energy plus knee springs, plus rotor energy of legs in flight."""
    x = np.atleast_2d(x)
    e = 0.5 * p.mass * (x[:, 7] ** 2 + x[:, 8] ** 2) + 0.5 * p.inertia * x[:, 9] ** 2
    e = e + p.mass * p.gravity * x[:, 1]
    stance = STANCE_LEGS[mode]
    for leg, (j, _) in LEGS.items():
        e = e + 0.5 * p.knee_spring * (x[:, j + 1] - p.knee_rest) ** 2
        if leg not in stance:
            e = e + 0.5 * p.rotor_inertia * (x[:, 7 + j] ** 2 + x[:, 8 + j] ** 2)
    return e


def mirror(p: QuadrupedParams, x=None, u=None):
    """Swap front and back legs and reverse the x direction.

    Reflection sends a knee angle ``beta`` to ``2 pi - beta``, so the spring
    rest angle is not preserved; the knee inputs pick up the constant
    ``k (2 pi - 2 beta_rest)`` that keeps the total knee torque mirrored.
    """
    out = []
    if x is not None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.empty_like(x)
        for off, shift in ((0, 2 * np.pi), (7, 0.0)):
            y[:, off] = -x[:, off]
            y[:, off + 1] = x[:, off + 1]
            y[:, off + 2] = -x[:, off + 2]
            y[:, off + 3] = -x[:, off + 5]
            y[:, off + 4] = shift - x[:, off + 6]
            y[:, off + 5] = -x[:, off + 3]
            y[:, off + 6] = shift - x[:, off + 4]
        out.append(y)
    if u is not None:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        v = -u[:, [2, 3, 0, 1]]
        v[:, [1, 3]] += p.knee_spring * (2 * np.pi - 2 * p.knee_rest)
        out.append(v)
    return out[0] if len(out) == 1 else tuple(out)


MIRROR_MODE = {AIR: AIR, FRONT: BACK, BACK: FRONT, FULL: FULL}


def quadruped_task(speed: float = 0.25, height: float = 0.3, hip: float = 0.6, knee: float = 1.2,
                   duration: float = 0.35, N: int = 70) -> TaskSpec:
    x0 = np.zeros(14)
    x0[1] = height
    x0[3:7] = (hip, knee, hip, knee)
    x0[7] = speed
    xg = x0.copy()
    xg[0] += speed * duration
    w = CostWeights(Q_N=500 * np.eye(14), R=5e-4 * np.eye(4), x_goal=xg, Q_chi=1.0)
    return TaskSpec(x0, AIR, xg, duration, N, w)


def quadruped_initial_guess(task: TaskSpec, params: QuadrupedParams = QuadrupedParams(),
                            system: HybridSystem | None = None, gains=(4.0, 0.1, 20.0, 3.0, 0.0, 1.0),
                            offsets=(0.05, -0.05)) -> np.ndarray:
    """Joint PD toward the initial joint configuration, recorded as torques.

    ``gains`` are ``(kp, kd)`` for all joints of a leg in flight, then hip
    ``(kp, kd)`` and knee ``(kp, kd)`` for a leg in stance. Hip targets are
    offset per leg (front, back) so the feet do not land at the same instant.
    """
    from ..hybrid import simulate

    system = system or quadruped_system(params)
    kp, kd, kph, kdh, kpk, kdk = gains
    target = np.array(task.x0[3:7], dtype=float)
    target[0] += offsets[0]
    target[2] += offsets[1]

    def ctrl(i, x, mode):
        e, qd = x[3:7] - target, x[10:14]
        u = -kp * e - kd * qd
        for k, leg in enumerate(("front", "back")):
            if leg in STANCE_LEGS[mode]:
                u[2 * k] = -kph * e[2 * k] - kdh * qd[2 * k]
                u[2 * k + 1] = -kpk * e[2 * k + 1] - kdk * qd[2 * k + 1]
        return u

    ctrl.uses_mode = True
    traj = simulate(system, task.x0, task.mode0, ctrl, 0.0, task.duration, task.N)
    return traj.inputs.copy()
