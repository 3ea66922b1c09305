"""Planar rocket hopper: point-mass body on a massless spring leg.

State ``(x_B, y_B, theta, xdot_B, ydot_B, thetadot)`` with ``theta`` the leg
angle from vertical; input ``(tau, f)`` is hip torque and leg-axis thrust.

In flight the leg is swung by the hip through a small rotor inertia and the
thrust pushes the body along the leg. In stance the foot is pinned where it
landed and the leg length and angle are functions of the body position
relative to it, ``l = y_B / cos(theta)``. The stance angle derivative uses the
kinematic angular rate, so the foot stays pinned exactly and both resets are
identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..hybrid import HybridMode, HybridSystem, SimOptions, Transition
from ..ilqr import CostWeights
from .task import TaskSpec

AIR, STANCE = "air", "stance"


@dataclass(frozen=True)
class HopperParams:
    mass: float = 1.0
    spring: float = 250.0
    rest_length: float = 0.75
    rotor_inertia: float = 1e-3
    gravity: float = 9.81

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"hopper parameter {k} must be positive, got {v}")


def _unit(theta):
    """Foot-to-body direction and its angular derivative."""
    s, c = np.sin(theta), np.cos(theta)
    return (-s, c), (-c, -s)


def flight_dynamics(p: HopperParams):
    def f(t, x, u):
        th = x[:, 2]
        (erx, ery), _ = _unit(th)
        thrust = u[:, 1] / p.mass
        return np.stack([
            x[:, 3], x[:, 4], x[:, 5],
            thrust * erx,
            thrust * ery - p.gravity,
            u[:, 0] / p.rotor_inertia,
        ], axis=1)
    return f


def leg_length(x):
    return x[:, 1] / np.cos(x[:, 2])


def stance_rate(x):
    """Angular rate of the pinned leg implied by the body velocity."""
    c, s = np.cos(x[:, 2]), np.sin(x[:, 2])
    return -c * (x[:, 3] * c + x[:, 4] * s) / x[:, 1]


def stance_dynamics(p: HopperParams):
    def f(t, x, u):
        th = x[:, 2]
        (erx, ery), (etx, ety) = _unit(th)
        l = leg_length(x)
        axial = (p.spring * (p.rest_length - l) + u[:, 1]) / p.mass
        tang = u[:, 0] / (l * p.mass)
        ax = axial * erx + tang * etx
        ay = axial * ery + tang * ety - p.gravity
        w = stance_rate(x)
        ldot = x[:, 3] * erx + x[:, 4] * ery
        wdot = (ax * etx + ay * ety - 2.0 * ldot * w) / l
        return np.stack([x[:, 3], x[:, 4], w, ax, ay, wdot], axis=1)
    return f


def foot_height(p: HopperParams):
    def g(t, x, u):
        return x[:, 1] - p.rest_length * np.cos(x[:, 2])
    return g


def spring_force(p: HopperParams):
    def g(t, x, u):
        return p.spring * (p.rest_length - leg_length(x))
    return g


def hopper_system(params: HopperParams = HopperParams(), options: SimOptions = SimOptions()) -> HybridSystem:
    modes = {
        AIR: HybridMode(AIR, 6, 2, flight_dynamics(params)),
        STANCE: HybridMode(STANCE, 6, 2, stance_dynamics(params)),
    }
    trans = {
        (AIR, STANCE): Transition(AIR, STANCE, foot_height(params)),
        (STANCE, AIR): Transition(STANCE, AIR, spring_force(params)),
    }
    return HybridSystem(modes, trans, options)


def mechanical_energy(p: HopperParams, x, mode: str) -> np.ndarray:
    """Body kinetic plus gravitational energy, plus spring energy in stance."""
    x = np.atleast_2d(x)
    e = 0.5 * p.mass * (x[:, 3] ** 2 + x[:, 4] ** 2) + p.mass * p.gravity * x[:, 1]
    if mode == STANCE:
        e = e + 0.5 * p.spring * (p.rest_length - leg_length(x)) ** 2
    else:
        e = e + 0.5 * p.rotor_inertia * x[:, 5] ** 2
    return e


# (Q_chi, Q_N scale, R_air scale, R_stance scale)
HOPPER_TRIALS = (
    (50.0, 500.0, 0.01, 0.1),
    (50.0, 800.0, 0.005, 0.01),
    (50.0, 250.0, 0.02, 0.05),
    (75.0, 500.0, 0.01, 0.01),
)


def hopper_weights(q_chi: float, q_n: float, r_air: float, r_stance: float,
                   x_goal=None) -> CostWeights:
    if x_goal is None:
        x_goal = hopper_task().x_goal
    return CostWeights(
        Q_N=q_n * np.eye(6),
        R={AIR: r_air * np.eye(2), STANCE: r_stance * np.eye(2)},
        x_goal=np.asarray(x_goal, dtype=float),
        Q_chi=float(q_chi),
    )


def hopper_task(theta0: float = 0.0, N: int = 100, duration: float = 1.5) -> TaskSpec:
    x0 = np.array([0.0, 2.0, theta0, 0.0, 0.0, 0.0])
    xg = np.array([0.2, 2.0, theta0, 0.0, 0.0, 0.0])
    w = CostWeights(Q_N=500 * np.eye(6), R={AIR: 0.01 * np.eye(2), STANCE: 0.1 * np.eye(2)},
                    x_goal=xg, Q_chi=50.0)
    return TaskSpec(x0, AIR, xg, duration, N, w)


def hopper_initial_guess(task: TaskSpec, params: HopperParams = HopperParams(),
                         stance_window=(0.50, 0.72)) -> np.ndarray:
    """Zero hip torque; half-weight thrust through the expected stance window."""
    t = task.duration * np.arange(task.N) / task.N
    U = np.zeros((task.N, 2))
    on = (t >= stance_window[0]) & (t < stance_window[1])
    U[on, 1] = 0.5 * params.mass * params.gravity
    return U
