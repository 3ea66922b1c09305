"""Small systems with closed-form answers, used by the self test and the test suite."""

from __future__ import annotations

import numpy as np

from .hybrid import HybridMode, HybridSystem, SimOptions, Transition


def double_integrator(options: SimOptions = SimOptions()) -> HybridSystem:
    """``ydd = u``; one mode, no transitions."""

    def f(t, x, u):
        return np.stack([x[:, 1], u[:, 0]], axis=1)

    return HybridSystem({"free": HybridMode("free", 2, 1, f)}, {}, options)


def double_integrator_discrete(h: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold step matrices of :func:`double_integrator`."""
    return np.array([[1.0, h], [0.0, 1.0]]), np.array([[h * h / 2], [h]])


def bouncing_ball(gravity: float = 9.81, restitution: float = 1.0,
                  options: SimOptions = SimOptions()) -> HybridSystem:
    """Ball at height ``y`` with velocity ``v``; the input is an extra vertical acceleration.

    Impact at ``y = 0`` maps ``v -> -restitution * v``.
    """

    def f(t, x, u):
        return np.stack([x[:, 1], -gravity + u[:, 0]], axis=1)

    def guard(t, x, u):
        return x[:, 0]

    def reset(t, x):
        return np.stack([x[:, 0], -restitution * x[:, 1]], axis=1)

    mode = HybridMode("ball", 2, 1, f)
    return HybridSystem({"ball": mode}, {("ball", "ball"): Transition("ball", "ball", guard, reset)}, options)


def bouncing_ball_saltation(v_minus: float, gravity: float = 9.81, restitution: float = 1.0) -> np.ndarray:
    """Closed-form saltation matrix of the bounce with pre-impact velocity ``v_minus < 0``."""
    e = restitution
    return np.array([[-e, 0.0], [-(1 + e) * gravity / v_minus, -e]])


def piecewise_linear(A1, A2, B, reset, normal, offset: float = 0.0,
                     options: SimOptions = SimOptions()) -> HybridSystem:
    """Two linear modes ``xd = A_j x + B u`` switched when ``normal . x`` falls below ``offset``.

    The reset is the linear map ``reset``; there is no way back to the first mode.
    """
    A1, A2, B, Rm, nv = (np.asarray(M, dtype=float) for M in (A1, A2, B, reset, normal))
    n, m = B.shape

    def flow(A):
        return lambda t, x, u: x @ A.T + u @ B.T

    def guard(t, x, u):
        return x @ nv - offset

    def rmap(t, x):
        return x @ Rm.T

    modes = {"m1": HybridMode("m1", n, m, flow(A1)), "m2": HybridMode("m2", n, m, flow(A2))}
    return HybridSystem(modes, {("m1", "m2"): Transition("m1", "m2", guard, rmap)}, options)
