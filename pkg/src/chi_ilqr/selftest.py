"""Fast oracle checks run by ``chi-ilqr selftest``."""

from __future__ import annotations

import numpy as np

from . import bench, toys
from .hybrid import SimOptions, open_loop, simulate
from .ilqr import CostWeights, Problem, SolverOptions, solve
from .models import hopper as hop
from .variational import bfgs_update, fundamental_solution, linearize, saltation


def lqr_oracle():
    h, N = 0.05, 20
    A, B = toys.double_integrator_discrete(h)
    Q_N, R = np.eye(2), 0.1 * np.eye(1)
    P = Q_N
    K = np.zeros((N, 1, 2))
    for i in range(N - 1, -1, -1):
        K[i] = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = A.T @ P @ (A - B @ K[i])
    x0 = np.array([1.0, 0.0])
    w = CostWeights(Q_N=Q_N, R=R, x_goal=np.zeros(2))
    art = solve(Problem(toys.double_integrator(), x0, "free", w, h * N, N), np.zeros((N, 1)), "vanilla",
                SolverOptions(n_iterations=2))
    err = max(np.max(np.abs(art.tracking_gains.K - K)), abs(art.J - x0 @ P @ x0))
    return err < 1e-8, f"max gain/cost error {err:.2e}"


def ball_saltation():
    v = -3.0
    Xi, _ = saltation(toys.bouncing_ball().transitions[("ball", "ball")], [v, -9.81], [-v, -9.81],
                      [0.0, v], 0.0, [0.0])
    err = np.max(np.abs(Xi - toys.bouncing_ball_saltation(v)))
    return err < 1e-12, f"max entry error {err:.2e}"


def hopper_touchdown_saltation():
    """Step Jacobian across touchdown against central differences of the step map."""
    system = hop.hopper_system()
    task = hop.hopper_task()
    traj = simulate(system, task.x0, task.mode0, open_loop(hop.hopper_initial_guess(task)), 0.0, task.duration,
                    task.N)
    i = next(ev.step for ev in traj.events if ev.key == (hop.AIR, hop.STANCE))
    A = linearize(system, traj)[i].A
    x, u, t0, h = traj.states[i], traj.inputs[i], traj.times[i], traj.h
    fd = np.zeros_like(A)
    for j in range(len(x)):
        d = 1e-6 * max(1.0, abs(x[j]))
        ends = []
        for s in (1, -1):
            xp = x.copy()
            xp[j] += s * d
            ends.append(simulate(system, xp, traj.modes[i], open_loop(u[None]), t0, t0 + h, 1).states[-1])
        fd[:, j] = (ends[0] - ends[1]) / (2 * d)
    err = np.linalg.norm(A - fd) / np.linalg.norm(fd)
    return err < 1e-3, f"relative error {err:.2e}"


def svd_consistency():
    rng = np.random.default_rng(0)
    system = toys.double_integrator()
    N = 10
    U = rng.standard_normal((N, 1))
    traj = simulate(system, np.array([0.3, -0.1]), "free", open_loop(U), 0.0, 0.5, N)
    K = 0.5 * rng.standard_normal((N, 1, 2))
    fs = fundamental_solution(linearize(system, traj), K)
    V = rng.standard_normal((2000, 2))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    sampled = np.max(np.linalg.norm(V @ fs.Phi.T, axis=1))
    along = np.linalg.norm(fs.Phi @ fs.v)
    ok = sampled <= fs.chi * (1 + 1e-12) and abs(along - fs.chi) < 1e-12 * fs.chi and sampled > 0.99 * fs.chi
    return ok, f"chi {fs.chi:.6g}, sampled max {sampled:.6g}"


def bfgs_scalar():
    H = bfgs_update(np.eye(1), np.array([1.0]), np.array([2.0]))
    return bool(np.allclose(H, [[2.0]])), f"H = {H.ravel()}"


def sampling_determinism():
    a = bench.sample_perturbation(1e-4, 6, bench.trial_stream(7, 3))
    b = bench.sample_perturbation(1e-4, 6, bench.trial_stream(7, 3))
    c = bench.sample_perturbation(1e-4, 6, bench.trial_stream(7, 4))
    return bool(np.array_equal(a, b) and not np.array_equal(a, c)), "same key repeats, next key differs"


CHECKS = [
    ("lqr_oracle", lqr_oracle),
    ("ball_saltation", ball_saltation),
    ("hopper_touchdown_saltation", hopper_touchdown_saltation),
    ("svd_consistency", svd_consistency),
    ("bfgs_scalar", bfgs_scalar),
    ("sampling_determinism", sampling_determinism),
]


def run_all():
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing check is a failed check
            ok, detail = False, f"{type(err).__name__}: {err}"
        out.append((name, bool(ok), detail))
    return out
