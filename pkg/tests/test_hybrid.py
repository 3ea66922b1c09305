import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from chi_ilqr import toys
from chi_ilqr.hybrid import (
    BracketError,
    DivergenceError,
    DomainError,
    HybridMode,
    HybridSystem,
    SimOptions,
    Transition,
    ZenoError,
    apply_reset,
    integrate_smooth,
    locate_event,
    open_loop,
    simulate,
)
from chi_ilqr.models import hopper as hop


def linear_mode(A, m=1):
    A = np.asarray(A, dtype=float)
    return HybridMode("lin", len(A), m, lambda t, x, u: x @ A.T)


def test_zero_field_keeps_state():
    mode = HybridMode("z", 3, 1, lambda t, x, u: np.zeros_like(x))
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(integrate_smooth(mode, 0.0, x, [0.0], 0.7), x)


def test_double_integrator_exact_step():
    mode = linear_mode([[0, 1], [0, 0]])
    np.testing.assert_allclose(integrate_smooth(mode, 0.0, [0.0, 1.0], [0.0], 1.0), [1.0, 1.0], atol=1e-14)


def test_hopper_flight_drop():
    p = hop.HopperParams()
    mode = hop.hopper_system().modes[hop.AIR]
    x = np.array([0.0, 2.0, 0.0, 0.0, 0.0, 0.0])
    out = integrate_smooth(mode, 0.0, x, [0.0, 0.0], 0.1)
    assert out[1] == pytest.approx(2.0 - 0.5 * p.gravity * 0.01, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_matrix_exponential_oracle(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4))
    x = rng.standard_normal(4)
    h = 0.2
    out = integrate_smooth(linear_mode(A), 0.0, x, [0.0], h)
    np.testing.assert_allclose(out, expm(A * h) @ x, rtol=1e-10, atol=1e-12)


def test_integrator_order_on_halving():
    """Doubling the substeps moves a smooth rollout by far less than the state scale."""
    rng = np.random.default_rng(5)
    A = rng.standard_normal((3, 3))
    x = rng.standard_normal(3)
    ref = expm(A * 1.0) @ x
    e10 = np.linalg.norm(integrate_smooth(linear_mode(A), 0.0, x, [0.0], 1.0, substeps=10) - ref)
    e20 = np.linalg.norm(integrate_smooth(linear_mode(A), 0.0, x, [0.0], 1.0, substeps=20) - ref)
    assert e20 < e10 / 20  # fifth order: ideally 1/32


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.01, 0.3))
def test_time_reversal(a, b, h):
    A = np.array([[0.0, 1.0], [-4.0, -0.3]])
    fwd = linear_mode(A)
    bwd = linear_mode(-A)
    x = np.array([a, b])
    back = integrate_smooth(bwd, 0.0, integrate_smooth(fwd, 0.0, x, [0.0], h), [0.0], h)
    # 20 fifth-order substeps of up to 0.03 with |A| ~ 2: truncation ~ 1e-9
    np.testing.assert_allclose(back, x, atol=1e-8)


def test_locate_event_ballistic_drop():
    ball = toys.bouncing_ball()
    tr = ball.transitions[("ball", "ball")]
    t_e, x_e = locate_event(ball.modes["ball"], tr, 0.0, [0.1, 0.0], [0.0], 0.5)
    assert t_e == pytest.approx(math.sqrt(2 * 0.1 / 9.81), abs=1e-9)
    assert abs(x_e[0]) <= 1e-10


def test_locate_event_at_boundary():
    ball = toys.bouncing_ball()
    tr = ball.transitions[("ball", "ball")]
    x = np.array([0.0, -1.0])
    t_e, x_e = locate_event(ball.modes["ball"], tr, 0.3, x, [0.0], 0.5)
    assert t_e == 0.3 and np.array_equal(x_e, x)


def test_locate_event_linear_guard():
    mode = HybridMode("c", 1, 1, lambda t, x, u: np.ones_like(x))
    tr = Transition("c", "c", lambda t, x, u: 1.0 - 10.0 * t)
    t_e, _ = locate_event(mode, tr, 0.0, [0.0], [0.0], 0.5)
    assert t_e == pytest.approx(0.1, abs=1e-10)


def test_locate_event_without_sign_change():
    ball = toys.bouncing_ball()
    with pytest.raises(BracketError):
        locate_event(ball.modes["ball"], ball.transitions[("ball", "ball")], 0.0, [5.0, 0.0], [0.0], 0.1)


def test_bouncing_ball_first_bounce():
    ball = toys.bouncing_ball(restitution=0.5)
    traj = simulate(ball, [1.0, 0.0], "ball", open_loop(np.zeros((10, 1))), 0.0, 1.0, 10)
    ev = traj.events[0]
    assert ev.time == pytest.approx(math.sqrt(2 / 9.81), abs=1e-9)
    assert ev.time == pytest.approx(0.4515, abs=1e-4)
    assert ev.x_plus[1] == pytest.approx(0.5 * math.sqrt(2 * 9.81), abs=1e-8)
    assert ev.x_plus[1] == pytest.approx(2.215, abs=1e-3)


def test_restitution_reset():
    tr = toys.bouncing_ball(restitution=0.5).transitions[("ball", "ball")]
    np.testing.assert_allclose(apply_reset(tr, 0.0, [0.0, -3.0]), [0.0, 1.5])


def test_smooth_rollout_is_concatenation():
    sys_ = toys.double_integrator()
    U = np.array([[1.0], [-0.5], [0.25]])
    traj = simulate(sys_, [0.0, 0.0], "free", open_loop(U), 0.0, 0.3, 3)
    x = np.zeros(2)
    for i in range(3):
        x = integrate_smooth(sys_.modes["free"], 0.1 * i, x, U[i], 0.1)
        np.testing.assert_allclose(traj.states[i + 1], x, atol=1e-15)
    assert set(traj.modes) == {"free"} and not traj.events


def test_trajectory_invariants(hopper, hopper_guess_traj):
    traj = hopper_guess_traj
    eps = hopper.options.eps_guard
    times = [ev.time for ev in traj.events]
    assert times == sorted(times) and len(set(times)) == len(times)
    for ev in traj.events:
        tr = hopper.transitions[ev.key]
        assert traj.times[ev.step] <= ev.time <= traj.times[ev.step + 1]
        g = tr.guard(np.array([ev.time]), ev.x_minus[None], traj.inputs[ev.step][None])[0]
        assert abs(g) <= eps
        np.testing.assert_array_equal(apply_reset(tr, ev.time, ev.x_minus), ev.x_plus)
    for i, x in enumerate(traj.states):
        for tr in hopper.outgoing(traj.modes[i]):
            u = traj.inputs[min(i, traj.N - 1)]
            assert tr.guard(np.array([traj.times[i]]), x[None], u[None])[0] >= -eps


def test_replay_is_bit_identical(hopper, hopper_guess_traj):
    traj = hopper_guess_traj
    again = simulate(hopper, traj.states[0], traj.modes[0], open_loop(traj.inputs), 0.0, traj.times[-1], traj.N)
    assert np.array_equal(again.states, traj.states)
    assert again.signature() == traj.signature()


def test_zeno_detection():
    # five bounces inside one long knot interval
    ball = toys.bouncing_ball(restitution=0.9, options=SimOptions(substeps=100, max_events_per_step=4))
    with pytest.raises(ZenoError):
        simulate(ball, [1.0, 0.0], "ball", open_loop(np.zeros((1, 1))), 0.0, 6.0, 1)


def test_quick_rebound_inside_first_substep():
    ball = toys.bouncing_ball(restitution=0.2)
    traj = simulate(ball, [0.05, 0.0], "ball", open_loop(np.zeros((1, 1))), 0.0, 0.145, 1)
    assert len(traj.events) == 2
    v1 = 0.2 * math.sqrt(2 * 9.81 * 0.05)
    assert traj.events[1].time - traj.events[0].time == pytest.approx(2 * v1 / 9.81, abs=1e-9)


def test_divergence_box():
    ball = toys.bouncing_ball(options=SimOptions(bounds=(np.array([-1.0, -1.0]), np.array([10.0, 1.0]))))
    with pytest.raises(DivergenceError):
        simulate(ball, [1.0, 0.0], "ball", open_loop(np.zeros((5, 1))), 0.0, 1.0, 5)


def test_box_ignores_states_past_an_event():
    """Pre-event dynamics that run away after the crossing inside one step are not a divergence."""
    # y grows like 1e6 x^2 once x goes negative, but the guard x fires first
    fall = HybridMode("fall", 2, 1, lambda t, x, u: np.stack([-np.ones(len(x)), 1e6 * np.maximum(-x[:, 0], 0.0)], 1))
    rest = HybridMode("rest", 2, 1, lambda t, x, u: np.zeros_like(x))
    tr = Transition("fall", "rest", lambda t, x, u: x[:, 0], lambda t, x: x)
    box = (np.full(2, -100.0), np.full(2, 100.0))
    sys_ = HybridSystem({"fall": fall, "rest": rest}, {("fall", "rest"): tr}, SimOptions(bounds=box))
    traj = simulate(sys_, [0.01, 0.0], "fall", open_loop(np.zeros((1, 1))), 0.0, 0.1, 1)
    assert traj.modes[-1] == "rest"
    assert traj.events[0].time == pytest.approx(0.01, abs=1e-9)
    assert np.all(np.abs(traj.states[-1]) < 1e-6)


def test_start_outside_domain():
    with pytest.raises(DomainError):
        simulate(toys.bouncing_ball(), [-0.1, 0.0], "ball", open_loop(np.zeros((1, 1))), 0.0, 0.1, 1)


def test_reset_surface_is_not_an_immediate_event():
    """Leaving a reset with the guard at zero does not fire the same guard again."""
    mode = HybridMode("a", 1, 1, lambda t, x, u: -np.ones_like(x))
    # the reset lands exactly on the guard surface and the flow keeps pushing down
    tr = Transition("a", "a", lambda t, x, u: x[:, 0], lambda t, x: np.zeros_like(x))
    sys_ = HybridSystem({"a": mode}, {("a", "a"): tr})
    traj = simulate(sys_, [0.05], "a", open_loop(np.zeros((1, 1))), 0.0, 0.1, 1)
    assert len(traj.events) == 1
    assert traj.states[-1, 0] == pytest.approx(-0.05)


def test_event_sliding_across_knot_is_continuous():
    """A guard reaching zero exactly at a knot fires at the start of the next step."""
    mode = HybridMode("a", 1, 1, lambda t, x, u: -np.ones_like(x))
    stop = HybridMode("b", 1, 1, lambda t, x, u: np.zeros_like(x))
    tr = Transition("a", "b", lambda t, x, u: x[:, 0])
    sys_ = HybridSystem({"a": mode, "b": stop}, {("a", "b"): tr})
    ends = []
    for x0 in (0.1 + 1e-12, 0.1, 0.1 - 1e-12):
        traj = simulate(sys_, [x0], "a", open_loop(np.zeros((2, 1))), 0.0, 0.2, 2)
        assert [ev.key for ev in traj.events] == [("a", "b")]
        ends.append(traj.states[-1, 0])
    np.testing.assert_allclose(ends, 0.0, atol=1e-10)
