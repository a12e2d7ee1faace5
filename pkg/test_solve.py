"""Tests for the first-order Lagrangian solvers."""

import math
import time

import numpy as np
import pytest

from diffctl import adcore as ad
from diffctl.errors import DivergenceError
from diffctl.models import BoundMode, NlpProblem, ShootingConfig, SolverConfig, SolverMethod, SolverState
from diffctl.solve import (
    extragradient_step, gda_step, kkt_residuals, lagrangian, primal, reparametrize, solve_nlp,
)
from diffctl.systems import make_system
from diffctl.transcribe import build_problem, single_shooting

from conftest import stack


def _toy(objective, constraints, n_constraints, lower=-np.inf, upper=np.inf, guess=0.0):
    """One decision variable with optional box bounds."""
    return NlpProblem(
        name="toy", n_decision=1,
        objective=objective, eq_constraints=constraints,
        lower=np.array([lower]), upper=np.array([upper]), x0_guess=np.array([guess]),
        unravel=lambda y: (np.zeros((0, 1)), np.asarray(y).reshape(1, 1)),
        ravel=lambda states, controls: np.asarray(controls).ravel(),
        n_constraints=n_constraints,
    )


def _bilinear():
    """L(y, lambda) = lambda * y: a rotation for simultaneous steps."""
    return _toy(lambda y: 0.0, lambda y: stack(y[0]), 1)


def _norm(state):
    return math.hypot(state.y[0], state.lam[0])


# ============ Steps ============

def test_gda_spirals_outward_on_a_bilinear_game():
    p = _bilinear()
    cfg = SolverConfig(eta_y=0.1, eta_lambda=0.1)
    state = SolverState(np.array([1.0]), np.array([1.0]))
    norms = [_norm(state)]
    for _ in range(50):
        state = gda_step(p, state, cfg)
        norms.append(_norm(state))
    assert all(b > a for a, b in zip(norms, norms[1:]))
    assert norms[-1] == pytest.approx(math.sqrt(2.0) * 1.01 ** 25, rel=1e-9)


def test_extragradient_contracts_on_a_bilinear_game():
    p = _bilinear()
    eta = 0.1
    cfg = SolverConfig(eta_y=eta, eta_lambda=eta)
    state = SolverState(np.array([1.0]), np.array([1.0]))
    for _ in range(300):
        state = extragradient_step(p, state, cfg)
    expected = math.sqrt(2.0) * (1.0 - eta ** 2 + eta ** 4) ** 150
    assert _norm(state) == pytest.approx(expected, rel=1e-9)
    assert _norm(state) < 0.5
    assert state.iteration == 300


def test_lagrangian_checks_multiplier_count():
    p = _bilinear()
    assert float(lagrangian(p, np.array([2.0]), np.array([3.0]))) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        lagrangian(p, np.array([2.0]), np.array([1.0, 1.0]))


# ============ Driver ============

@pytest.mark.parametrize("method", [SolverMethod.GDA, SolverMethod.EXTRAGRADIENT])
def test_equality_constrained_quadratic_reaches_its_kkt_point(method):
    p = _toy(lambda y: y[0] * y[0], lambda y: stack(y[0] - 1.0), 1)
    cfg = SolverConfig(eta_y=0.1, eta_lambda=0.1, max_iters=5000, tol_grad=1e-8, tol_constraint=1e-8, method=method)
    state, diagnostics = solve_nlp(p, cfg)

    assert diagnostics.converged
    assert state.y[0] == pytest.approx(1.0, abs=1e-4)
    assert state.lam[0] == pytest.approx(-2.0, abs=1e-4)
    stationarity, violation = kkt_residuals(p, state, cfg)
    assert stationarity <= 1e-8 and violation <= 1e-8
    assert diagnostics.records[0].iteration == 0
    assert diagnostics.iterations == state.iteration


def test_projection_stops_at_an_active_bound():
    p = _toy(lambda y: (y[0] - 3.0) ** 2, lambda y: np.zeros(0), 0, lower=0.0, upper=1.0, guess=0.5)
    state, diagnostics = solve_nlp(p, SolverConfig(eta_y=0.1, max_iters=100))
    assert diagnostics.converged
    assert state.y[0] == 1.0
    assert diagnostics.records[-1].grad_norm == 0.0


def test_reparametrization_stays_strictly_inside_the_box():
    p = _toy(lambda y: (y[0] - 3.0) ** 2, lambda y: np.zeros(0), 0, lower=0.0, upper=1.0, guess=0.5)
    cfg = SolverConfig(eta_y=0.1, max_iters=2000, bound_mode=BoundMode.REPARAMETRIZATION)
    state, _ = solve_nlp(p, cfg)
    y = primal(p, state)[0]
    assert 0.99 < y < 1.0


def test_reparametrize_is_monotone_and_open():
    x = np.array([-50.0, -1.0, 0.0, 1.0, 50.0])
    mapped = reparametrize(x, 0.0, 2.0, 1.0)
    assert mapped[2] == pytest.approx(1.0)
    assert np.all(np.diff(mapped) > 0)
    assert np.all((mapped >= 0.0) & (mapped <= 2.0))
    assert float(reparametrize(1.0, 0.0, 2.0, 1.0)) == pytest.approx(mapped[3])
    with pytest.raises(ValueError):
        reparametrize(x, 0.0, 2.0, 0.0)


def test_reparametrize_records_on_a_tape():
    _, grad = ad.value_and_grad(lambda x: reparametrize(x[0], -1.0, 1.0, 2.0), [0.0])
    # d/dx of 2 * sigmoid(2x) - 1 at zero
    assert grad == pytest.approx([1.0])


def test_divergence_is_raised_with_diagnostics():
    p = _toy(lambda y: -y[0] * y[0], lambda y: np.zeros(0), 0, guess=1.0)
    # each step doubles the iterate
    cfg = SolverConfig(eta_y=0.5, max_iters=1000, divergence_ceiling=1e6, method=SolverMethod.GDA)
    with pytest.raises(DivergenceError) as info:
        solve_nlp(p, cfg)
    assert info.value.iteration == 20
    assert len(info.value.diagnostics.records) == 20


def test_callback_sees_every_iterate():
    p = _toy(lambda y: y[0] * y[0], lambda y: stack(y[0] - 1.0), 1)
    seen = []
    solve_nlp(p, SolverConfig(eta_y=0.1, eta_lambda=0.1, max_iters=25, tol_grad=1e-12, tol_constraint=1e-12),
              callback=lambda s: seen.append(s.iteration))
    assert seen == list(range(1, 26))


# ============ Trajectory problems ============

def test_projectile_single_shooting_finds_the_launch_velocity():
    system = make_system("projectile")
    problem = single_shooting(system, ShootingConfig(n_controls=21, n_intervals=4, steps_per_interval=5))
    cfg = SolverConfig(eta_y=0.5, eta_lambda=0.5, max_iters=2000, tol_grad=1e-8, tol_constraint=1e-8)
    state, diagnostics = solve_nlp(problem, cfg)

    assert diagnostics.converged
    assert state.y[0] == pytest.approx(491.5, abs=1e-3)
    trajectory = problem.trajectory(primal(problem, state))
    assert trajectory.states[-1][0] == pytest.approx(100.0, abs=1e-3)


@pytest.mark.slow
def test_trapezoidal_collocation_recovers_minimum_effort_control(double_integrator):
    problem = build_problem(double_integrator, "trapezoidal-collocation", ShootingConfig(n_controls=41))
    cfg = SolverConfig(eta_y=0.02, eta_lambda=0.02, max_iters=200000, tol_grad=1e-7, tol_constraint=1e-7,
                       penalty=1.0)
    state, _ = solve_nlp(problem, cfg)
    trajectory = problem.trajectory(primal(problem, state))
    exact = 6.0 - 12.0 * trajectory.times
    assert np.max(np.abs(trajectory.controls[:, 0] - exact)) <= 2e-2


def test_projectile_multiple_shooting_converges_from_a_rollout_seed():
    system = make_system("projectile")
    problem = build_problem(system, "multiple-shooting",
                            ShootingConfig(n_controls=21, n_intervals=5, steps_per_interval=1))
    assert list(problem.state_scale) == [65536.0, 1024.0]
    cfg = SolverConfig(eta_y=0.3, eta_lambda=0.3, penalty=0.75, max_iters=20000, tol_grad=1e-8,
                       tol_constraint=1e-8)

    started = time.perf_counter()
    state, diagnostics = solve_nlp(problem, cfg)
    elapsed = time.perf_counter() - started

    assert diagnostics.converged
    assert elapsed < 5.0
    y = primal(problem, state)
    states, _ = problem.unravel(y)
    assert states[0][1] == pytest.approx(491.5, abs=1e-3)
    assert np.max(np.abs(problem.eq_constraints(y))) <= 1e-6


@pytest.mark.slow
def test_hermite_simpson_collocation_recovers_minimum_effort_control(double_integrator):
    problem = build_problem(double_integrator, "hermite-simpson-collocation", ShootingConfig(n_controls=21))
    cfg = SolverConfig(eta_y=0.02, eta_lambda=0.02, max_iters=200000, tol_grad=1e-7, tol_constraint=1e-7,
                       penalty=1.0)
    state, _ = solve_nlp(problem, cfg)
    _, controls = problem.unravel(primal(problem, state))
    # controls interleave knots and segment midpoints
    half_nodes = np.linspace(double_integrator.t_start, double_integrator.t_final, 41)
    assert np.max(np.abs(np.asarray(controls)[:, 0] - (6.0 - 12.0 * half_nodes))) <= 2e-3
