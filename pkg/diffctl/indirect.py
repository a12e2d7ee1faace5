"""Forward-backward sweep for free-endpoint optimal control problems."""

import logging
from typing import Optional, Tuple

import numpy as np

from . import adcore as ad
from .config import FBSM_CONTROL_ITERS, FBSM_CONTROL_STEP, FBSM_MIN_RELAXATION, FBSM_RELAXATION
from .integrate import interpolate, rollout, uniform_spline
from .models import (
    ControlSystem, FbsmDiagnostics, IntegratorKind, InterpolationScheme, SweepRecord, SweepState, Trajectory,
)
from .transcribe import initial_controls

logger = logging.getLogger(__name__)

# Relative slack when comparing rolled-out costs between sweeps
COST_SLACK = 1e-10


def _linearize(system: ControlSystem, x: np.ndarray, u: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of the running cost and Jacobian of the dynamics in x."""
    tape = ad.Tape()
    xs = tape.variables(x)
    f = np.asarray(system.dynamics(xs, np.asarray(u, dtype=float)))
    c = system.cost(xs, np.asarray(u, dtype=float), t)
    grad_c = ad.gradient(tape, c if ad.is_var(c) else None, list(xs))
    jac = np.array([ad.gradient(tape, fi if ad.is_var(fi) else None, list(xs)) for fi in f])
    return grad_c, jac.reshape(system.state_dim, system.state_dim)


def _hamiltonian_control_grad(system: ControlSystem, x: np.ndarray, u: np.ndarray,
                              lam: np.ndarray, t: float) -> Tuple[float, np.ndarray]:
    """H = c + lambda . f and its gradient in u."""
    tape = ad.Tape()
    us = tape.variables(u)
    f = np.asarray(system.dynamics(np.asarray(x, dtype=float), us))
    h = system.cost(np.asarray(x, dtype=float), us, t)
    for lam_j, f_j in zip(lam, f):
        h = h + float(lam_j) * f_j
    return float(ad.value_of(h)), ad.gradient(tape, h if ad.is_var(h) else None, list(us))


def _terminal_adjoint(system: ControlSystem, x_final: np.ndarray) -> np.ndarray:
    if system.terminal_cost is None:
        return np.zeros(system.state_dim)
    value, tape = ad.record(system.terminal_cost, x_final)
    return ad.gradient(tape)


def _lerp(grid: np.ndarray, rows: np.ndarray, t: float) -> np.ndarray:
    return np.array([np.interp(t, grid, rows[:, j]) for j in range(rows.shape[1])])


def _backward_adjoint(system: ControlSystem, times: np.ndarray, states: np.ndarray,
                      spline, lam_final: np.ndarray) -> np.ndarray:
    """RK4 integration of lambda' = -dH/dx from t_final back to t_start."""
    def rhs_at(t):
        x = _lerp(times, states, t)
        u = np.asarray(interpolate(spline, t), dtype=float)
        grad_c, jac = _linearize(system, x, u, t)
        return lambda lam: -(grad_c + jac.T @ lam)

    n = len(times) - 1
    adjoints = np.zeros_like(states)
    adjoints[n] = lam_final
    lam = lam_final
    next_rhs = rhs_at(times[n])
    for i in range(n, 0, -1):
        t_hi, t_lo = times[i], times[i - 1]
        h = t_lo - t_hi
        g_hi = next_rhs
        g_mid = rhs_at(0.5 * (t_hi + t_lo))
        g_lo = rhs_at(t_lo)
        k1 = g_hi(lam)
        k2 = g_mid(lam + 0.5 * h * k1)
        k3 = g_mid(lam + 0.5 * h * k2)
        k4 = g_lo(lam + h * k3)
        lam = lam + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        adjoints[i - 1] = lam
        next_rhs = g_lo
    return adjoints


def _minimize_hamiltonian(system: ControlSystem, x: np.ndarray, u: np.ndarray, lam: np.ndarray,
                          t: float, step: float, iters: int) -> np.ndarray:
    """Projected gradient descent on H in u, halving the step whenever H increases."""
    lower, upper = system.control_box()
    value, grad = _hamiltonian_control_grad(system, x, u, lam, t)
    for _ in range(iters):
        trial = np.clip(u - step * grad, lower, upper)
        trial_value, trial_grad = _hamiltonian_control_grad(system, x, trial, lam, t)
        if trial_value > value:
            step *= 0.5
            continue
        u, value, grad = trial, trial_value, trial_grad
    return u


def hamiltonian_stationarity(system: ControlSystem, states: np.ndarray, controls: np.ndarray,
                             adjoints: np.ndarray, times: np.ndarray) -> float:
    """Max-norm over the grid of the projected gradient of H in u."""
    lower, upper = system.control_box()
    worst = 0.0
    for x, u, lam, t in zip(states, controls, adjoints, times):
        _, grad = _hamiltonian_control_grad(system, x, u, lam, t)
        moved = np.clip(u - grad, lower, upper)
        worst = max(worst, float(np.max(np.abs(u - moved), initial=0.0)))
    return worst


def fbsm_solve(system: ControlSystem, n_steps: int = 100, max_sweeps: int = 200, tol: float = 1e-6,
               relaxation: float = FBSM_RELAXATION, control_step: float = FBSM_CONTROL_STEP,
               control_iters: int = FBSM_CONTROL_ITERS,
               initial: Optional[np.ndarray] = None) -> Tuple[Trajectory, FbsmDiagnostics]:
    """
    Forward-backward sweep method.

    Each sweep integrates the states forward with RK4, the adjoint backward
    with RK4 from the transversality condition, then moves every control
    node toward the pointwise minimizer of the Hamiltonian. The update is
    blended with the previous controls by the relaxation weight; a sweep
    that raises the rolled-out cost is retried with half the weight.

    Args:
        system: Free-endpoint control system
        n_steps: Uniform grid steps (controls live on the n_steps + 1 nodes)
        max_sweeps: Sweep budget
        tol: Convergence threshold on the max-norm of the proposed control change
        relaxation: Initial blending weight in (0, 1]
        control_step: Initial projected-gradient step on H in u
        control_iters: Projected-gradient iterations per node and sweep
        initial: Starting controls, shape (n_steps + 1, M)

    Returns:
        (trajectory, diagnostics); diagnostics.converged is False when the
        budget ran out
    """
    if system.has_fixed_final:
        raise ValueError(f"{system.name} fixes its terminal state; the sweep handles free endpoints only")
    if system.free_start:
        raise ValueError(f"{system.name} has optimizer-chosen start entries; the sweep needs a fixed start")
    if not 0 < relaxation <= 1:
        raise ValueError("relaxation must lie in (0, 1]")

    kind = IntegratorKind.RK4
    scheme = InterpolationScheme.LINEAR
    times = np.linspace(system.t_start, system.t_final, n_steps + 1)
    controls = initial_controls(system, n_steps + 1) if initial is None else np.array(initial, dtype=float)

    def forward(u_nodes):
        spline = uniform_spline(u_nodes, system.t_start, system.t_final, scheme)
        traj, total = rollout(kind, system, spline, n_steps)
        return spline, np.asarray(traj.states, dtype=float), float(ad.value_of(total))

    spline, states, cost = forward(controls)
    sweep = SweepState(controls, states, np.zeros_like(states), relaxation)
    diagnostics = FbsmDiagnostics()

    for index in range(1, max_sweeps + 1):
        sweep.adjoints = _backward_adjoint(system, times, sweep.states, spline,
                                           _terminal_adjoint(system, sweep.states[-1]))
        candidate = np.array([
            _minimize_hamiltonian(system, x, u, lam, t, control_step, control_iters)
            for x, u, lam, t in zip(sweep.states, sweep.controls, sweep.adjoints, times)
        ])
        change = float(np.max(np.abs(candidate - sweep.controls), initial=0.0))
        diagnostics.final_change = change
        diagnostics.sweeps = index

        if change <= tol:
            diagnostics.records.append(SweepRecord(index, change, cost, sweep.relaxation, True))
            diagnostics.converged = True
            break

        accepted = False
        while sweep.relaxation >= FBSM_MIN_RELAXATION:
            blended = (1.0 - sweep.relaxation) * sweep.controls + sweep.relaxation * candidate
            new_spline, new_states, new_cost = forward(blended)
            if new_cost <= cost + COST_SLACK * max(1.0, abs(cost)):
                sweep.controls, sweep.states = blended, new_states
                spline, cost = new_spline, new_cost
                accepted = True
                break
            sweep.relaxation *= 0.5
        diagnostics.records.append(SweepRecord(index, change, cost, sweep.relaxation, accepted))
        logger.debug("sweep %d: change=%.3e cost=%.8g relaxation=%.3g", index, change, cost, sweep.relaxation)
        if not accepted:
            logger.warning("%s: relaxation fell below %.1e; stopping after %d sweeps",
                           system.name, FBSM_MIN_RELAXATION, index)
            break

    # adjoint of the final controls, so the transversality condition holds for the returned states
    sweep.adjoints = _backward_adjoint(system, times, sweep.states, spline,
                                       _terminal_adjoint(system, sweep.states[-1]))
    diagnostics.adjoints = sweep.adjoints
    diagnostics.hamiltonian_grad_norm = hamiltonian_stationarity(
        system, sweep.states, sweep.controls, sweep.adjoints, times)
    if not diagnostics.converged:
        logger.warning("%s: forward-backward sweep did not converge (last change %.3e)",
                       system.name, diagnostics.final_change)
    return Trajectory(times, sweep.states, sweep.controls), diagnostics
