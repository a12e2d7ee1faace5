"""Fixed-step explicit integrators and control interpolation."""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import adcore as ad
from .errors import IntegrationBlowupError
from .models import ControlSpline, ControlSystem, IntegratorKind, InterpolationScheme, Trajectory
from .systems import augment_dynamics

logger = logging.getLogger(__name__)

Dynamics = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
ControlSource = Union[ControlSpline, Callable[[float], np.ndarray], None]


def default_scheme(kind: IntegratorKind) -> InterpolationScheme:
    """Euler pairs with held controls; multi-stage schemes sample between nodes."""
    if kind == IntegratorKind.EULER:
        return InterpolationScheme.CONSTANT
    return InterpolationScheme.LINEAR


def uniform_spline(nodes: np.ndarray, t_start: float, t_final: float,
                   scheme: InterpolationScheme = InterpolationScheme.LINEAR) -> ControlSpline:
    """Spline with nodes spread evenly over [t_start, t_final]."""
    nodes = np.asarray(nodes)
    if nodes.ndim == 1:
        nodes = nodes.reshape(-1, 1)
    return ControlSpline(nodes, np.linspace(t_start, t_final, nodes.shape[0]), scheme)


def interpolate(spline: ControlSpline, t: float) -> np.ndarray:
    """
    Control value at time t.

    Times outside the node range are clamped to the nearest endpoint.
    """
    times = spline.node_times
    n = len(times) - 1
    t = min(max(t, times[0]), times[n])
    k = int(np.searchsorted(times, t, side="right")) - 1
    k = min(max(k, 0), n)
    if spline.scheme == InterpolationScheme.CONSTANT or k == n:
        return spline.nodes[k]
    w = (t - times[k]) / (times[k + 1] - times[k])
    if w == 0.0:
        return spline.nodes[k]
    return spline.nodes[k] * (1.0 - w) + spline.nodes[k + 1] * w


def _control_at(control: ControlSource, t: float) -> np.ndarray:
    if control is None:
        return np.zeros(0)
    if isinstance(control, ControlSpline):
        return interpolate(control, t)
    return control(t)


def _check(x: np.ndarray, t: float) -> np.ndarray:
    if not ad.all_finite(x):
        raise IntegrationBlowupError(t, "state became non-finite")
    return x


def step(kind: IntegratorKind, f: Dynamics, x: np.ndarray, spline: ControlSource,
         t: float, dt: float) -> np.ndarray:
    """
    Advance x by one explicit step.

    Args:
        kind: Integrator to use
        f: Right-hand side f(x, u, t)
        x: Current state
        spline: Control source sampled at the stage times
        t: Current time
        dt: Step length, must be positive

    Returns:
        The state at t + dt
    """
    if dt <= 0:
        raise ValueError(f"step length must be positive, got {dt}")

    if kind == IntegratorKind.EULER:
        k1 = f(x, _control_at(spline, t), t)
        return _check(x + dt * k1, t + dt)

    if kind == IntegratorKind.HEUN:
        k1 = f(x, _control_at(spline, t), t)
        k2 = f(x + dt * k1, _control_at(spline, t + dt), t + dt)
        return _check(x + (0.5 * dt) * (k1 + k2), t + dt)

    if kind == IntegratorKind.MIDPOINT:
        half = t + 0.5 * dt
        k1 = f(x, _control_at(spline, t), t)
        k2 = f(x + (0.5 * dt) * k1, _control_at(spline, half), half)
        return _check(x + dt * k2, t + dt)

    if kind == IntegratorKind.RK4:
        half = t + 0.5 * dt
        u_half = _control_at(spline, half)
        k1 = f(x, _control_at(spline, t), t)
        k2 = f(x + (0.5 * dt) * k1, u_half, half)
        k3 = f(x + (0.5 * dt) * k2, u_half, half)
        k4 = f(x + dt * k3, _control_at(spline, t + dt), t + dt)
        return _check(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), t + dt)

    raise ValueError(f"unknown integrator {kind!r}")


def integrate_interval(kind: IntegratorKind, f: Dynamics, x0: np.ndarray, spline: ControlSource,
                       t0: float, t1: float, n_steps: int) -> List[np.ndarray]:
    """States at the n_steps + 1 uniform grid points of [t0, t1], starting with x0."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    _check(x0, t0)
    dt = (t1 - t0) / n_steps
    states = [x0]
    x = x0
    for i in range(n_steps):
        x = step(kind, f, x, spline, t0 + i * dt, dt)
        states.append(x)
    return states


def rollout(kind: IntegratorKind, system: ControlSystem, spline: ControlSource, n_steps: int,
            x0: Optional[np.ndarray] = None) -> Tuple[Trajectory, object]:
    """
    Integrate the cost-augmented system from its start state.

    Args:
        kind: Integrator to use
        system: The control system
        spline: Control signal covering [t_start, t_final]
        n_steps: Number of uniform steps
        x0: Start state replacing system.x_start (e.g. with optimizer-chosen entries)

    Returns:
        (trajectory on the step grid, integrated running cost plus terminal cost)
    """
    D = system.state_dim
    start = system.x_start if x0 is None else x0
    x_aug = np.concatenate([np.asarray(start), np.zeros(1)])
    states = integrate_interval(kind, augment_dynamics(system), x_aug, spline,
                                system.t_start, system.t_final, n_steps)
    times = np.linspace(system.t_start, system.t_final, n_steps + 1)
    xs = np.stack([s[:D] for s in states])
    us = np.stack([np.asarray(_control_at(spline, t)) for t in times])

    total = states[-1][D]
    if system.terminal_cost is not None:
        total = total + system.terminal_cost(states[-1][:D])
    return Trajectory(times, xs, us), total


# ============ Convergence study ============

def _exponential(x, u, t):
    return x


def convergence_study(kinds: Sequence[IntegratorKind] = tuple(IntegratorKind),
                      dts: Sequence[float] = (0.1, 0.05, 0.025, 0.0125),
                      t_final: float = 1.0) -> Dict[str, Dict[str, object]]:
    """
    Global error on x' = x, x(0) = 1 against e^t, per integrator and step size.

    Returns:
        {kind: {"dts", "errors", "slope", "expected_order"}} where slope is the
        least-squares log-log fit of error against dt
    """
    exact = np.exp(t_final)
    results = {}
    for kind in kinds:
        errors = []
        for dt in dts:
            n = int(round(t_final / dt))
            x = integrate_interval(kind, _exponential, np.array([1.0]), None, 0.0, t_final, n)[-1]
            errors.append(abs(float(x[0]) - exact))
        slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
        logger.debug("%s: errors=%s slope=%.3f", kind.value, errors, slope)
        results[kind.value] = {
            "dts": list(dts),
            "errors": errors,
            "slope": slope,
            "expected_order": kind.order,
        }
    return results
