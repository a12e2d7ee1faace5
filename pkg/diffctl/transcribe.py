"""Direct transcriptions of a ControlSystem into a nonlinear program.

Four methods are provided: single shooting, multiple shooting, trapezoidal
collocation and Hermite-Simpson collocation. Every objective and constraint
function works on float vectors and on recorded decision vectors.

Constraint sign convention: residuals are decision value minus target
(x_T - x_f, x_hat_0 - x_s, next boundary state minus integrated state).
"""

import logging
import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import adcore as ad
from .config import TRANSCRIPTION_METHODS
from .errors import DiffCtlError, TranscriptionError
from .integrate import default_scheme, integrate_interval, interpolate, rollout, uniform_spline
from .models import ControlSystem, NlpProblem, ShootingConfig, Trajectory
from .systems import augment_dynamics

logger = logging.getLogger(__name__)


class _Layout:
    """Named blocks of a flat decision vector."""

    def __init__(self, blocks: List[Tuple[str, Tuple[int, ...]]]):
        self.blocks = blocks
        self.offsets: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {}
        offset = 0
        for name, shape in blocks:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset

    def split(self, y: np.ndarray) -> Dict[str, np.ndarray]:
        if len(y) != self.size:
            raise ValueError(f"decision vector has {len(y)} entries, expected {self.size}")
        return {name: y[a:b].reshape(shape) for name, (a, b, shape) in self.offsets.items()}

    def join(self, parts: Dict[str, np.ndarray]) -> np.ndarray:
        pieces = []
        for name, (_, _, shape) in self.offsets.items():
            block = np.asarray(parts[name])
            if block.shape != shape:
                raise ValueError(f"block {name!r} has shape {block.shape}, expected {shape}")
            pieces.append(block.ravel())
        if not pieces:
            return np.zeros(0)
        return np.concatenate(pieces)


# ============ Shared helpers ============

def _tile(bound: np.ndarray, rows: int) -> np.ndarray:
    return np.tile(np.asarray(bound, dtype=float), (rows, 1))


def initial_controls(system: ControlSystem, n_nodes: int) -> np.ndarray:
    """Mid-box controls where both bounds are finite, else zero clipped into the box."""
    lower, upper = system.control_box()
    guess = np.where(np.isfinite(lower) & np.isfinite(upper), 0.5 * (lower + upper), 0.0)
    guess = np.clip(guess, lower, upper)
    return _tile(guess, n_nodes)


def initial_states(system: ControlSystem, times: np.ndarray) -> np.ndarray:
    """Linear interpolation from x_s toward x_f; free terminal components are held at x_s."""
    frac = (np.asarray(times) - system.t_start) / system.horizon
    start = system.x_start
    target = np.where(system.final_mask, system.x_final if system.x_final is not None else start, start)
    states = start[None, :] + frac[:, None] * (target - start)[None, :]
    lower, upper = system.state_box()
    return np.clip(states, lower, upper)


def _as_vector(parts: List[np.ndarray]) -> np.ndarray:
    parts = [np.asarray(p).ravel() for p in parts if np.asarray(p).size]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def _start_state(system: ControlSystem, free_values: np.ndarray) -> np.ndarray:
    if not system.free_start:
        return system.x_start
    dtype = object if any(ad.is_var(v) for v in free_values) else float
    x0 = np.array(system.x_start, dtype=dtype)
    for i, idx in enumerate(system.free_start):
        x0[idx] = free_values[i]
    return x0


def _terminal_residual(system: ControlSystem, x_final: np.ndarray, scale: float = 1.0) -> np.ndarray:
    mask = system.final_mask
    if not mask.any():
        return np.zeros(0)
    return (x_final[mask] - system.x_final[mask]) * scale


# ============ Single shooting ============

def single_shooting(system: ControlSystem, cfg: ShootingConfig,
                    enforce_state_bounds: bool = False) -> NlpProblem:
    """
    Controls (plus any free start entries) as the only decisions.

    The whole horizon is integrated in n_intervals * steps_per_interval
    uniform steps so single and multiple shooting share one grid.

    Raises:
        TranscriptionError: if state-bound enforcement is requested
    """
    if enforce_state_bounds:
        raise TranscriptionError("single shooting cannot impose constraints on the state trajectory")

    D, M = system.state_dim, system.control_dim
    n_nodes = cfg.n_controls
    free = list(system.free_start)
    layout = _Layout([("free", (len(free),)), ("controls", (n_nodes, M))])
    scheme = cfg.scheme or default_scheme(cfg.integrator)
    n_steps = cfg.n_intervals * cfg.steps_per_interval
    scale = 1.0 / system.horizon

    def _rollout(y):
        parts = layout.split(y)
        spline = uniform_spline(parts["controls"], system.t_start, system.t_final, scheme)
        return rollout(cfg.integrator, system, spline, n_steps, _start_state(system, parts["free"]))

    def evaluate(y):
        traj, total = _rollout(y)
        return total, _terminal_residual(system, traj.states[-1], scale)

    def unravel(y):
        parts = layout.split(y)
        if free:
            return _start_state(system, parts["free"]).reshape(1, D), parts["controls"]
        return np.zeros((0, D)), parts["controls"]

    def ravel(states, controls):
        free_values = np.asarray(states)[0, free] if free else np.zeros(0)
        return layout.join({"free": free_values, "controls": controls})

    def trajectory(y):
        return _rollout(np.asarray(ad.value_of(y), dtype=float))[0]

    s_lower, s_upper = system.state_box()
    c_lower, c_upper = system.control_box()
    lower = layout.join({"free": s_lower[free], "controls": _tile(c_lower, n_nodes)})
    upper = layout.join({"free": s_upper[free], "controls": _tile(c_upper, n_nodes)})
    guess = layout.join({
        "free": np.clip(system.x_start[free], s_lower[free], s_upper[free]),
        "controls": initial_controls(system, n_nodes),
    })

    return NlpProblem(
        name=f"single-shooting:{system.name}",
        n_decision=layout.size,
        objective=lambda y: evaluate(y)[0],
        eq_constraints=lambda y: evaluate(y)[1],
        lower=lower, upper=upper, x0_guess=guess,
        unravel=unravel, ravel=ravel,
        n_constraints=int(system.final_mask.sum()),
        trajectory=trajectory,
        evaluate=evaluate,
        planned_states=lambda y: _rollout(y)[0].states,
    )


# ============ Multiple shooting ============

def seeded_states(system: ControlSystem, cfg: ShootingConfig, controls: np.ndarray) -> np.ndarray:
    """
    Boundary states of one rollout of the control guess from x_s.

    Falls back to initial_states when the rollout fails or leaves the finite
    range; the result is clipped into the state box.
    """
    K = cfg.n_intervals
    boundary_times = np.linspace(system.t_start, system.t_final, K + 1)
    lower, upper = system.state_box()
    scheme = cfg.scheme or default_scheme(cfg.integrator)
    spline = uniform_spline(controls, system.t_start, system.t_final, scheme)
    start = np.clip(system.x_start, lower, upper)
    try:
        traj, _ = rollout(cfg.integrator, system, spline, K * cfg.steps_per_interval, start)
    except DiffCtlError as e:
        logger.debug("Seeding rollout of %s failed (%s); interpolating instead", system.name, e)
        return initial_states(system, boundary_times)
    states = np.asarray(traj.states, dtype=float)[::cfg.steps_per_interval]
    if not np.all(np.isfinite(states)):
        return initial_states(system, boundary_times)
    return np.clip(states, lower, upper)


def state_scale(system: ControlSystem, states: np.ndarray) -> np.ndarray:
    """Smallest power of two, at least 1, covering each state component's magnitude."""
    rows = [np.abs(np.asarray(states, dtype=float)), np.abs(system.x_start)[None, :]]
    if system.x_final is not None:
        rows.append(np.where(system.final_mask, np.abs(np.nan_to_num(system.x_final)), 0.0)[None, :])
    magnitude = np.max(np.vstack(rows), axis=0)
    return np.array([2.0 ** math.ceil(math.log2(m)) if m > 1.0 else 1.0 for m in magnitude])


def multiple_shooting(system: ControlSystem, cfg: ShootingConfig,
                      scale: Optional[np.ndarray] = None) -> NlpProblem:
    """
    Boundary states of each shooting interval join the controls as decisions.

    Boundary states are seeded from a rollout of the control guess and stored
    divided by a per-component power of two (see state_scale); defects and
    boundary pins are measured in the same scaled units. Passing scale
    reuses another problem's units and seeds by interpolation instead.

    Raises:
        TranscriptionError: if n_intervals does not divide the number of control segments
    """
    D, M = system.state_dim, system.control_dim
    n_segments = cfg.n_segments
    K = cfg.n_intervals
    if n_segments % K != 0:
        raise TranscriptionError(
            f"{K} shooting intervals do not divide {n_segments} control segments"
        )
    n_nodes = cfg.n_controls
    layout = _Layout([("states", (K + 1, D)), ("controls", (n_nodes, M))])
    scheme = cfg.scheme or default_scheme(cfg.integrator)
    boundary_times = np.linspace(system.t_start, system.t_final, K + 1)
    augmented = augment_dynamics(system)
    fixed = system.fixed_start_mask
    final = system.final_mask

    control_guess = initial_controls(system, n_nodes)
    if scale is None:
        state_guess = seeded_states(system, cfg, control_guess)
        scale = state_scale(system, state_guess)
    else:
        state_guess = initial_states(system, boundary_times)
        scale = np.asarray(scale, dtype=float)
        if scale.shape != (D,):
            raise TranscriptionError(f"state scale has shape {scale.shape}, expected ({D},)")
    inverse = 1.0 / scale

    def _intervals(states, spline):
        for i in range(K):
            x_aug = np.concatenate([np.asarray(states[i]), np.zeros(1)])
            yield integrate_interval(cfg.integrator, augmented, x_aug, spline,
                                     boundary_times[i], boundary_times[i + 1], cfg.steps_per_interval)

    def evaluate(y):
        parts = layout.split(y)
        states = parts["states"] * scale
        spline = uniform_spline(parts["controls"], system.t_start, system.t_final, scheme)
        total = 0.0
        defects = []
        for i, path in enumerate(_intervals(states, spline)):
            end = path[-1]
            total = total + end[D]
            defects.append((states[i + 1] - end[:D]) * inverse)
        if system.terminal_cost is not None:
            total = total + system.terminal_cost(states[K])
        residual = _as_vector(defects + [
            (states[0][fixed] - system.x_start[fixed]) * inverse[fixed],
            _terminal_residual(system, states[K], inverse[final]),
        ])
        return total, residual

    def unravel(y):
        parts = layout.split(y)
        return parts["states"] * scale, parts["controls"]

    def ravel(states, controls):
        return layout.join({"states": np.asarray(states) * inverse, "controls": controls})

    def trajectory(y):
        states, controls = unravel(np.asarray(ad.value_of(y), dtype=float))
        spline = uniform_spline(controls, system.t_start, system.t_final, scheme)
        rows, times = [], []
        for i, path in enumerate(_intervals(states, spline)):
            grid = np.linspace(boundary_times[i], boundary_times[i + 1], cfg.steps_per_interval + 1)
            start = 0 if i == 0 else 1
            rows.extend(s[:D] for s in path[start:])
            times.extend(grid[start:])
        times = np.array(times)
        controls = np.stack([np.asarray(interpolate(spline, t)) for t in times])
        return Trajectory(times, np.array(rows, dtype=float), controls)

    s_lower, s_upper = system.state_box()
    c_lower, c_upper = system.control_box()
    lower = layout.join({"states": _tile(s_lower * inverse, K + 1), "controls": _tile(c_lower, n_nodes)})
    upper = layout.join({"states": _tile(s_upper * inverse, K + 1), "controls": _tile(c_upper, n_nodes)})
    guess = ravel(state_guess, control_guess)

    return NlpProblem(
        name=f"multiple-shooting:{system.name}",
        n_decision=layout.size,
        objective=lambda y: evaluate(y)[0],
        eq_constraints=lambda y: evaluate(y)[1],
        lower=lower, upper=upper, x0_guess=guess,
        unravel=unravel, ravel=ravel,
        n_constraints=K * D + int(fixed.sum()) + int(final.sum()),
        trajectory=trajectory,
        evaluate=evaluate,
        planned_states=lambda y: unravel(y)[0],
        state_scale=scale,
    )


# ============ Collocation ============

def _collocation_bounds(system: ControlSystem, layout: _Layout, counts: Dict[str, int]):
    s_lower, s_upper = system.state_box()
    c_lower, c_upper = system.control_box()
    lower, upper = {}, {}
    for name, rows in counts.items():
        lo, hi = (s_lower, s_upper) if name == "states" else (c_lower, c_upper)
        lower[name] = _tile(lo, rows)
        upper[name] = _tile(hi, rows)
    return layout.join(lower), layout.join(upper)


def _boundary_pins(system: ControlSystem, X: np.ndarray) -> List[np.ndarray]:
    fixed = system.fixed_start_mask
    return [X[0][fixed] - system.x_start[fixed], _terminal_residual(system, X[-1])]


def _node_terms(system: ControlSystem, X, U, times):
    f = [np.asarray(system.dynamics(X[i], U[i])) for i in range(len(times))]
    c = [system.cost(X[i], U[i], times[i]) for i in range(len(times))]
    return f, c


def trapezoidal_collocation(system: ControlSystem, n_segments: int) -> NlpProblem:
    """
    States and controls at every grid node, trapezoid-rule defects and quadrature.

    Defects are (x_{i+1} - x_i) / h - (f_i + f_{i+1}) / 2.
    """
    if n_segments < 1:
        raise TranscriptionError("n_segments must be at least 1")
    D, M = system.state_dim, system.control_dim
    N = n_segments
    h = system.horizon / N
    times = np.linspace(system.t_start, system.t_final, N + 1)
    layout = _Layout([("states", (N + 1, D)), ("controls", (N + 1, M))])

    def evaluate(y):
        parts = layout.split(y)
        X, U = parts["states"], parts["controls"]
        f, c = _node_terms(system, X, U, times)
        defects = [(X[i + 1] - X[i]) / h - 0.5 * (f[i] + f[i + 1]) for i in range(N)]
        total = 0.0
        for i in range(N):
            total = total + (0.5 * h) * (c[i] + c[i + 1])
        if system.terminal_cost is not None:
            total = total + system.terminal_cost(X[N])
        return total, _as_vector(defects + _boundary_pins(system, X))

    def unravel(y):
        parts = layout.split(y)
        return parts["states"], parts["controls"]

    def ravel(states, controls):
        return layout.join({"states": states, "controls": controls})

    def trajectory(y):
        X, U = unravel(np.asarray(ad.value_of(y), dtype=float))
        return Trajectory(times, X, U)

    lower, upper = _collocation_bounds(system, layout, {"states": N + 1, "controls": N + 1})
    guess = layout.join({
        "states": initial_states(system, times),
        "controls": initial_controls(system, N + 1),
    })
    return NlpProblem(
        name=f"trapezoidal-collocation:{system.name}",
        n_decision=layout.size,
        objective=lambda y: evaluate(y)[0],
        eq_constraints=lambda y: evaluate(y)[1],
        lower=lower, upper=upper, x0_guess=guess,
        unravel=unravel, ravel=ravel,
        n_constraints=N * D + int(system.fixed_start_mask.sum()) + int(system.final_mask.sum()),
        trajectory=trajectory,
        evaluate=evaluate,
        planned_states=lambda y: unravel(y)[0],
    )


def hermite_simpson_collocation(system: ControlSystem, n_segments: int) -> NlpProblem:
    """
    Trapezoidal layout plus one midpoint control per segment.

    The midpoint state is the Hermite interpolant
    (x_i + x_{i+1}) / 2 + h / 8 * (f_i - f_{i+1}); defects and quadrature use
    Simpson's rule. unravel returns controls interleaved on the 2N + 1
    half-node grid: u_0, u_mid_0, u_1, ..., u_N.
    """
    if n_segments < 1:
        raise TranscriptionError("n_segments must be at least 1")
    D, M = system.state_dim, system.control_dim
    N = n_segments
    h = system.horizon / N
    times = np.linspace(system.t_start, system.t_final, N + 1)
    layout = _Layout([("states", (N + 1, D)), ("controls", (N + 1, M)), ("midpoints", (N, M))])

    def evaluate(y):
        parts = layout.split(y)
        X, U, Um = parts["states"], parts["controls"], parts["midpoints"]
        f, c = _node_terms(system, X, U, times)
        defects = []
        total = 0.0
        for i in range(N):
            t_mid = times[i] + 0.5 * h
            x_mid = 0.5 * (X[i] + X[i + 1]) + (h / 8.0) * (f[i] - f[i + 1])
            f_mid = np.asarray(system.dynamics(x_mid, Um[i]))
            c_mid = system.cost(x_mid, Um[i], t_mid)
            defects.append((X[i + 1] - X[i]) / h - (f[i] + 4.0 * f_mid + f[i + 1]) / 6.0)
            total = total + (h / 6.0) * (c[i] + 4.0 * c_mid + c[i + 1])
        if system.terminal_cost is not None:
            total = total + system.terminal_cost(X[N])
        return total, _as_vector(defects + _boundary_pins(system, X))

    def unravel(y):
        parts = layout.split(y)
        U, Um = parts["controls"], parts["midpoints"]
        knots = np.empty((2 * N + 1, M), dtype=np.result_type(U, Um))
        knots[0::2] = U
        knots[1::2] = Um
        return parts["states"], knots

    def ravel(states, controls):
        controls = np.asarray(controls)
        return layout.join({"states": states, "controls": controls[0::2], "midpoints": controls[1::2]})

    def trajectory(y):
        X, knots = unravel(np.asarray(ad.value_of(y), dtype=float))
        return Trajectory(times, X, knots[0::2])

    lower, upper = _collocation_bounds(system, layout, {"states": N + 1, "controls": N + 1, "midpoints": N})
    guess = layout.join({
        "states": initial_states(system, times),
        "controls": initial_controls(system, N + 1),
        "midpoints": initial_controls(system, N),
    })
    return NlpProblem(
        name=f"hermite-simpson-collocation:{system.name}",
        n_decision=layout.size,
        objective=lambda y: evaluate(y)[0],
        eq_constraints=lambda y: evaluate(y)[1],
        lower=lower, upper=upper, x0_guess=guess,
        unravel=unravel, ravel=ravel,
        n_constraints=N * D + int(system.fixed_start_mask.sum()) + int(system.final_mask.sum()),
        trajectory=trajectory,
        evaluate=evaluate,
        planned_states=lambda y: unravel(y)[0],
    )


# ============ Dispatch ============

def build_problem(system: ControlSystem, method: str, cfg: ShootingConfig,
                  enforce_state_bounds: bool = False,
                  scale: Optional[np.ndarray] = None) -> NlpProblem:
    """
    Build the NLP for a named direct method; collocation uses cfg.n_segments segments.

    scale fixes the multiple-shooting state scaling; other methods ignore it.
    """
    if method not in TRANSCRIPTION_METHODS or TRANSCRIPTION_METHODS[method]["approach"] != "direct":
        raise TranscriptionError(f"unknown direct transcription {method!r}")
    if method == "single-shooting":
        problem = single_shooting(system, cfg, enforce_state_bounds)
    elif method == "multiple-shooting":
        problem = multiple_shooting(system, cfg, scale)
    elif method == "trapezoidal-collocation":
        problem = trapezoidal_collocation(system, cfg.n_segments)
    else:
        problem = hermite_simpson_collocation(system, cfg.n_segments)
    return problem


def transcribe(system: ControlSystem, method: str, cfg: ShootingConfig,
               enforce_state_bounds: bool = False,
               scale: Optional[np.ndarray] = None) -> NlpProblem:
    problem = build_problem(system, method, cfg, enforce_state_bounds, scale)
    logger.info("Transcribed %s: %d decisions, %d constraints",
                problem.name, problem.n_decision, problem.n_constraints)
    return problem
