"""Data models for diffctl."""

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import (
    DEFAULT_ALPHA, DEFAULT_ETA, DEFAULT_MAX_ITERS, DEFAULT_TOL_CONSTRAINT, DEFAULT_TOL_GRAD,
    DIVERGENCE_CEILING, E2E_K_STEPS, E2E_RESET_PERIOD, SYSID_LEARNING_RATE, SYSID_MOMENTUM,
)


def _floats(x: Any) -> List:
    """JSON-friendly nested list of floats (NaN and inf become strings)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        v = float(arr)
        return v if np.isfinite(v) else str(v)
    return [_floats(row) for row in arr]


class IntegratorKind(Enum):
    """Fixed-step explicit integrators."""
    EULER = "euler"
    HEUN = "heun"
    MIDPOINT = "midpoint"
    RK4 = "rk4"

    @property
    def stages(self) -> int:
        """Dynamics evaluations per step."""
        return {"euler": 1, "heun": 2, "midpoint": 2, "rk4": 4}[self.value]

    @property
    def order(self) -> int:
        return {"euler": 1, "heun": 2, "midpoint": 2, "rk4": 4}[self.value]

    @property
    def label(self) -> str:
        return {
            "euler": "Euler",
            "heun": "Heun",
            "midpoint": "Midpoint",
            "rk4": "Runge-Kutta 4th Order",
        }[self.value]


class InterpolationScheme(Enum):
    """How control nodes are turned into a signal."""
    CONSTANT = "constant"
    LINEAR = "linear"


class SolverMethod(Enum):
    GDA = "gda"
    EXTRAGRADIENT = "extragradient"


class BoundMode(Enum):
    """How box bounds are enforced by the first-order solvers."""
    PROJECTION = "projection"
    REPARAMETRIZATION = "reparametrization"


class SamplingStrategy(Enum):
    """Control sampling strategies for dataset generation."""
    UNIFORM = "uniform-random"
    RANDOM_WALK = "gaussian-random-walk"
    AROUND_CANDIDATE = "around-candidate"


class ImitationTarget(Enum):
    """States compared against the expert by the end-to-end outer loss."""
    PLANNED = "planned"
    ROLLOUT = "rollout"


class RunStatus(Enum):
    CONVERGED = "converged"
    BUDGET_EXHAUSTED = "budget_exhausted"
    COMPLETED = "completed"
    FAILED = "failed"


# ============ Systems and trajectories ============

@dataclass(frozen=True)
class ControlSystem:
    """A continuous-time control problem.

    dynamics(x, u) returns the state derivative and cost(x, u, t) the running
    cost. Both must accept float arrays and object arrays of recorded values.
    NaN entries of x_final leave that component free at t_final; indices in
    free_start are chosen by the optimizer instead of being pinned to x_start.
    """
    name: str
    state_dim: int
    control_dim: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    cost: Callable[[np.ndarray, np.ndarray, float], Any]
    t_start: float
    t_final: float
    x_start: np.ndarray
    x_final: Optional[np.ndarray] = None
    terminal_cost: Optional[Callable[[np.ndarray], Any]] = None
    state_bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None
    control_bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None
    free_start: Tuple[int, ...] = ()
    params: Dict[str, Any] = field(default_factory=dict)
    description: str = ""

    @property
    def horizon(self) -> float:
        return self.t_final - self.t_start

    @property
    def has_fixed_final(self) -> bool:
        return self.x_final is not None and bool(np.any(np.isfinite(self.x_final)))

    @property
    def final_mask(self) -> np.ndarray:
        """Boolean mask of the pinned terminal components."""
        if self.x_final is None:
            return np.zeros(self.state_dim, dtype=bool)
        return np.isfinite(self.x_final)

    @property
    def fixed_start_mask(self) -> np.ndarray:
        mask = np.ones(self.state_dim, dtype=bool)
        mask[list(self.free_start)] = False
        return mask

    def control_box(self) -> Tuple[np.ndarray, np.ndarray]:
        """Control bounds with +-inf filled in when absent."""
        if self.control_bounds is None:
            return np.full(self.control_dim, -np.inf), np.full(self.control_dim, np.inf)
        return self.control_bounds

    def state_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.state_bounds is None:
            return np.full(self.state_dim, -np.inf), np.full(self.state_dim, np.inf)
        return self.state_bounds

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for the run manifest."""
        return {
            "name": self.name,
            "state_dim": self.state_dim,
            "control_dim": self.control_dim,
            "t_start": self.t_start,
            "t_final": self.t_final,
            "x_start": _floats(self.x_start),
            "x_final": _floats(self.x_final) if self.x_final is not None else None,
            "terminal_cost": self.terminal_cost is not None,
            "state_bounds": [_floats(b) for b in self.state_bounds] if self.state_bounds else None,
            "control_bounds": [_floats(b) for b in self.control_bounds] if self.control_bounds else None,
            "free_start": list(self.free_start),
            "params": dict(self.params),
        }


@dataclass
class ControlSpline:
    """Control nodes on a time grid plus the scheme used to interpolate them."""
    nodes: np.ndarray
    node_times: np.ndarray
    scheme: InterpolationScheme = InterpolationScheme.LINEAR

    def __post_init__(self):
        self.node_times = np.asarray(self.node_times, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[0] != self.node_times.size:
            raise ValueError("spline nodes must be a matrix with one row per node time")
        if np.any(np.diff(self.node_times) <= 0):
            raise ValueError("spline node times must be strictly increasing")


@dataclass
class Trajectory:
    """Time grid with states and controls sampled on it."""
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if self.states.shape[0] != n or self.controls.shape[0] != n:
            raise ValueError(
                f"trajectory rows disagree: {n} times, {self.states.shape[0]} states, "
                f"{self.controls.shape[0]} controls"
            )

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[1]

    def header(self) -> List[str]:
        return (["t"] + [f"x_{i}" for i in range(self.state_dim)]
                + [f"u_{j}" for j in range(self.control_dim)])

    def rows(self) -> List[List[float]]:
        """One row per time: t, states, controls."""
        return [
            [float(t)] + [float(v) for v in x] + [float(v) for v in u]
            for t, x, u in zip(self.times, self.states, self.controls)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "times": _floats(self.times),
            "states": _floats(self.states),
            "controls": _floats(self.controls),
        }


# ============ Transcription ============

@dataclass
class ShootingConfig:
    """Grid settings shared by the shooting transcriptions."""
    n_controls: int = 21
    n_intervals: int = 1
    steps_per_interval: int = 20
    integrator: IntegratorKind = IntegratorKind.RK4
    scheme: Optional[InterpolationScheme] = None

    def __post_init__(self):
        if self.n_controls < 2:
            raise ValueError("n_controls must be at least 2")
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be at least 1")
        if self.steps_per_interval < 1:
            raise ValueError("steps_per_interval must be at least 1")

    @property
    def n_segments(self) -> int:
        """Number of control segments N."""
        return self.n_controls - 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_controls": self.n_controls,
            "n_intervals": self.n_intervals,
            "steps_per_interval": self.steps_per_interval,
            "integrator": self.integrator.value,
            "scheme": self.scheme.value if self.scheme else None,
        }


@dataclass
class NlpProblem:
    """A finite nonlinear program with box bounds and equality constraints.

    unravel maps a decision vector to (state nodes, control nodes); the state
    matrix is empty (shape (0, D)) for methods without state decisions.
    trajectory(y) reconstructs a Trajectory for output; evaluate(y), when set,
    returns (f(y), h(y)) from a single integration pass. planned_states(y)
    gives the states a plan commits to: the integrated path for single
    shooting, the state decisions otherwise. state_scale, when set, divides
    the state decisions: the decision vector holds x / state_scale.
    """
    name: str
    n_decision: int
    objective: Callable[[np.ndarray], Any]
    eq_constraints: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    x0_guess: np.ndarray
    unravel: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]
    ravel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n_constraints: int = 0
    trajectory: Optional[Callable[[np.ndarray], Trajectory]] = None
    evaluate: Optional[Callable[[np.ndarray], Tuple[Any, np.ndarray]]] = None
    planned_states: Optional[Callable[[np.ndarray], np.ndarray]] = None
    state_scale: Optional[np.ndarray] = None

    def objective_and_constraints(self, y: np.ndarray) -> Tuple[Any, np.ndarray]:
        """f(y) and h(y), sharing one pass when the transcription provides it."""
        if self.evaluate is not None:
            return self.evaluate(y)
        return self.objective(y), self.eq_constraints(y)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.x0_guess = np.asarray(self.x0_guess, dtype=float)
        for name, arr in (("lower", self.lower), ("upper", self.upper), ("x0_guess", self.x0_guess)):
            if arr.shape != (self.n_decision,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({self.n_decision},)")
        if np.any(self.lower > self.upper):
            raise ValueError("decision bounds have lower > upper")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "n_decision": self.n_decision,
            "n_constraints": self.n_constraints,
        }


# ============ Solvers ============

@dataclass
class SolverConfig:
    """Settings for the first-order Lagrangian solvers."""
    eta_y: float = DEFAULT_ETA
    eta_lambda: float = DEFAULT_ETA
    max_iters: int = DEFAULT_MAX_ITERS
    tol_grad: float = DEFAULT_TOL_GRAD
    tol_constraint: float = DEFAULT_TOL_CONSTRAINT
    method: SolverMethod = SolverMethod.EXTRAGRADIENT
    bound_mode: BoundMode = BoundMode.PROJECTION
    alpha_schedule: List[float] = field(default_factory=lambda: [DEFAULT_ALPHA])
    eta_decay: float = 1.0
    penalty: float = 0.0
    divergence_ceiling: float = DIVERGENCE_CEILING

    def __post_init__(self):
        if self.eta_y < 0 or self.eta_lambda < 0:
            raise ValueError("step sizes must be non-negative")
        if self.tol_grad <= 0 or self.tol_constraint <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.alpha_schedule or any(a <= 0 for a in self.alpha_schedule):
            raise ValueError("alpha_schedule must be a non-empty list of positive temperatures")
        if not 0 < self.eta_decay <= 1:
            raise ValueError("eta_decay must lie in (0, 1]")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")

    def alpha_at(self, iteration: int) -> float:
        """Temperature used at an iteration; the schedule's last entry holds afterwards."""
        return self.alpha_schedule[min(iteration, len(self.alpha_schedule) - 1)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eta_y": self.eta_y,
            "eta_lambda": self.eta_lambda,
            "max_iters": self.max_iters,
            "tol_grad": self.tol_grad,
            "tol_constraint": self.tol_constraint,
            "method": self.method.value,
            "bound_mode": self.bound_mode.value,
            "alpha_schedule": list(self.alpha_schedule),
            "eta_decay": self.eta_decay,
            "penalty": self.penalty,
            "divergence_ceiling": self.divergence_ceiling,
        }


@dataclass
class SolverState:
    """Primal-dual iterate.

    Under reparametrization y is the unconstrained variable and alpha the
    temperature it was last mapped with.
    """
    y: np.ndarray
    lam: np.ndarray
    iteration: int = 0
    alpha: Optional[float] = None

    def copy(self) -> "SolverState":
        return SolverState(np.array(self.y, copy=True), np.array(self.lam, copy=True),
                           self.iteration, self.alpha)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.y, self.lam])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "y": _floats(self.y),
            "lambda": _floats(self.lam),
            "iteration": self.iteration,
            "alpha": self.alpha,
        }


@dataclass
class IterationRecord:
    """Solver diagnostics for one iteration, evaluated before the step."""
    iteration: int
    objective: float
    constraint_norm: float
    grad_norm: float

    def row(self) -> List[Any]:
        return [self.iteration, self.objective, self.constraint_norm, self.grad_norm]


@dataclass
class SolverDiagnostics:
    records: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    message: str = ""

    HEADER = ["iteration", "objective", "constraint_inf_norm", "grad_inf_norm"]

    def to_dict(self) -> Dict[str, Any]:
        last = self.records[-1] if self.records else None
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "final_objective": last.objective if last else None,
            "final_constraint_norm": last.constraint_norm if last else None,
            "final_grad_norm": last.grad_norm if last else None,
        }


# ============ Indirect method ============

@dataclass
class SweepState:
    """Forward-backward sweep iterate."""
    controls: np.ndarray
    states: np.ndarray
    adjoints: np.ndarray
    relaxation: float = 0.5


@dataclass
class SweepRecord:
    sweep: int
    control_change: float
    total_cost: float
    relaxation: float
    accepted: bool

    def row(self) -> List[Any]:
        return [self.sweep, self.control_change, self.total_cost, self.relaxation, int(self.accepted)]


@dataclass
class FbsmDiagnostics:
    records: List[SweepRecord] = field(default_factory=list)
    converged: bool = False
    sweeps: int = 0
    final_change: float = float("inf")
    hamiltonian_grad_norm: float = float("inf")
    adjoints: Optional[np.ndarray] = None

    HEADER = ["sweep", "control_change", "total_cost", "relaxation", "accepted"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "converged": self.converged,
            "sweeps": self.sweeps,
            "final_change": self.final_change,
            "hamiltonian_grad_norm": self.hamiltonian_grad_norm,
        }


# ============ System identification ============

@dataclass
class MlpParams:
    """Weights and biases of a feed-forward tanh network.

    Each layer maps its input z to W @ z + b; hidden layers apply tanh.
    Entries may be floats or recorded values.
    """
    layers: List[Tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for (w, b), (w_next, _) in zip(self.layers, self.layers[1:]):
            if w_next.shape[1] != w.shape[0]:
                raise ValueError("consecutive layer widths do not chain")
        for w, b in self.layers:
            if b.shape != (w.shape[0],):
                raise ValueError("bias length must equal the layer's output width")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        """Layer by layer, weights row-major then bias."""
        parts = []
        for w, b in self.layers:
            parts.append(np.asarray(w).ravel())
            parts.append(np.asarray(b).ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, flat: np.ndarray, sizes: List[int], activation: str = "tanh") -> "MlpParams":
        """Inverse of flatten for a given width list."""
        expected = sum(n_out * n_in + n_out for n_in, n_out in zip(sizes, sizes[1:]))
        if len(flat) != expected:
            raise ValueError(f"expected {expected} parameters for widths {sizes}, got {len(flat)}")
        layers = []
        offset = 0
        for n_in, n_out in zip(sizes, sizes[1:]):
            w = flat[offset:offset + n_out * n_in].reshape(n_out, n_in)
            offset += n_out * n_in
            b = flat[offset:offset + n_out]
            offset += n_out
            layers.append((w, b))
        return cls(layers, activation)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "activation": self.activation,
            "sizes": self.sizes,
            "layers": [{"weight": _floats(w), "bias": _floats(b)} for w, b in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MlpParams":
        layers = [
            (np.array(layer["weight"], dtype=float), np.array(layer["bias"], dtype=float))
            for layer in data["layers"]
        ]
        return cls(layers, data.get("activation", "tanh"))


@dataclass
class SysIdDataset:
    """Observed episodes sharing one time grid."""
    episodes: List[Tuple[np.ndarray, np.ndarray]]
    grid: np.ndarray
    noise_sigma: float
    strategy: SamplingStrategy = SamplingStrategy.UNIFORM
    seed: Optional[int] = None
    system: str = ""

    def __post_init__(self):
        for controls, states in self.episodes:
            if controls.shape[0] != len(self.grid) or states.shape[0] != len(self.grid):
                raise ValueError("every episode must have one row per grid time")

    def __len__(self) -> int:
        return len(self.episodes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "system": self.system,
            "strategy": self.strategy.value,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "n_episodes": len(self.episodes),
            "grid": _floats(self.grid),
        }


@dataclass
class VectorFieldReport:
    """True and learned dynamics on a state-control grid."""
    states: np.ndarray
    controls: np.ndarray
    true: np.ndarray
    learned: np.ndarray

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.true - self.learned)

    @property
    def mean_abs_error(self) -> float:
        return float(np.mean(self.abs_error)) if self.abs_error.size else 0.0

    def header(self) -> List[str]:
        D, M = self.states.shape[1], self.controls.shape[1]
        return ([f"x_{i}" for i in range(D)] + [f"u_{j}" for j in range(M)]
                + [f"true_{i}" for i in range(D)] + [f"learned_{i}" for i in range(D)]
                + [f"abs_error_{i}" for i in range(D)])

    def rows(self) -> List[List[float]]:
        table = np.hstack([self.states, self.controls, self.true, self.learned, self.abs_error])
        return [[float(v) for v in row] for row in table]


@dataclass
class TrainConfig:
    """Minibatch momentum gradient descent settings."""
    learning_rate: float = SYSID_LEARNING_RATE
    momentum: float = SYSID_MOMENTUM
    train_steps: int = 500
    batch_size: int = 8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.train_steps < 0 or self.batch_size < 1:
            raise ValueError("train_steps must be non-negative and batch_size positive")


@dataclass
class TrainRecord:
    step: int
    loss: float
    failed_episodes: int = 0

    def row(self) -> List[Any]:
        return [self.step, self.loss, self.failed_episodes]


# ============ End-to-end ============

@dataclass
class E2eConfig:
    """Outer-loop settings for end-to-end training."""
    k_steps: int = E2E_K_STEPS
    reset_period: int = E2E_RESET_PERIOD
    outer_learning_rate: float = 1e-2
    outer_momentum: float = 0.0
    budget: int = 200
    target: ImitationTarget = ImitationTarget.PLANNED

    def __post_init__(self):
        if self.k_steps < 1:
            raise ValueError("k_steps must be at least 1")
        if self.reset_period < 1:
            raise ValueError("reset_period must be at least 1")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")


@dataclass
class E2eState:
    """Outer-loop state: flat parameters plus the carried inner iterate."""
    theta: np.ndarray
    warm: SolverState
    outer_iteration: int = 0
    reset_period: int = E2E_RESET_PERIOD


@dataclass
class E2eRecord:
    """One outer iteration of end-to-end training."""
    outer_iteration: int
    loss: float
    grad_norm: float
    controls: Optional[np.ndarray]
    reset: bool = False
    diverged: bool = False

    def row(self) -> List[Any]:
        return [self.outer_iteration, self.loss, self.grad_norm, int(self.reset), int(self.diverged)]


# ============ Runs ============

@dataclass
class RunManifest:
    """Record of one experiment run."""
    experiment: str
    config: Dict[str, Any]
    status: RunStatus = RunStatus.COMPLETED
    started_at: datetime = field(default_factory=datetime.utcnow)
    duration_seconds: float = 0.0
    files: List[str] = field(default_factory=list)
    checksums: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for storage."""
        return {
            "experiment": self.experiment,
            "config": self.config,
            "status": self.status.value,
            "started_at": self.started_at.isoformat(),
            "duration_seconds": self.duration_seconds,
            "files": list(self.files),
            "checksums": dict(self.checksums),
            "summary": self.summary,
        }
