"""System identification with neural ODE dynamics models.

A feed-forward tanh network maps [x, u] to an estimate of dx/dt. It is
trained by rolling it out with RK4 along observed control sequences and
minimizing the mean squared error against the observed states, with
gradients taken through the unrolled integrator.
"""

import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import adcore as ad
from .config import SYSID_HIDDEN, SYSID_WALK_SIGMA
from .errors import DomainError, IntegrationBlowupError, NonFiniteError
from .integrate import rollout, step, uniform_spline
from .models import (
    ControlSpline, ControlSystem, IntegratorKind, InterpolationScheme, MlpParams, SamplingStrategy,
    SysIdDataset, TrainConfig, TrainRecord, VectorFieldReport,
)

logger = logging.getLogger(__name__)


def network_sizes(state_dim: int, control_dim: int, hidden: Sequence[int] = SYSID_HIDDEN) -> List[int]:
    return [state_dim + control_dim] + list(hidden) + [state_dim]


def init_mlp(sizes: Sequence[int], seed: int) -> MlpParams:
    """Glorot-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(sizes, sizes[1:]):
        std = np.sqrt(2.0 / (n_in + n_out))
        layers.append((rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out)))
    return MlpParams(layers)


def neural_dynamics(params: MlpParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Network estimate of dx/dt at (x, u); tanh on hidden layers, identity on the output."""
    z = np.concatenate([np.asarray(x), np.asarray(u)])
    if z.shape[0] != params.in_dim:
        raise ValueError(f"network expects {params.in_dim} inputs, got {z.shape[0]}")
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = w @ z + b
        if i < last:
            z = ad.tanh(z)
    return z


def predict_trajectory(params: MlpParams, x0: np.ndarray, controls: np.ndarray, grid: np.ndarray,
                       kind: IntegratorKind = IntegratorKind.RK4,
                       scheme: InterpolationScheme = InterpolationScheme.LINEAR) -> np.ndarray:
    """
    Roll out the learned dynamics along a control sequence.

    Returns:
        States on the grid, one row per grid time; row 0 is x0
    """
    grid = np.asarray(grid, dtype=float)
    controls = np.asarray(controls)
    if controls.shape[0] != len(grid):
        raise ValueError("controls need one row per grid time")
    spline = ControlSpline(controls, grid, scheme)

    def f(x, u, t):
        return neural_dynamics(params, x, u)

    states = [np.asarray(x0)]
    x = states[0]
    for i in range(len(grid) - 1):
        x = step(kind, f, x, spline, grid[i], grid[i + 1] - grid[i])
        states.append(x)
    return np.stack(states)


def mse_loss(predicted: np.ndarray, observed: np.ndarray) -> object:
    """
    Sum of squared differences over every row, divided by N * D.

    N counts time steps (rows - 1) and D the state dimension.
    """
    predicted = np.asarray(predicted)
    observed = np.asarray(observed)
    if predicted.shape != observed.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {observed.shape}")
    if predicted.ndim != 2 or predicted.shape[0] < 2:
        raise ValueError("trajectories need at least two rows")
    n_steps, dim = predicted.shape[0] - 1, predicted.shape[1]
    diff = predicted - observed
    return np.sum(diff * diff) / (n_steps * dim)


# ============ Datasets ============

def _sample_controls(system: ControlSystem, strategy: SamplingStrategy, n_nodes: int,
                     rng: np.random.Generator, walk_sigma: float,
                     candidate: Optional[np.ndarray]) -> np.ndarray:
    lower, upper = system.control_box()
    M = system.control_dim
    if strategy == SamplingStrategy.UNIFORM:
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError(f"{system.name}: uniform sampling needs finite control bounds")
        return rng.uniform(lower, upper, size=(n_nodes, M))
    if strategy == SamplingStrategy.RANDOM_WALK:
        start = np.where(np.isfinite(lower) & np.isfinite(upper), 0.5 * (lower + upper), 0.0)
        controls = np.empty((n_nodes, M))
        controls[0] = np.clip(start, lower, upper)
        for i in range(1, n_nodes):
            controls[i] = np.clip(controls[i - 1] + rng.normal(0.0, walk_sigma, size=M), lower, upper)
        return controls
    if candidate is None:
        raise ValueError("around-candidate sampling needs a candidate control trajectory")
    candidate = np.asarray(candidate, dtype=float).reshape(n_nodes, M)
    return np.clip(candidate + rng.normal(0.0, walk_sigma, size=(n_nodes, M)), lower, upper)


def generate_dataset(system: ControlSystem, strategy: SamplingStrategy, n_episodes: int, n_steps: int,
                     noise_sigma: float, seed: int, walk_sigma: float = SYSID_WALK_SIGMA,
                     candidate: Optional[np.ndarray] = None) -> SysIdDataset:
    """
    Sample control sequences and record noisy RK4 rollouts of the true dynamics.

    Observation noise is i.i.d. N(0, noise_sigma^2) on every row except the
    first, which is the exact start state. The result depends only on the
    arguments.
    """
    if n_episodes < 1 or n_steps < 1:
        raise ValueError("n_episodes and n_steps must be positive")
    rng = np.random.default_rng(seed)
    grid = np.linspace(system.t_start, system.t_final, n_steps + 1)
    episodes = []
    for _ in range(n_episodes):
        controls = _sample_controls(system, strategy, n_steps + 1, rng, walk_sigma, candidate)
        spline = uniform_spline(controls, system.t_start, system.t_final, InterpolationScheme.LINEAR)
        traj, _ = rollout(IntegratorKind.RK4, system, spline, n_steps)
        states = np.array(traj.states, dtype=float)
        if noise_sigma > 0:
            states[1:] += rng.normal(0.0, noise_sigma, size=states[1:].shape)
        episodes.append((controls, states))
    logger.info("Generated %d %s episodes on %s", n_episodes, strategy.value, system.name)
    return SysIdDataset(episodes, grid, noise_sigma, strategy, seed, system.name)


def window_episodes(dataset: SysIdDataset, length: int) -> SysIdDataset:
    """
    Cut every episode into consecutive windows of `length` steps.

    Each window starts from its observed state and shares the first
    length + 1 grid times; the learned dynamics are time invariant, so
    only the step sizes matter. Trailing steps that do not fill a window
    are dropped.
    """
    n_steps = len(dataset.grid) - 1
    if not 1 <= length <= n_steps:
        raise ValueError(f"window length must lie in [1, {n_steps}], got {length}")
    windows = []
    for controls, states in dataset.episodes:
        for k in range(0, n_steps - length + 1, length):
            windows.append((controls[k:k + length + 1], states[k:k + length + 1]))
    return SysIdDataset(windows, dataset.grid[:length + 1], dataset.noise_sigma, dataset.strategy,
                        dataset.seed, dataset.system)


# ============ Training ============

def episode_loss_and_grad(theta: np.ndarray, sizes: Sequence[int], controls: np.ndarray,
                          observed: np.ndarray, grid: np.ndarray) -> Tuple[float, np.ndarray]:
    """Trajectory-matching loss of one episode and its gradient in the flat parameters."""
    tape = ad.Tape()
    theta_vars = tape.variables(theta)
    params = MlpParams.unflatten(theta_vars, list(sizes))
    predicted = predict_trajectory(params, observed[0], controls, grid)
    loss = mse_loss(predicted, observed)
    grad = ad.gradient(tape, loss if ad.is_var(loss) else None, list(theta_vars))
    return float(ad.value_of(loss)), grad


def train_sysid(system: ControlSystem, dataset: SysIdDataset, hidden: Sequence[int] = SYSID_HIDDEN,
                train_cfg: Optional[TrainConfig] = None, seed: int = 0,
                init: Optional[MlpParams] = None) -> Tuple[MlpParams, List[TrainRecord]]:
    """
    Fit a neural ODE to a dataset with minibatch momentum gradient descent.

    Args:
        system: Supplies state and control dimensions
        dataset: Observed episodes
        hidden: Hidden-layer widths (ignored when init is given)
        train_cfg: Optimizer settings
        seed: Seeds initialization and minibatch sampling
        init: Starting parameters

    Returns:
        (parameters with the lowest recorded training loss, per-step history)
    """
    if len(dataset) == 0:
        raise ValueError("dataset has no episodes")
    cfg = train_cfg or TrainConfig()
    params = init if init is not None else init_mlp(network_sizes(system.state_dim, system.control_dim, hidden), seed)
    sizes = params.sizes
    theta = np.asarray(params.flatten(), dtype=float)
    velocity = np.zeros_like(theta)
    rng = np.random.default_rng(seed)
    batch = min(cfg.batch_size, len(dataset))

    best_theta, best_loss = theta.copy(), np.inf
    history: List[TrainRecord] = []
    for step_index in range(cfg.train_steps):
        if batch == len(dataset):
            picks = range(len(dataset))
        else:
            picks = sorted(rng.choice(len(dataset), size=batch, replace=False))

        losses, grads, failed = [], [], 0
        for k in picks:
            controls, observed = dataset.episodes[k]
            try:
                loss, grad = episode_loss_and_grad(theta, sizes, controls, observed, dataset.grid)
            except (IntegrationBlowupError, NonFiniteError, DomainError) as e:
                failed += 1
                logger.warning("step %d: dropped episode %d (%s)", step_index, k, e)
                continue
            losses.append(loss)
            grads.append(grad)

        if not losses:
            history.append(TrainRecord(step_index, float("inf"), failed))
            continue
        mean_loss = float(np.mean(losses))
        history.append(TrainRecord(step_index, mean_loss, failed))
        if mean_loss < best_loss:
            best_loss, best_theta = mean_loss, theta.copy()

        velocity = cfg.momentum * velocity - cfg.learning_rate * np.mean(grads, axis=0)
        theta = theta + velocity
        if step_index % 50 == 0:
            logger.debug("sysid step %d: loss=%.6g", step_index, mean_loss)

    if history:
        logger.info("SysID on %s: loss %.6g -> best %.6g over %d steps",
                    system.name, history[0].loss, best_loss, len(history))
    return MlpParams.unflatten(best_theta, sizes, params.activation), history


def vector_field_report(params: MlpParams, system: ControlSystem, states: np.ndarray,
                        controls: np.ndarray) -> VectorFieldReport:
    """
    True and learned derivatives on the Cartesian product of states and control levels.

    Args:
        states: State grid, one state per row
        controls: Control levels, one control vector per row
    """
    states = np.asarray(states, dtype=float).reshape(-1, system.state_dim)
    if system.control_dim == 0:
        controls = np.zeros((1, 0))
    else:
        controls = np.asarray(controls, dtype=float).reshape(-1, system.control_dim)
    xs, us, true, learned = [], [], [], []
    for x in states:
        for u in controls:
            xs.append(x)
            us.append(u)
            true.append(np.asarray(system.dynamics(x, u), dtype=float))
            learned.append(np.asarray(ad.value_of(neural_dynamics(params, x, u)), dtype=float))
    return VectorFieldReport(np.array(xs), np.array(us), np.array(true), np.array(learned))


def field_grid(dataset: SysIdDataset, system: ControlSystem, points: int,
               levels: int) -> Tuple[np.ndarray, np.ndarray]:
    """States on a product grid spanning the observed range, controls on evenly spaced levels."""
    observed = np.vstack([states for _, states in dataset.episodes])
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(observed.min(axis=0), observed.max(axis=0))]
    states = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, system.state_dim)

    if system.control_dim == 0:
        return states, np.zeros((1, 0))
    applied = np.vstack([controls for controls, _ in dataset.episodes])
    lower, upper = system.control_box()
    lower = np.where(np.isfinite(lower), lower, applied.min(axis=0))
    upper = np.where(np.isfinite(upper), upper, applied.max(axis=0))
    if levels == 1:
        return states, (0.5 * (lower + upper)).reshape(1, -1)
    columns = [np.linspace(lo, hi, levels) for lo, hi in zip(lower, upper)]
    return states, np.array(list(itertools.product(*columns)), dtype=float)
