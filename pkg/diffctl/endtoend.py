"""End-to-end training of a neural dynamics model through an unrolled planner.

The planner is a transcribed NLP whose dynamics are a network with flat
parameters theta. A few extragradient steps of the inner solve are
recorded on one tape together with theta, so the planned states (and the
imitation loss against an expert plan) are differentiable in theta. The
implicit-function-theorem sensitivity is provided as a comparison path.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import adcore as ad
from .config import IFT_CONDITION_LIMIT, IFT_STATIONARITY_TOL
from .errors import DivergenceError, DomainError, IntegrationBlowupError, NonFiniteError, SingularSystemError, StationarityError
from .integrate import default_scheme, rollout, uniform_spline
from .models import (
    ControlSystem, E2eConfig, E2eRecord, E2eState, ImitationTarget, IntegratorKind, InterpolationScheme, MlpParams,
    NlpProblem, ShootingConfig, SolverConfig, SolverState, Trajectory,
)
from .solve import bounded, enforce_bounds, initial_state, primal, solve_nlp
from .sysid import init_mlp, mse_loss, neural_dynamics
from .transcribe import build_problem

logger = logging.getLogger(__name__)

_INNER_FAILURES = (DivergenceError, IntegrationBlowupError, NonFiniteError, DomainError)


def _identity_unravel(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.zeros((0, 0)), np.asarray(y).reshape(-1, 1)


def _identity_ravel(states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    return np.asarray(controls).ravel()


@dataclass
class ParametrizedNlp:
    """An NLP family indexed by flat parameters theta.

    evaluate(y, theta) returns (f(y, theta), h(y, theta)) and must accept
    recorded values in both arguments. planned_states(y, theta) gives the
    states a plan commits to; it defaults to y itself.
    rollout_states(y) integrates the plan's controls through the true
    dynamics onto the same rows; it exists only for transcribed systems.
    """
    name: str
    n_decision: int
    n_theta: int
    n_constraints: int
    evaluate: Callable[[np.ndarray, np.ndarray], Tuple[Any, np.ndarray]]
    lower: np.ndarray
    upper: np.ndarray
    x0_guess: np.ndarray
    unravel: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]] = _identity_unravel
    ravel: Callable[[np.ndarray, np.ndarray], np.ndarray] = _identity_ravel
    planned_states: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    rollout_states: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.x0_guess = np.asarray(self.x0_guess, dtype=float)

    def states_of(self, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if self.planned_states is None:
            return np.asarray(y).reshape(-1, 1)
        return self.planned_states(y, theta)

    def fix(self, theta: np.ndarray) -> NlpProblem:
        """The ordinary NLP at one parameter value."""
        def evaluate(y):
            return self.evaluate(y, theta)

        return NlpProblem(
            name=self.name,
            n_decision=self.n_decision,
            objective=lambda y: evaluate(y)[0],
            eq_constraints=lambda y: evaluate(y)[1],
            lower=self.lower, upper=self.upper, x0_guess=self.x0_guess,
            unravel=self.unravel, ravel=self.ravel,
            n_constraints=self.n_constraints,
            evaluate=evaluate,
            planned_states=lambda y: self.states_of(y, theta),
        )

    @classmethod
    def from_transcription(cls, system: ControlSystem, method: str, cfg: ShootingConfig,
                           sizes: Sequence[int], activation: str = "tanh") -> "ParametrizedNlp":
        """
        Transcribe a system whose dynamics are replaced by a network.

        Bounds, guess and layout come from the true system's transcription;
        only the dynamics depend on theta.
        """
        sizes = list(sizes)
        if sizes[0] != system.state_dim + system.control_dim or sizes[-1] != system.state_dim:
            raise ValueError(
                f"network widths {sizes} do not fit {system.name} "
                f"(D={system.state_dim}, M={system.control_dim})"
            )
        template = build_problem(system, method, cfg)
        n_theta = sum(n_out * n_in + n_out for n_in, n_out in zip(sizes, sizes[1:]))

        def planner(theta):
            params = MlpParams.unflatten(np.asarray(theta), sizes, activation)
            model = replace(system, dynamics=lambda x, u: neural_dynamics(params, x, u))
            return build_problem(model, method, cfg, scale=template.state_scale)

        return cls(
            name=f"{template.name}:neural",
            n_decision=template.n_decision,
            n_theta=n_theta,
            n_constraints=template.n_constraints,
            evaluate=lambda y, theta: planner(theta).objective_and_constraints(y),
            lower=template.lower, upper=template.upper, x0_guess=template.x0_guess,
            unravel=template.unravel, ravel=template.ravel,
            planned_states=lambda y, theta: planner(theta).planned_states(y),
            rollout_states=_true_rollout(system, cfg, template),
        )


def _true_rollout(system: ControlSystem, cfg: ShootingConfig,
                  template: NlpProblem) -> Callable[[np.ndarray], np.ndarray]:
    """Roll a plan's controls out on the true system, sampled on the planned-state rows."""
    rows = np.asarray(template.planned_states(template.x0_guess)).shape[0]
    per_row = max(1, (cfg.n_intervals * cfg.steps_per_interval) // (rows - 1))
    scheme = cfg.scheme or default_scheme(cfg.integrator)

    def states(y):
        start, controls = template.unravel(y)
        spline = uniform_spline(controls, system.t_start, system.t_final, scheme)
        traj, _ = rollout(cfg.integrator, system, spline, (rows - 1) * per_row, start[0] if len(start) else None)
        return traj.states[::per_row]

    return states


def cold_start(p: ParametrizedNlp, cfg: SolverConfig) -> SolverState:
    """The inner solver's initializer; it does not depend on theta."""
    fixed = NlpProblem(
        name=p.name, n_decision=p.n_decision,
        objective=lambda y: 0.0, eq_constraints=lambda y: np.zeros(p.n_constraints),
        lower=p.lower, upper=p.upper, x0_guess=p.x0_guess,
        unravel=p.unravel, ravel=p.ravel, n_constraints=p.n_constraints,
    )
    return initial_state(fixed, cfg)


# ============ Unrolled inner solve ============

def _fresh(tape: ad.Tape, values: np.ndarray) -> np.ndarray:
    """One new node per entry so every entry can be differentiated against separately."""
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        out[i] = ad.add(v, 0.0) if ad.is_var(v) else tape.variable(float(v), track=False)
    return out


def _lagrangian_grad(p: ParametrizedNlp, tape: ad.Tape, ys: np.ndarray, lams: np.ndarray,
                     theta_vars: np.ndarray, cfg: SolverConfig, alpha: Optional[float]):
    """Recorded primal gradient of the (augmented) Lagrangian and the residual at (ys, lams)."""
    f, h = p.evaluate(bounded(p, ys, alpha), theta_vars)
    h = np.asarray(h, dtype=object).reshape(-1) if np.asarray(h).size else np.zeros(0, dtype=object)
    if h.size != len(lams):
        raise ValueError(f"{len(lams)} multipliers for {h.size} constraints")
    total = f
    for lam_i, h_i in zip(lams, h):
        total = total + lam_i * h_i
        if cfg.penalty > 0.0:
            total = total + (0.5 * cfg.penalty) * h_i * h_i
    grad = ad.gradient_graph(tape, total, list(ys))
    return np.array(grad, dtype=object), h


def _check_size(ys: np.ndarray, lams: np.ndarray, iteration: int, cfg: SolverConfig):
    values = np.concatenate([ad.value_of(ys).ravel(), ad.value_of(lams).ravel()])
    size = float(np.max(np.abs(values), initial=0.0))
    if not np.isfinite(size) or size > cfg.divergence_ceiling:
        raise DivergenceError(iteration, f"unrolled iterate norm {size:.3e} exceeded {cfg.divergence_ceiling:.1e}")


def _unroll(p: ParametrizedNlp, tape: ad.Tape, theta_vars: np.ndarray, warm: SolverState,
            k_steps: int, cfg: SolverConfig) -> Tuple[np.ndarray, np.ndarray, int]:
    """k recorded extragradient steps from warm; returns the final (y, lambda) node arrays."""
    ys = _fresh(tape, warm.y)
    lams = _fresh(tape, warm.lam)
    iteration = warm.iteration
    for _ in range(k_steps):
        eta_y = cfg.eta_y * cfg.eta_decay ** iteration
        eta_lam = cfg.eta_lambda * cfg.eta_decay ** iteration
        gy, h = _lagrangian_grad(p, tape, ys, lams, theta_vars, cfg, warm.alpha)
        y_look = _fresh(tape, enforce_bounds(p, ys - eta_y * gy, cfg))
        lam_look = _fresh(tape, lams + eta_lam * h)
        gy_look, h_look = _lagrangian_grad(p, tape, y_look, lam_look, theta_vars, cfg, warm.alpha)
        ys = _fresh(tape, enforce_bounds(p, ys - eta_y * gy_look, cfg))
        lams = _fresh(tape, lams + eta_lam * h_look)
        iteration += 1
        _check_size(ys, lams, iteration, cfg)
    return ys, lams, iteration


def inner_solve_unrolled(p: ParametrizedNlp, theta: np.ndarray, warm: SolverState, k_steps: int,
                         cfg: SolverConfig) -> Tuple[SolverState, np.ndarray]:
    """
    Run k extragradient steps on L(theta, .) from warm and differentiate the result in theta.

    Args:
        p: Parametrized problem
        theta: Flat parameters
        warm: Starting iterate
        k_steps: Number of recorded steps (at least 1)
        cfg: Step sizes, penalty and bound handling

    Returns:
        (final state, matrix dz/dtheta with one row per entry of z = [y, lambda])

    Raises:
        DivergenceError: an unrolled iterate exceeded cfg.divergence_ceiling
    """
    if k_steps < 1:
        raise ValueError("k_steps must be at least 1")
    tape = ad.Tape()
    theta_vars = tape.variables(np.asarray(theta, dtype=float))
    ys, lams, iteration = _unroll(p, tape, theta_vars, warm, k_steps, cfg)
    z = list(ys) + list(lams)
    sensitivity = np.array([ad.gradient(tape, zi, list(theta_vars)) for zi in z]).reshape(len(z), len(theta_vars))
    state = SolverState(ad.value_of(ys), ad.value_of(lams), iteration, warm.alpha)
    return state, sensitivity


# ============ Implicit differentiation ============

def ift_gradient(p: ParametrizedNlp, theta: np.ndarray, z_star: SolverState,
                 stationarity_tol: float = IFT_STATIONARITY_TOL) -> np.ndarray:
    """
    Solution sensitivity dz/dtheta from the implicit function theorem.

    Solves H_zz S = -H_ztheta where H is the Hessian of the Lagrangian in
    w = [y, lambda, theta]. Only meaningful at an interior stationary point.

    The rows for y are sensitivities of the decision values themselves. With
    reparametrized bounds inner_solve_unrolled differentiates the stored
    unbounded variables instead; the two agree on y only under projection.

    Raises:
        StationarityError: the max-norm of [grad_y L, h] exceeds stationarity_tol
        SingularSystemError: H_zz is singular or too ill-conditioned to solve
    """
    y = np.asarray(primal(p, z_star), dtype=float)
    lam = np.asarray(z_star.lam, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n_y, n_lam = len(y), len(lam)
    n_z = n_y + n_lam

    def lagrangian(w):
        f, h = p.evaluate(w[:n_y], w[n_z:])
        total = f
        for lam_i, h_i in zip(w[n_y:n_z], np.asarray(h, dtype=object).reshape(-1)):
            total = total + lam_i * h_i
        return total

    w0 = np.concatenate([y, lam, theta])
    _, grad = ad.value_and_grad(lagrangian, w0)
    residual = float(np.max(np.abs(grad[:n_z]), initial=0.0))
    if residual > stationarity_tol:
        raise StationarityError(residual, stationarity_tol)

    hess = ad.hessian(lagrangian, w0)
    h_zz = hess[:n_z, :n_z]
    h_ztheta = hess[:n_z, n_z:]
    try:
        cond = np.linalg.cond(h_zz)
        if not np.isfinite(cond) or cond > IFT_CONDITION_LIMIT:
            raise SingularSystemError(f"Hessian block has condition number {cond:.3e}")
        return np.linalg.solve(h_zz, -h_ztheta)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"Hessian block is singular: {e}") from e


# ============ Outer loop ============

def outer_loss_and_grad(p: ParametrizedNlp, theta: np.ndarray, warm: SolverState, k_steps: int,
                        cfg: SolverConfig, expert_states: np.ndarray,
                        target: ImitationTarget = ImitationTarget.PLANNED):
    """
    Imitation loss of the unrolled plan and its gradient in theta.

    One reverse pass covers dL/dz dz/dtheta plus any direct dependence of
    the planned states on theta (the predicted rollout of single shooting).
    With the rollout target the plan is instead judged by the states its
    controls reach on the true system.

    Returns:
        (loss, gradient, new warm state, decision vector)
    """
    tape = ad.Tape()
    theta_vars = tape.variables(np.asarray(theta, dtype=float))
    ys, lams, iteration = _unroll(p, tape, theta_vars, warm, k_steps, cfg)
    decision = bounded(p, ys, warm.alpha)
    if target == ImitationTarget.ROLLOUT:
        if p.rollout_states is None:
            raise ValueError(f"{p.name} has no true system to roll plans out on")
        states = p.rollout_states(decision)
    else:
        states = p.states_of(decision, theta_vars)
    loss = mse_loss(states, expert_states)
    grad = ad.gradient(tape, loss, list(theta_vars))
    state = SolverState(ad.value_of(ys), ad.value_of(lams), iteration, warm.alpha)
    return float(ad.value_of(loss)), grad, state, np.asarray(ad.value_of(decision), dtype=float)


def expert_plan(system: ControlSystem, method: str, cfg: ShootingConfig,
                solver_cfg: SolverConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Plan on the true dynamics; returns (planned states, controls)."""
    truth = build_problem(system, method, cfg)
    state, diagnostics = solve_nlp(truth, solver_cfg)
    if not diagnostics.converged:
        logger.warning("expert plan on %s did not converge: %s", system.name, diagnostics.message)
    y = np.asarray(primal(truth, state), dtype=float)
    states = np.asarray(ad.value_of(truth.planned_states(y)), dtype=float)
    return states, np.asarray(truth.unravel(y)[1], dtype=float)


def e2e_train(system: ControlSystem, method: str, cfg: ShootingConfig, sizes: Sequence[int],
              e2e_cfg: Optional[E2eConfig] = None, solver_cfg: Optional[SolverConfig] = None,
              seed: int = 0, expert_states: Optional[np.ndarray] = None,
              init: Optional[MlpParams] = None) -> Tuple[MlpParams, np.ndarray, List[E2eRecord]]:
    """
    Train a dynamics network so that its unrolled plan imitates an expert.

    Each outer iteration takes k recorded inner steps from the warm iterate,
    backpropagates the imitation loss into theta and applies a momentum
    update. The warm iterate is reset to the cold initializer every
    reset_period outer iterations and after any inner failure.

    Args:
        system: True system; it supplies the expert plan unless expert_states is given
        method: Direct transcription name
        cfg: Transcription grid
        sizes: Network widths, input D + M and output D
        e2e_cfg: Outer-loop settings
        solver_cfg: Inner step sizes
        seed: Seeds network initialization
        expert_states: States to imitate, in the planner's planned-state layout
        init: Starting network

    Returns:
        (network with the lowest outer loss, its planned controls, history)
    """
    e2e_cfg = e2e_cfg or E2eConfig()
    solver_cfg = solver_cfg or SolverConfig()
    model = ParametrizedNlp.from_transcription(system, method, cfg, sizes)
    if expert_states is None:
        expert_states, _ = expert_plan(system, method, cfg, solver_cfg)

    params = init if init is not None else init_mlp(sizes, seed)
    cold = cold_start(model, solver_cfg)
    state = E2eState(np.asarray(params.flatten(), dtype=float), cold.copy(), 0, e2e_cfg.reset_period)
    velocity = np.zeros_like(state.theta)

    best_theta, best_loss, best_controls = state.theta.copy(), np.inf, None
    history: List[E2eRecord] = []
    failures = 0
    for index in range(e2e_cfg.budget):
        state.outer_iteration = index
        reset = index % state.reset_period == 0
        if reset:
            state.warm = cold.copy()
        try:
            loss, grad, warm, decision = outer_loss_and_grad(
                model, state.theta, state.warm, e2e_cfg.k_steps, solver_cfg, expert_states, e2e_cfg.target)
        except _INNER_FAILURES as e:
            failures += 1
            logger.warning("outer iteration %d: inner solve failed (%s); resetting warm start", index, e)
            history.append(E2eRecord(index, float("inf"), float("inf"), None, reset, True))
            state.warm = cold.copy()
            continue

        controls = np.asarray(model.unravel(decision)[1], dtype=float)
        history.append(E2eRecord(index, loss, float(np.max(np.abs(grad), initial=0.0)), controls, reset))
        if loss < best_loss:
            best_loss, best_theta, best_controls = loss, state.theta.copy(), controls

        velocity = e2e_cfg.outer_momentum * velocity - e2e_cfg.outer_learning_rate * grad
        state.theta = state.theta + velocity
        state.warm = warm
        if index % 25 == 0:
            logger.debug("outer iteration %d: loss=%.6g", index, loss)

    if best_controls is None:
        raise DivergenceError(e2e_cfg.budget, f"every one of {e2e_cfg.budget} outer iterations failed")
    logger.info("E2E on %s: loss %.6g -> best %.6g (%d inner failures)",
                system.name, next(r.loss for r in history if not r.diverged), best_loss, failures)
    return MlpParams.unflatten(best_theta, list(sizes), params.activation), best_controls, history


def snapshot_controls(history: Sequence[E2eRecord], stride: int, system: ControlSystem, n_steps: int,
                      kind: IntegratorKind = IntegratorKind.RK4,
                      scheme: Optional[InterpolationScheme] = None) -> List[Tuple[int, np.ndarray, Trajectory]]:
    """
    Every stride-th plan counted back from the last one, rolled out on the true system.

    Failed outer iterations have no plan and are skipped.

    Returns:
        [(outer_iteration, controls, trajectory)] in increasing iteration order
    """
    if stride < 1:
        raise ValueError("stride must be at least 1")
    planned = [r for r in history if r.controls is not None]
    picks = sorted(range(len(planned) - 1, -1, -stride))
    scheme = scheme or default_scheme(kind)
    snapshots = []
    for i in picks:
        record = planned[i]
        spline = uniform_spline(record.controls, system.t_start, system.t_final, scheme)
        traj, _ = rollout(kind, system, spline, n_steps)
        snapshots.append((record.outer_iteration, record.controls, traj))
    return snapshots
