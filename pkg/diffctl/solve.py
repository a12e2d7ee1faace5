"""First-order Lagrangian solvers for transcribed problems.

Both methods play the min-max game min_y max_lambda f(y) + lambda . h(y):
gradient descent-ascent steps primal and dual variables simultaneously,
extragradient first takes a lookahead step and applies the lookahead
gradient to the current iterate. Box bounds are enforced by projection
(clipping) or by optimizing an unconstrained variable mapped through a
scaled logistic.
"""

import logging
import math
from typing import Any, Callable, NamedTuple, Optional, Tuple

import numpy as np

from . import adcore as ad
from .errors import DivergenceError
from .models import (
    BoundMode, IterationRecord, NlpProblem, SolverConfig, SolverDiagnostics, SolverMethod, SolverState,
)

logger = logging.getLogger(__name__)

# Fraction kept away from the bounds when inverting the logistic
_LOGIT_MARGIN = 1e-9


class _Evaluation(NamedTuple):
    objective: float
    residual: np.ndarray
    grad_y: np.ndarray


# ============ Bounds ============

def project(y: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Elementwise clamp into [lower, upper]."""
    y = np.asarray(y)
    if y.dtype == object:
        return ad.clip(y, lower, upper)
    return np.minimum(np.maximum(y, lower), upper)


def _logistic(z: Any) -> Any:
    if ad.value_of(z) >= 0.0:
        return 1.0 / (1.0 + ad.exp(-z))
    e = ad.exp(z)
    return e / (1.0 + e)


def reparametrize(x: Any, lower: Any, upper: Any, alpha: float) -> Any:
    """
    Map an unconstrained value into the open interval (lower, upper).

    Computes (upper - lower) / (1 + exp(-alpha * x)) + lower, elementwise for
    arrays; strictly increasing in x.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if isinstance(x, np.ndarray):
        lower = np.broadcast_to(lower, x.shape)
        upper = np.broadcast_to(upper, x.shape)
        if x.dtype != object:
            z = alpha * x
            s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
            return (upper - lower) * s + lower
        out = np.empty(x.shape, dtype=object)
        for i, xi in np.ndenumerate(x):
            out[i] = reparametrize(xi, lower[i], upper[i], alpha)
        return out
    return (upper - lower) * _logistic(alpha * x) + lower


def _inverse_reparametrize(value: float, lower: float, upper: float, alpha: float) -> float:
    frac = (value - lower) / (upper - lower)
    frac = min(max(frac, _LOGIT_MARGIN), 1.0 - _LOGIT_MARGIN)
    return math.log(frac / (1.0 - frac)) / alpha


def _sigmoid_mask(p: NlpProblem) -> np.ndarray:
    return np.isfinite(p.lower) & np.isfinite(p.upper) & (p.lower < p.upper)


def primal(p: NlpProblem, state: SolverState) -> np.ndarray:
    """The bounded decision vector represented by a solver state."""
    if state.alpha is None:
        return state.y
    return bounded(p, state.y, state.alpha)


def bounded(p: NlpProblem, w: np.ndarray, alpha: Optional[float]) -> np.ndarray:
    """Map stored iterates to decision values; identity under projection (alpha None)."""
    if alpha is None:
        return w
    mask = _sigmoid_mask(p)
    if not mask.any():
        return w
    out = np.array(w, dtype=object if np.asarray(w).dtype == object else float)
    idx = np.flatnonzero(mask)
    out[idx] = reparametrize(np.asarray(w)[idx], p.lower[idx], p.upper[idx], alpha)
    return out


def enforce_bounds(p: NlpProblem, y: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Projection in projection mode; one-sided bounds are still clipped under reparametrization."""
    if cfg.bound_mode == BoundMode.PROJECTION:
        return project(y, p.lower, p.upper)
    mask = _sigmoid_mask(p)
    lower = np.where(mask, -np.inf, p.lower)
    upper = np.where(mask, np.inf, p.upper)
    return project(y, lower, upper)


# ============ Lagrangian ============

def lagrangian(p: NlpProblem, y: np.ndarray, lam: np.ndarray) -> Any:
    """f(y) + lambda . h(y)."""
    f, h = p.objective_and_constraints(y)
    h = np.asarray(h)
    if h.size != len(lam):
        raise ValueError(f"{len(lam)} multipliers for {h.size} constraints")
    total = f
    for lam_i, h_i in zip(lam, h):
        total = total + lam_i * h_i
    return total


def _evaluate(p: NlpProblem, y: np.ndarray, lam: np.ndarray, cfg: SolverConfig,
              alpha: Optional[float]) -> _Evaluation:
    """Objective, residual and the primal gradient of the (augmented) Lagrangian at y."""
    tape = ad.Tape()
    ys = tape.variables(np.asarray(y, dtype=float))
    f, h = p.objective_and_constraints(bounded(p, ys, alpha))
    h = np.asarray(h, dtype=object) if np.asarray(h).size else np.zeros(0)
    if h.size != len(lam):
        raise ValueError(f"{len(lam)} multipliers for {h.size} constraints")
    total = f
    for lam_i, h_i in zip(lam, h):
        total = total + float(lam_i) * h_i
        if cfg.penalty > 0.0:
            total = total + (0.5 * cfg.penalty) * h_i * h_i
    grad = ad.gradient(tape, total if ad.is_var(total) else None, list(ys))
    return _Evaluation(float(ad.value_of(f)), ad.value_of(h).reshape(-1), grad)


def _eta(base: float, cfg: SolverConfig, iteration: int) -> float:
    return base * cfg.eta_decay ** iteration


def _alpha(cfg: SolverConfig, iteration: int) -> Optional[float]:
    if cfg.bound_mode != BoundMode.REPARAMETRIZATION:
        return None
    return cfg.alpha_at(iteration)


# ============ Steps ============

def _gda(p: NlpProblem, state: SolverState, cfg: SolverConfig,
         current: Optional[_Evaluation] = None) -> SolverState:
    ev = current or _evaluate(p, state.y, state.lam, cfg, state.alpha)
    eta_y = _eta(cfg.eta_y, cfg, state.iteration)
    eta_lam = _eta(cfg.eta_lambda, cfg, state.iteration)
    y = enforce_bounds(p, state.y - eta_y * ev.grad_y, cfg)
    lam = state.lam + eta_lam * ev.residual
    return SolverState(y, lam, state.iteration + 1, state.alpha)


def _extragradient(p: NlpProblem, state: SolverState, cfg: SolverConfig,
                   current: Optional[_Evaluation] = None) -> SolverState:
    ev = current or _evaluate(p, state.y, state.lam, cfg, state.alpha)
    eta_y = _eta(cfg.eta_y, cfg, state.iteration)
    eta_lam = _eta(cfg.eta_lambda, cfg, state.iteration)
    y_look = enforce_bounds(p, state.y - eta_y * ev.grad_y, cfg)
    lam_look = state.lam + eta_lam * ev.residual
    look = _evaluate(p, y_look, lam_look, cfg, state.alpha)
    y = enforce_bounds(p, state.y - eta_y * look.grad_y, cfg)
    lam = state.lam + eta_lam * look.residual
    return SolverState(y, lam, state.iteration + 1, state.alpha)


def gda_step(p: NlpProblem, state: SolverState, cfg: SolverConfig) -> SolverState:
    """One simultaneous descent-ascent step, gradients taken at the pre-step iterate."""
    return _gda(p, state, cfg)


def extragradient_step(p: NlpProblem, state: SolverState, cfg: SolverConfig) -> SolverState:
    """One lookahead step whose gradient is applied to the original iterate."""
    return _extragradient(p, state, cfg)


_STEPS = {
    SolverMethod.GDA: _gda,
    SolverMethod.EXTRAGRADIENT: _extragradient,
}


# ============ Driver ============

def initial_state(p: NlpProblem, cfg: SolverConfig) -> SolverState:
    """Cold start from the problem's guess with zero multipliers."""
    n_lam = np.asarray(ad.value_of(p.eq_constraints(p.x0_guess))).size
    alpha = _alpha(cfg, 0)
    y = np.array(p.x0_guess, dtype=float)
    if alpha is not None:
        for i in np.flatnonzero(_sigmoid_mask(p)):
            y[i] = _inverse_reparametrize(y[i], p.lower[i], p.upper[i], alpha)
    y = enforce_bounds(p, y, cfg)
    return SolverState(y, np.zeros(n_lam), 0, alpha)


def _stationarity(p: NlpProblem, state: SolverState, cfg: SolverConfig, ev: _Evaluation) -> float:
    """Max-norm of the projected Lagrangian gradient; the plain gradient for interior points."""
    if cfg.bound_mode == BoundMode.PROJECTION:
        moved = project(state.y - ev.grad_y, p.lower, p.upper)
        return float(np.max(np.abs(state.y - moved), initial=0.0))
    return float(np.max(np.abs(ev.grad_y), initial=0.0))


def kkt_residuals(p: NlpProblem, state: SolverState, cfg: SolverConfig) -> Tuple[float, float]:
    """(stationarity, max constraint violation) at a solver state, recomputed from scratch."""
    ev = _evaluate(p, state.y, state.lam, cfg, state.alpha)
    return _stationarity(p, state, cfg, ev), float(np.max(np.abs(ev.residual), initial=0.0))


def _rescale_alpha(p: NlpProblem, state: SolverState, alpha: float) -> SolverState:
    if state.alpha is None or alpha == state.alpha:
        return state
    y = np.array(state.y, dtype=float)
    mask = _sigmoid_mask(p)
    y[mask] = y[mask] * (state.alpha / alpha)
    return SolverState(y, state.lam, state.iteration, alpha)


def solve_nlp(p: NlpProblem, cfg: SolverConfig,
              callback: Optional[Callable[[SolverState], None]] = None,
              init: Optional[SolverState] = None) -> Tuple[SolverState, SolverDiagnostics]:
    """
    Iterate the configured method until first-order conditions hold or the budget runs out.

    Args:
        p: Problem to solve
        cfg: Solver settings
        callback: Called with every new iterate
        init: Starting state; defaults to initial_state(p, cfg)

    Returns:
        (final state, per-iteration diagnostics)

    Raises:
        DivergenceError: iterate max-norm exceeded cfg.divergence_ceiling
        NonFiniteError: a gradient became non-finite
    """
    step_fn = _STEPS[cfg.method]
    state = init.copy() if init is not None else initial_state(p, cfg)
    diagnostics = SolverDiagnostics()

    while True:
        ev = _evaluate(p, state.y, state.lam, cfg, state.alpha)
        grad_norm = _stationarity(p, state, cfg, ev)
        h_norm = float(np.max(np.abs(ev.residual), initial=0.0))
        diagnostics.records.append(IterationRecord(state.iteration, ev.objective, h_norm, grad_norm))

        if grad_norm <= cfg.tol_grad and h_norm <= cfg.tol_constraint:
            diagnostics.converged = True
            diagnostics.message = f"converged after {state.iteration} iterations"
            break
        if state.iteration >= cfg.max_iters:
            diagnostics.message = (
                f"budget of {cfg.max_iters} iterations exhausted "
                f"(grad {grad_norm:.3e}, constraint {h_norm:.3e})"
            )
            break

        state = step_fn(p, state, cfg, ev)
        next_alpha = _alpha(cfg, state.iteration)
        if next_alpha is not None:
            state = _rescale_alpha(p, state, next_alpha)

        size = max(float(np.max(np.abs(state.y), initial=0.0)), float(np.max(np.abs(state.lam), initial=0.0)))
        if not np.isfinite(size) or size > cfg.divergence_ceiling:
            diagnostics.iterations = state.iteration
            diagnostics.message = f"iterate norm {size:.3e} exceeded {cfg.divergence_ceiling:.1e}"
            raise DivergenceError(state.iteration, diagnostics.message, diagnostics)

        if callback is not None:
            callback(state)
        if state.iteration % 1000 == 0:
            logger.debug("%s iter %d: f=%.6g |h|=%.3e |g|=%.3e",
                         p.name, state.iteration, ev.objective, h_norm, grad_norm)

    diagnostics.iterations = state.iteration
    if diagnostics.converged:
        logger.info("%s: %s", p.name, diagnostics.message)
    else:
        logger.warning("%s: %s", p.name, diagnostics.message)
    return state, diagnostics
