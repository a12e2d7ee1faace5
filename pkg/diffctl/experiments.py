"""Experiment orchestration for diffctl.

Each experiment kind builds its objects from an ExperimentConfig, writes its
outputs into the run directory and reports a status and a summary;
run_experiment wraps them into the RunManifest.
"""

import logging
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

from . import storage
from .config import DIAGNOSTICS_FILE, LOSS_HISTORY_FILE, STUDY_FILE, VECTOR_FIELD_FILE
from .endtoend import e2e_train, snapshot_controls
from .indirect import fbsm_solve
from .integrate import convergence_study, default_scheme, rollout, uniform_spline
from .models import (
    FbsmDiagnostics, IntegratorKind, RunManifest, RunStatus, SamplingStrategy, SolverDiagnostics, Trajectory,
)
from .parser import ExperimentConfig
from .solve import kkt_residuals, primal, solve_nlp
from .sysid import (
    field_grid, generate_dataset, network_sizes, train_sysid, vector_field_report, window_episodes,
)
from .systems import make_system
from .transcribe import transcribe

logger = logging.getLogger(__name__)


def _status(converged: bool) -> RunStatus:
    return RunStatus.CONVERGED if converged else RunStatus.BUDGET_EXHAUSTED


# ============ plan ============

def run_plan(config: ExperimentConfig, output_dir: Path) -> Tuple[RunStatus, Dict[str, Any]]:
    """Transcribe an environment and solve it with a first-order Lagrangian method."""
    env = config.environment
    system = make_system(env.name, env.overrides)
    shooting = config.transcription.shooting_config()
    solver_cfg = config.solver.solver_config()

    # Stage 1: Transcribe
    problem = transcribe(system, config.transcription.method, shooting,
                         config.transcription.enforce_state_bounds)

    # Stage 2: Solve, keeping iteration snapshots
    snapshots: List[Tuple[int, Trajectory]] = []
    stride = config.solver.snapshot_stride

    def keep_snapshot(state):
        if stride and state.iteration % stride == 0:
            snapshots.append((state.iteration, problem.trajectory(primal(problem, state))))

    state, diagnostics = solve_nlp(problem, solver_cfg, callback=keep_snapshot)

    # Stage 3: Write outputs
    trajectory = problem.trajectory(primal(problem, state))
    storage.save_trajectory(output_dir, trajectory)
    storage.write_csv(output_dir / DIAGNOSTICS_FILE, SolverDiagnostics.HEADER,
                      [r.row() for r in diagnostics.records])
    if snapshots:
        storage.save_snapshots(output_dir, snapshots)

    stationarity, violation = kkt_residuals(problem, state, solver_cfg)
    summary = diagnostics.to_dict()
    summary.update({
        "problem": problem.to_dict(),
        "stationarity": stationarity,
        "constraint_violation": violation,
        "start_state": [float(v) for v in trajectory.states[0]],
        "final_state": [float(v) for v in trajectory.states[-1]],
    })
    return _status(diagnostics.converged), summary


# ============ fbsm ============

def run_fbsm(config: ExperimentConfig, output_dir: Path) -> Tuple[RunStatus, Dict[str, Any]]:
    """Forward-backward sweep on a free-endpoint environment."""
    env = config.environment
    system = make_system(env.name, env.overrides)
    section = config.fbsm

    trajectory, diagnostics = fbsm_solve(
        system,
        n_steps=section.n_steps,
        max_sweeps=section.max_sweeps,
        tol=section.tol,
        relaxation=section.relaxation,
        control_step=section.control_step,
        control_iters=section.control_iters,
    )

    storage.save_trajectory(output_dir, trajectory)
    storage.write_csv(output_dir / DIAGNOSTICS_FILE, FbsmDiagnostics.HEADER,
                      [r.row() for r in diagnostics.records])
    summary = diagnostics.to_dict()
    summary["total_cost"] = diagnostics.records[-1].total_cost if diagnostics.records else None
    return _status(diagnostics.converged), summary


# ============ sysid ============

def run_sysid(config: ExperimentConfig, output_dir: Path) -> Tuple[RunStatus, Dict[str, Any]]:
    """Generate a dataset, fit a neural ODE and compare vector fields."""
    env = config.environment
    system = make_system(env.name, env.overrides)
    section = config.sysid

    # Stage 1: Dataset
    dataset = generate_dataset(system, SamplingStrategy(section.strategy), section.n_episodes,
                               section.n_steps, section.noise_sigma, config.seed, section.walk_sigma)
    storage.save_dataset(output_dir, dataset)

    # Stage 2: Train, optionally on short windows of each episode
    training = window_episodes(dataset, section.window_steps) if section.window_steps else dataset
    params, history = train_sysid(system, training, section.hidden, section.train_config(), config.seed)
    storage.save_params(output_dir, params)
    storage.write_csv(output_dir / LOSS_HISTORY_FILE, ["step", "loss", "failed_episodes"],
                      [r.row() for r in history])

    # Stage 3: Vector field
    states, controls = field_grid(dataset, system, section.grid_points, section.control_levels)
    report = vector_field_report(params, system, states, controls)
    storage.write_csv(output_dir / VECTOR_FIELD_FILE, report.header(), report.rows())

    finite = [r.loss for r in history if np.isfinite(r.loss)]
    summary = {
        "network_sizes": params.sizes,
        "initial_loss": finite[0] if finite else None,
        "best_loss": min(finite) if finite else None,
        "vector_field_mae": report.mean_abs_error,
        "zero_model_mae": float(np.mean(np.abs(report.true))) if report.true.size else 0.0,
        "failed_episodes": sum(r.failed_episodes for r in history),
    }
    return RunStatus.COMPLETED, summary


# ============ e2e ============

def run_e2e(config: ExperimentConfig, output_dir: Path) -> Tuple[RunStatus, Dict[str, Any]]:
    """Imitate a plan on the true dynamics by training a network through the unrolled planner."""
    env = config.environment
    system = make_system(env.name, env.overrides)
    shooting = config.transcription.shooting_config()
    section = config.e2e
    sizes = network_sizes(system.state_dim, system.control_dim, section.hidden)

    # Stage 1: Train (the expert is planned on the true dynamics first)
    params, controls, history = e2e_train(
        system, config.transcription.method, shooting, sizes,
        e2e_cfg=section.e2e_config(), solver_cfg=config.solver.solver_config(), seed=config.seed,
    )
    storage.save_params(output_dir, params)
    storage.write_csv(output_dir / LOSS_HISTORY_FILE,
                      ["outer_iteration", "loss", "grad_inf_norm", "reset", "diverged"],
                      [r.row() for r in history])

    # Stage 2: Roll the plans out on the true system
    kind = shooting.integrator
    scheme = shooting.scheme or default_scheme(kind)
    snapshots = snapshot_controls(history, section.snapshot_stride, system, section.rollout_steps, kind, scheme)
    storage.save_snapshots(output_dir, [(iteration, traj) for iteration, _, traj in snapshots])
    spline = uniform_spline(controls, system.t_start, system.t_final, scheme)
    trajectory, total = rollout(kind, system, spline, section.rollout_steps)
    storage.save_trajectory(output_dir, trajectory)

    losses = [r.loss for r in history if not r.diverged]
    summary = {
        "network_sizes": params.sizes,
        "initial_loss": losses[0],
        "best_loss": min(losses),
        "outer_iterations": len(history),
        "inner_failures": sum(1 for r in history if r.diverged),
        "resets": sum(1 for r in history if r.reset),
        "rollout_cost": float(total),
    }
    return RunStatus.COMPLETED, summary


# ============ integrator-study ============

def run_integrator_study(config: ExperimentConfig, output_dir: Path) -> Tuple[RunStatus, Dict[str, Any]]:
    """Empirical convergence orders on x' = x."""
    section = config.study
    kinds = [IntegratorKind(name) for name in section.integrators]
    results = convergence_study(kinds, section.dts, section.t_final)
    rows = [
        [name, dt, error]
        for name, result in results.items()
        for dt, error in zip(result["dts"], result["errors"])
    ]
    storage.write_csv(output_dir / STUDY_FILE, ["integrator", "dt", "error"], rows)
    summary = {
        name: {"slope": result["slope"], "expected_order": result["expected_order"]}
        for name, result in results.items()
    }
    return RunStatus.COMPLETED, summary


EXPERIMENTS: Dict[str, Callable[[ExperimentConfig, Path], Tuple[RunStatus, Dict[str, Any]]]] = {
    "plan": run_plan,
    "fbsm": run_fbsm,
    "sysid": run_sysid,
    "e2e": run_e2e,
    "integrator-study": run_integrator_study,
}


def run_experiment(config: ExperimentConfig, output_dir: Path) -> RunManifest:
    """
    Run one experiment into an existing, empty directory and write its manifest.

    Returns:
        The written RunManifest
    """
    output_dir = Path(output_dir)
    manifest = RunManifest(experiment=config.kind, config=config.model_dump(mode="json"),
                           started_at=datetime.utcnow())
    started = time.perf_counter()
    logger.info("Running %s into %s", config.label, output_dir)
    manifest.status, manifest.summary = EXPERIMENTS[config.kind](config, output_dir)
    manifest.duration_seconds = time.perf_counter() - started
    storage.write_manifest(output_dir, manifest)
    logger.info("%s finished: %s in %.2fs", config.label, manifest.status.value, manifest.duration_seconds)
    return manifest
