"""Experiment configuration parsing and validation for diffctl."""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import (
    BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator,
)

from .config import (
    DEFAULT_ETA, DEFAULT_MAX_ITERS, DEFAULT_SEGMENTS, DEFAULT_TOL_CONSTRAINT, DEFAULT_TOL_GRAD,
    DIVERGENCE_CEILING, E2E_K_STEPS, E2E_RESET_PERIOD, FBSM_CONTROL_ITERS, FBSM_CONTROL_STEP,
    FBSM_RELAXATION, NLP_SOLVERS, SYSID_HIDDEN, SYSID_LEARNING_RATE, SYSID_MOMENTUM, SYSID_WALK_SIGMA,
    TRANSCRIPTION_METHODS,
)
from .errors import ConfigError
from .models import (
    BoundMode, E2eConfig, ImitationTarget, IntegratorKind, InterpolationScheme, SamplingStrategy,
    ShootingConfig, SolverConfig, SolverMethod, TrainConfig,
)
from .systems import ENVIRONMENTS, make_system

ExperimentKind = Literal["plan", "sysid", "e2e", "fbsm", "integrator-study"]

STOCHASTIC_KINDS = ("sysid", "e2e")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvironmentSection(_Section):
    """Catalog environment plus parameter overrides."""
    name: str
    overrides: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, name: str) -> str:
        if name not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {name!r}; available: {', '.join(ENVIRONMENTS)}")
        return name

    @field_validator("overrides")
    @classmethod
    def _buildable(cls, overrides: Dict[str, Any], info: ValidationInfo) -> Dict[str, Any]:
        if "name" in info.data:
            make_system(info.data["name"], overrides)
        return overrides


class TranscriptionSection(_Section):
    method: str = "multiple-shooting"
    n_controls: int = Field(DEFAULT_SEGMENTS + 1, ge=2)
    n_intervals: int = Field(1, ge=1)
    steps_per_interval: int = Field(20, ge=1)
    integrator: str = IntegratorKind.RK4.value
    scheme: Optional[str] = None
    enforce_state_bounds: bool = False

    @field_validator("method")
    @classmethod
    def _known_method(cls, method: str) -> str:
        if method not in TRANSCRIPTION_METHODS:
            raise ValueError(f"unknown transcription {method!r}; available: {', '.join(TRANSCRIPTION_METHODS)}")
        return method

    @field_validator("integrator")
    @classmethod
    def _known_integrator(cls, integrator: str) -> str:
        IntegratorKind(integrator)
        return integrator

    @field_validator("scheme")
    @classmethod
    def _known_scheme(cls, scheme: Optional[str]) -> Optional[str]:
        if scheme is not None:
            InterpolationScheme(scheme)
        return scheme

    def shooting_config(self) -> ShootingConfig:
        return ShootingConfig(
            n_controls=self.n_controls,
            n_intervals=self.n_intervals,
            steps_per_interval=self.steps_per_interval,
            integrator=IntegratorKind(self.integrator),
            scheme=InterpolationScheme(self.scheme) if self.scheme else None,
        )


class SolverSection(_Section):
    method: str = SolverMethod.EXTRAGRADIENT.value
    eta_y: float = Field(DEFAULT_ETA, ge=0)
    eta_lambda: float = Field(DEFAULT_ETA, ge=0)
    max_iters: int = Field(DEFAULT_MAX_ITERS, ge=0)
    tol_grad: float = Field(DEFAULT_TOL_GRAD, gt=0)
    tol_constraint: float = Field(DEFAULT_TOL_CONSTRAINT, gt=0)
    bound_mode: str = BoundMode.PROJECTION.value
    alpha_schedule: List[float] = Field(default_factory=lambda: [1.0], min_length=1)
    eta_decay: float = Field(1.0, gt=0, le=1)
    penalty: float = Field(0.0, ge=0)
    divergence_ceiling: float = Field(DIVERGENCE_CEILING, gt=0)
    # 0 disables iteration snapshots
    snapshot_stride: int = Field(0, ge=0)

    @field_validator("method")
    @classmethod
    def _known_solver(cls, method: str) -> str:
        if method not in NLP_SOLVERS:
            raise ValueError(f"unknown solver {method!r}; available: {', '.join(NLP_SOLVERS)}")
        return method

    @field_validator("bound_mode")
    @classmethod
    def _known_bound_mode(cls, mode: str) -> str:
        BoundMode(mode)
        return mode

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            eta_y=self.eta_y,
            eta_lambda=self.eta_lambda,
            max_iters=self.max_iters,
            tol_grad=self.tol_grad,
            tol_constraint=self.tol_constraint,
            method=SolverMethod(self.method),
            bound_mode=BoundMode(self.bound_mode),
            alpha_schedule=list(self.alpha_schedule),
            eta_decay=self.eta_decay,
            penalty=self.penalty,
            divergence_ceiling=self.divergence_ceiling,
        )


class SysIdSection(_Section):
    strategy: str = SamplingStrategy.UNIFORM.value
    n_episodes: int = Field(16, ge=1)
    n_steps: int = Field(50, ge=1)
    noise_sigma: float = Field(0.0, ge=0)
    walk_sigma: float = Field(SYSID_WALK_SIGMA, ge=0)
    hidden: List[int] = Field(default_factory=lambda: list(SYSID_HIDDEN))
    learning_rate: float = Field(SYSID_LEARNING_RATE, ge=0)
    momentum: float = Field(SYSID_MOMENTUM, ge=0, lt=1)
    train_steps: int = Field(500, ge=0)
    batch_size: int = Field(8, ge=1)
    # 0 trains on whole episodes
    window_steps: int = Field(0, ge=0)
    # Vector-field report: grid points per state dimension and control levels
    grid_points: int = Field(11, ge=2)
    control_levels: int = Field(3, ge=1)

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, strategy: str) -> str:
        if strategy == SamplingStrategy.AROUND_CANDIDATE.value:
            raise ValueError("around-candidate sampling needs a candidate trajectory and is library-only")
        SamplingStrategy(strategy)
        return strategy

    @field_validator("window_steps")
    @classmethod
    def _window_fits(cls, window_steps: int, info: ValidationInfo) -> int:
        if window_steps > info.data.get("n_steps", window_steps):
            raise ValueError(f"window_steps {window_steps} exceeds n_steps {info.data['n_steps']}")
        return window_steps

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, hidden: List[int]) -> List[int]:
        if any(w < 1 for w in hidden):
            raise ValueError("hidden widths must be positive")
        return hidden

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.momentum, self.train_steps, self.batch_size)


class E2eSection(_Section):
    hidden: List[int] = Field(default_factory=lambda: [16])
    k_steps: int = Field(E2E_K_STEPS, ge=1)
    reset_period: int = Field(E2E_RESET_PERIOD, ge=1)
    outer_learning_rate: float = Field(1e-2, ge=0)
    outer_momentum: float = Field(0.0, ge=0, lt=1)
    budget: int = Field(200, ge=1)
    target: str = ImitationTarget.PLANNED.value
    snapshot_stride: int = Field(10, ge=1)
    rollout_steps: int = Field(100, ge=1)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, hidden: List[int]) -> List[int]:
        if any(w < 1 for w in hidden):
            raise ValueError("hidden widths must be positive")
        return hidden

    @field_validator("target")
    @classmethod
    def _known_target(cls, target: str) -> str:
        ImitationTarget(target)
        return target

    def e2e_config(self) -> E2eConfig:
        return E2eConfig(self.k_steps, self.reset_period, self.outer_learning_rate,
                         self.outer_momentum, self.budget, ImitationTarget(self.target))


class FbsmSection(_Section):
    n_steps: int = Field(100, ge=1)
    max_sweeps: int = Field(200, ge=1)
    tol: float = Field(1e-6, gt=0)
    relaxation: float = Field(FBSM_RELAXATION, gt=0, le=1)
    control_step: float = Field(FBSM_CONTROL_STEP, gt=0)
    control_iters: int = Field(FBSM_CONTROL_ITERS, ge=1)


class StudySection(_Section):
    integrators: List[str] = Field(default_factory=lambda: [k.value for k in IntegratorKind])
    dts: List[float] = Field(default_factory=lambda: [0.1, 0.05, 0.025, 0.0125], min_length=2)
    t_final: float = Field(1.0, gt=0)

    @field_validator("integrators")
    @classmethod
    def _known_integrators(cls, names: List[str]) -> List[str]:
        for name in names:
            IntegratorKind(name)
        return names

    @field_validator("dts")
    @classmethod
    def _positive_steps(cls, dts: List[float]) -> List[float]:
        if any(dt <= 0 for dt in dts):
            raise ValueError("step sizes must be positive")
        return dts


class ExperimentConfig(_Section):
    """One experiment: what to run, on which environment, with which settings."""
    kind: ExperimentKind
    environment: Optional[EnvironmentSection] = None
    transcription: TranscriptionSection = Field(default_factory=TranscriptionSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    sysid: SysIdSection = Field(default_factory=SysIdSection)
    e2e: E2eSection = Field(default_factory=E2eSection)
    fbsm: FbsmSection = Field(default_factory=FbsmSection)
    study: StudySection = Field(default_factory=StudySection)
    seed: Optional[int] = None
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.kind != "integrator-study" and self.environment is None:
            raise ValueError(f"environment is required for {self.kind} experiments")
        if self.kind in STOCHASTIC_KINDS and self.seed is None:
            raise ValueError(f"seed is required for {self.kind} experiments")
        approach = TRANSCRIPTION_METHODS[self.transcription.method]["approach"]
        if self.kind in ("plan", "e2e") and approach != "direct":
            raise ValueError(f"transcription.method must be a direct method for {self.kind} experiments")
        return self

    @property
    def label(self) -> str:
        if self.environment is None:
            return self.kind
        return f"{self.kind}-{self.environment.name}"


def _error_key(error: Dict[str, Any]) -> str:
    loc = [str(part) for part in error.get("loc", ())]
    return ".".join(loc) if loc else "<document>"


def parse_config(data: Dict[str, Any], path: str = "<config>") -> ExperimentConfig:
    """
    Validate a decoded configuration document.

    Raises:
        ConfigError: naming the first offending key
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(path, _error_key(first), first.get("msg", str(e))) from e


def load_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Read and validate a JSON experiment configuration.

    Args:
        path: JSON file
        seed: Replaces the file's seed when given

    Raises:
        ConfigError: unreadable file, malformed JSON or failed validation
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(path, "<file>", str(e)) from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(path, "<document>", f"invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(path, "<document>", "top level must be an object")
    if seed is not None:
        data["seed"] = seed
    return parse_config(data, path)
