"""Configuration for diffctl."""

import os
from pathlib import Path

from dotenv import load_dotenv

# Load .env from project root (parent of diffctl/)
load_dotenv(Path(__file__).parent.parent / ".env")

# Where experiment runs are written when neither the CLI nor the config names a directory
OUTPUT_ROOT = os.getenv("DIFFCTL_OUTPUT_ROOT", "runs")

LOG_LEVEL = os.getenv("DIFFCTL_LOG_LEVEL", "INFO")

# Iterate max-norm above which a solve is aborted
DIVERGENCE_CEILING = float(os.getenv("DIFFCTL_DIVERGENCE_CEILING", "1e8"))

# Trajectory optimization techniques
# Each entry mirrors one row of the methods table printed by `diffctl list`
TRANSCRIPTION_METHODS = {
    "single-shooting": {
        "name": "Single Shooting",
        "approach": "direct",
        "parallelism": "sequential",
        "integration": "any explicit integrator",
    },
    "multiple-shooting": {
        "name": "Multiple Shooting",
        "approach": "direct",
        "parallelism": "partially parallel",
        "integration": "any explicit integrator",
    },
    "trapezoidal-collocation": {
        "name": "Trapezoidal Collocation",
        "approach": "direct",
        "parallelism": "parallel",
        "integration": "trapezoidal rule",
    },
    "hermite-simpson-collocation": {
        "name": "Hermite-Simpson Collocation",
        "approach": "direct",
        "parallelism": "parallel",
        "integration": "Simpson's rule",
    },
    "forward-backward-sweep": {
        "name": "Forward-Backward Sweep",
        "approach": "indirect",
        "parallelism": "sequential",
        "integration": "Runge-Kutta 4th order",
    },
}

# First-order NLP solvers
NLP_SOLVERS = {
    "gda": {
        "name": "Lagrangian gradient descent-ascent",
        "description": "Simultaneous primal descent and dual ascent on the Lagrangian.",
    },
    "extragradient": {
        "name": "Extragradient",
        "description": "Applies the gradient of a lookahead iterate to the current iterate.",
    },
}

# Solver defaults
DEFAULT_ETA = 1e-2
DEFAULT_MAX_ITERS = 10000
DEFAULT_TOL_GRAD = 1e-6
DEFAULT_TOL_CONSTRAINT = 1e-6
DEFAULT_ALPHA = 1.0

# Transcription defaults
DEFAULT_SEGMENTS = 20

# Forward-backward sweep defaults
FBSM_RELAXATION = 0.5
FBSM_CONTROL_STEP = 0.25
FBSM_CONTROL_ITERS = 30
FBSM_MIN_RELAXATION = 1e-3

# System identification defaults
SYSID_HIDDEN = (32, 32)
SYSID_LEARNING_RATE = 1e-3
SYSID_MOMENTUM = 0.9
SYSID_WALK_SIGMA = 0.1

# End-to-end defaults
E2E_K_STEPS = 10
E2E_RESET_PERIOD = 50
IFT_STATIONARITY_TOL = 1e-6
IFT_CONDITION_LIMIT = 1e12

# Output file names inside a run directory
MANIFEST_FILE = "manifest.json"
TRAJECTORY_FILE = "trajectory.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
SNAPSHOTS_FILE = "snapshots.csv"
LOSS_HISTORY_FILE = "loss_history.csv"
VECTOR_FIELD_FILE = "vector_field.csv"
STUDY_FILE = "integrator_study.csv"
PARAMS_FILE = "params.json"
DATASET_DIR = "dataset"
