"""Control environments for diffctl.

Each environment is a ControlSystem built from a table entry holding its
documented defaults. Dynamics and costs are written with the adcore
elementary functions so they run on plain floats and on recorded values.
"""

import logging
import math
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import adcore as ad
from .models import ControlSystem

logger = logging.getLogger(__name__)


def _vec(*entries: Any) -> np.ndarray:
    """Stack scalars into a state vector, keeping recorded values recordable."""
    if any(ad.is_var(e) for e in entries):
        return np.array(entries, dtype=object)
    return np.array(entries, dtype=float)


# ============ Environments ============

def _van_der_pol(p: Dict[str, Any]) -> ControlSystem:
    mu = p["mu"]

    def dynamics(x, u):
        return _vec(x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0])

    def cost(x, u, t):
        return x[0] * x[0] + x[1] * x[1] + u[0] * u[0]

    return ControlSystem(
        name="van-der-pol", state_dim=2, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        x_final=np.array([0.0, 0.0]),
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _pendulum(p: Dict[str, Any]) -> ControlSystem:
    m, length, g = p["mass"], p["length"], p["g"]
    inertia = m * length * length

    def dynamics(x, u):
        return _vec(x[1], u[0] / inertia - (g / length) * ad.sin(x[0]))

    def cost(x, u, t):
        return u[0] * u[0]

    return ControlSystem(
        name="pendulum", state_dim=2, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        x_final=np.array([math.pi, 0.0]),
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _cart_pole(p: Dict[str, Any]) -> ControlSystem:
    m1, m2, length, g = p["cart_mass"], p["pole_mass"], p["pole_length"], p["g"]
    travel = p["track_limit"]

    def dynamics(x, u):
        q2, dq1, dq2 = x[1], x[2], x[3]
        s, c = ad.sin(q2), ad.cos(q2)
        denom = m1 + m2 * (1.0 - c * c)
        ddq1 = (length * m2 * s * dq2 * dq2 + u[0] + m2 * g * c * s) / denom
        ddq2 = -(length * m2 * c * s * dq2 * dq2 + u[0] * c + (m1 + m2) * g * s) / (length * denom)
        return _vec(dq1, dq2, ddq1, ddq2)

    def cost(x, u, t):
        return u[0] * u[0]

    inf = np.inf
    return ControlSystem(
        name="cart-pole-swing-up", state_dim=4, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        x_final=np.array([p["target_position"], math.pi, 0.0, 0.0]),
        state_bounds=(np.array([-travel, -inf, -inf, -inf]), np.array([travel, inf, inf, inf])),
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _mountain_car(p: Dict[str, Any]) -> ControlSystem:
    power, gravity = p["power"], p["gravity"]

    def dynamics(x, u):
        return _vec(x[1], power * u[0] - gravity * ad.cos(3.0 * x[0]))

    def cost(x, u, t):
        return u[0] * u[0]

    return ControlSystem(
        name="mountain-car", state_dim=2, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        x_final=np.array([p["goal_position"], np.nan]),
        state_bounds=(np.array([-1.2, -0.07]), np.array([0.6, 0.07])),
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _cancer_treatment(p: Dict[str, Any]) -> ControlSystem:
    r, delta, a = p["r"], p["delta"], p["a"]

    def dynamics(x, u):
        return _vec(r * x[0] * ad.log(1.0 / x[0]) - u[0] * delta * x[0])

    def cost(x, u, t):
        return a * x[0] * x[0] + u[0] * u[0]

    return ControlSystem(
        name="cancer-treatment", state_dim=1, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _mould_fungicide(p: Dict[str, Any]) -> ControlSystem:
    r, carrying, weight = p["r"], p["M"], p["A"]

    def dynamics(x, u):
        return _vec(r * (carrying - x[0]) - u[0] * x[0])

    def cost(x, u, t):
        return weight * x[0] * x[0] + u[0] * u[0]

    return ControlSystem(
        name="mould-fungicide", state_dim=1, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _predator_prey(p: Dict[str, Any]) -> ControlSystem:
    d1, d2, weight = p["d1"], p["d2"], p["effort_weight"]
    target = p["predator_target"]

    def dynamics(x, u):
        pest, predator = x[0], x[1]
        return _vec(
            (1.0 - predator) * pest - d1 * pest * u[0],
            (pest - 1.0) * predator - d2 * predator * u[0],
        )

    def cost(x, u, t):
        return weight * u[0] * u[0]

    def terminal_cost(x):
        return x[0]

    return ControlSystem(
        name="predator-prey", state_dim=2, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        x_final=np.array([np.nan, target]),
        terminal_cost=terminal_cost,
        state_bounds=(np.zeros(2), np.full(2, np.inf)),
        control_bounds=(p["control_lower"], p["control_upper"]),
    )


def _projectile(p: Dict[str, Any]) -> ControlSystem:
    g = p["g"]

    def dynamics(x, u):
        return _vec(x[1], -g)

    def cost(x, u, t):
        return 0.0

    return ControlSystem(
        name="projectile", state_dim=2, control_dim=0,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=p["t_final"], x_start=p["x_start"],
        x_final=np.array([p["target_altitude"], np.nan]),
        free_start=(1,),
    )


# Environment table. "defaults" lists every key accepted as an override.
ENVIRONMENTS: Dict[str, Dict[str, Any]] = {
    "van-der-pol": {
        "title": "Forced Van der Pol oscillator",
        "description": "Drive the oscillator to the origin with bounded forcing.",
        "build": _van_der_pol,
        "defaults": {
            "mu": 1.0, "t_final": 10.0, "x_start": [0.0, 1.0],
            "control_lower": [-0.75], "control_upper": [1.0],
        },
    },
    "pendulum": {
        "title": "Pendulum",
        "description": "Swing a torque-limited pendulum from hanging to upright.",
        "build": _pendulum,
        "defaults": {
            "mass": 1.0, "length": 1.0, "g": 9.81, "t_final": 5.0, "x_start": [0.0, 0.0],
            "control_lower": [-5.0], "control_upper": [5.0],
        },
    },
    "cart-pole-swing-up": {
        "title": "Cart-Pole Swing-Up",
        "description": "Move a cart so that its pole swings up and balances.",
        "build": _cart_pole,
        "defaults": {
            "cart_mass": 1.0, "pole_mass": 0.3, "pole_length": 0.5, "g": 9.81,
            "target_position": 1.0, "track_limit": 2.0,
            "t_final": 2.0, "x_start": [0.0, 0.0, 0.0, 0.0],
            "control_lower": [-20.0], "control_upper": [20.0],
        },
    },
    "mountain-car": {
        "title": "Mountain Car",
        "description": "Drive an underpowered car up a hill by rocking back and forth.",
        "build": _mountain_car,
        "defaults": {
            "power": 0.0015, "gravity": 0.0025, "goal_position": 0.5,
            "t_final": 300.0, "x_start": [-0.5, 0.0],
            "control_lower": [-1.0], "control_upper": [1.0],
        },
    },
    "cancer-treatment": {
        "title": "Cancer Treatment",
        "description": "Decrease tumour size via chemotherapy.",
        "build": _cancer_treatment,
        "defaults": {
            "r": 0.3, "delta": 0.45, "a": 3.0, "t_final": 20.0, "x_start": [0.975],
            "control_lower": [0.0], "control_upper": [1.0],
        },
    },
    "mould-fungicide": {
        "title": "Mould Fungicide",
        "description": "Limit mould growth with a costly fungicide.",
        "build": _mould_fungicide,
        "defaults": {
            "r": 0.3, "M": 10.0, "A": 1.0, "t_final": 5.0, "x_start": [1.0],
            "control_lower": [0.0], "control_upper": [1.0],
        },
    },
    "predator-prey": {
        "title": "Predator-Prey",
        "description": "Reduce a pest population with a pesticide that also harms its predator.",
        "build": _predator_prey,
        "defaults": {
            "d1": 0.1, "d2": 0.1, "effort_weight": 1.0, "predator_target": 1.0,
            "t_final": 10.0, "x_start": [1.5, 1.0],
            "control_lower": [0.0], "control_upper": [1.0],
        },
    },
    "projectile": {
        "title": "Projectile",
        "description": "Choose a launch velocity to reach a target altitude at a fixed time.",
        "build": _projectile,
        "defaults": {
            "g": 9.81, "target_altitude": 100.0, "t_final": 100.0, "x_start": [0.0, 0.0],
            "control_lower": [], "control_upper": [],
        },
    },
}


def list_environments() -> List[str]:
    return list(ENVIRONMENTS)


def make_system(name: str, overrides: Optional[Dict[str, Any]] = None) -> ControlSystem:
    """
    Build a catalog environment.

    Args:
        name: Environment identifier, e.g. "van-der-pol"
        overrides: Replacement values for documented parameters

    Returns:
        The populated ControlSystem

    Raises:
        ValueError: unknown environment, unknown key, or bounds violated by overrides
    """
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; available: {', '.join(ENVIRONMENTS)}")
    entry = ENVIRONMENTS[name]
    params = dict(entry["defaults"])
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ValueError(f"environment {name!r} has no parameter {key!r}")
        params[key] = value

    built = {}
    for key, value in params.items():
        try:
            if isinstance(entry["defaults"][key], list):
                built[key] = np.array(value, dtype=float)
            else:
                built[key] = float(value)
        except (TypeError, ValueError) as e:
            raise ValueError(f"environment {name!r} parameter {key!r} must be numeric, got {value!r}") from e

    t_final = built["t_final"]
    if not t_final > 0.0:
        raise ValueError(f"t_final must be greater than t_start (0), got {t_final}")

    system = entry["build"](built)
    _validate(system)
    logger.debug("Built %s with %s", name, params)
    return replace(system, params=params, description=entry["description"])


def _validate(system: ControlSystem):
    if system.x_start.shape != (system.state_dim,):
        raise ValueError(f"x_start must have {system.state_dim} entries")
    if system.control_bounds is not None:
        lower, upper = system.control_bounds
        if lower.shape != (system.control_dim,) or upper.shape != (system.control_dim,):
            raise ValueError(f"control bounds must have {system.control_dim} entries")
        if np.any(lower > upper):
            raise ValueError("control_lower exceeds control_upper")
    if system.state_bounds is not None:
        lower, upper = system.state_bounds
        if np.any(lower > upper):
            raise ValueError("state lower bound exceeds upper bound")
        fixed = system.fixed_start_mask
        x = system.x_start
        if np.any(fixed & ((x < lower) | (x > upper))):
            raise ValueError("x_start lies outside the state bounds")


def augment_dynamics(system: ControlSystem) -> Callable[[np.ndarray, np.ndarray, float], np.ndarray]:
    """
    Append the running cost as an extra state coordinate.

    The returned function maps (x_aug[D+1], u, t) to its derivative; the last
    entry integrates the instantaneous cost from zero.
    """
    D = system.state_dim

    def augmented(x_aug: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        x = x_aug[:D]
        dx = np.asarray(system.dynamics(x, u))
        c = system.cost(x, u, t)
        tail = np.array([c], dtype=object if ad.is_var(c) else float)
        return np.concatenate([dx, tail])

    return augmented


def catalog_entries() -> List[Dict[str, Any]]:
    """Listing metadata for every environment."""
    entries = []
    for name, entry in ENVIRONMENTS.items():
        system = make_system(name)
        entries.append({
            "name": name,
            "title": entry["title"],
            "state_dim": system.state_dim,
            "control_dim": system.control_dim,
            "fixed_terminal_state": system.has_fixed_final,
            "terminal_cost": system.terminal_cost is not None,
            "description": entry["description"],
        })
    return entries
