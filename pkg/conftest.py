"""Shared fixtures for the diffctl test suite."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from diffctl import adcore as ad  # noqa: E402
from diffctl.models import ControlSystem  # noqa: E402


def stack(*entries):
    """State vector that stays recordable when any entry is recorded."""
    return np.array(entries, dtype=object if any(ad.is_var(e) for e in entries) else float)


def _scalar_lq(a: float = -1.0) -> ControlSystem:
    """x' = a x + u, cost x^2 + u^2 on [0, 1], x(0) = 1, free end."""
    def dynamics(x, u):
        return stack(a * x[0] + u[0])

    def cost(x, u, t):
        return x[0] * x[0] + u[0] * u[0]

    return ControlSystem(
        name="scalar-lq", state_dim=1, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=1.0, x_start=np.array([1.0]),
    )


def _double_integrator() -> ControlSystem:
    """x'' = u from rest at 0 to rest at 1 in unit time, minimizing the integral of u^2."""
    def dynamics(x, u):
        return stack(x[1], u[0])

    def cost(x, u, t):
        return u[0] * u[0]

    return ControlSystem(
        name="double-integrator", state_dim=2, control_dim=1,
        dynamics=dynamics, cost=cost,
        t_start=0.0, t_final=1.0, x_start=np.array([0.0, 0.0]),
        x_final=np.array([1.0, 0.0]),
    )


@pytest.fixture
def scalar_lq():
    return _scalar_lq()


@pytest.fixture
def double_integrator():
    return _double_integrator()


@pytest.fixture
def make_scalar_lq():
    return _scalar_lq
