"""Tests for the environment catalog and the fixed-step integrators."""

import math

import numpy as np
import pytest

from diffctl.errors import IntegrationBlowupError
from diffctl.integrate import (
    convergence_study, default_scheme, integrate_interval, interpolate, rollout, step, uniform_spline,
)
from diffctl.models import ControlSpline, IntegratorKind, InterpolationScheme
from diffctl.systems import ENVIRONMENTS, augment_dynamics, catalog_entries, list_environments, make_system


# ============ Systems ============

@pytest.mark.parametrize("name", list(ENVIRONMENTS))
def test_every_environment_builds_with_finite_dynamics(name):
    system = make_system(name)
    lower, upper = system.control_box()
    u = np.where(np.isfinite(lower) & np.isfinite(upper), 0.5 * (lower + upper), 0.0)
    dx = np.asarray(system.dynamics(system.x_start, u), dtype=float)
    assert dx.shape == (system.state_dim,)
    assert np.all(np.isfinite(dx))
    assert np.isfinite(float(system.cost(system.x_start, u, 0.0)))


def test_catalog_lists_eight_environments():
    assert len(list_environments()) == 8
    assert "cart-pole-swing-up" in list_environments()


def test_overrides_replace_documented_parameters():
    system = make_system("pendulum", {"g": 1.62, "t_final": 3.0})
    assert system.params["g"] == 1.62
    assert system.t_final == 3.0
    # upright and unforced is an equilibrium
    dx = system.dynamics(np.array([math.pi, 0.0]), np.array([0.0]))
    assert dx[1] == pytest.approx(0.0, abs=1e-12)


def test_unknown_environment_and_key_are_rejected():
    with pytest.raises(ValueError, match="unknown environment"):
        make_system("inverted-spaceship")
    with pytest.raises(ValueError, match="no parameter"):
        make_system("pendulum", {"damping": 0.1})


def test_inconsistent_overrides_are_rejected():
    with pytest.raises(ValueError):
        make_system("van-der-pol", {"control_lower": [2.0], "control_upper": [1.0]})
    with pytest.raises(ValueError):
        make_system("van-der-pol", {"t_final": 0.0})
    with pytest.raises(ValueError):
        make_system("van-der-pol", {"x_start": [0.0, 1.0, 2.0]})


def test_catalog_flags():
    entries = {e["name"]: e for e in catalog_entries()}
    assert entries["cart-pole-swing-up"]["fixed_terminal_state"] is True
    assert entries["cart-pole-swing-up"]["terminal_cost"] is False
    assert entries["cancer-treatment"]["fixed_terminal_state"] is False
    assert entries["predator-prey"]["terminal_cost"] is True
    assert entries["projectile"]["control_dim"] == 0


def test_projectile_chooses_its_launch_velocity():
    system = make_system("projectile")
    assert system.free_start == (1,)
    assert list(system.fixed_start_mask) == [True, False]
    assert list(system.final_mask) == [True, False]


def test_augmented_dynamics_append_running_cost(scalar_lq):
    f = augment_dynamics(scalar_lq)
    out = f(np.array([2.0, 0.0]), np.array([1.0]), 0.0)
    assert out == pytest.approx([-2.0 + 1.0, 4.0 + 1.0])


# ============ Interpolation ============

def test_constant_interpolation_holds_the_left_node():
    spline = ControlSpline(np.array([[0.0], [1.0], [4.0]]), np.array([0.0, 1.0, 2.0]), InterpolationScheme.CONSTANT)
    assert interpolate(spline, 0.99)[0] == 0.0
    assert interpolate(spline, 1.0)[0] == 1.0
    assert interpolate(spline, 1.5)[0] == 1.0


def test_linear_interpolation_and_clamping():
    spline = uniform_spline(np.array([0.0, 1.0, 4.0]), 0.0, 2.0, InterpolationScheme.LINEAR)
    assert interpolate(spline, 0.5)[0] == pytest.approx(0.5)
    assert interpolate(spline, 1.5)[0] == pytest.approx(2.5)
    assert interpolate(spline, 2.0)[0] == 4.0
    assert interpolate(spline, 5.0)[0] == 4.0
    assert interpolate(spline, -1.0)[0] == 0.0


def test_default_scheme_pairs_euler_with_held_controls():
    assert default_scheme(IntegratorKind.EULER) == InterpolationScheme.CONSTANT
    assert default_scheme(IntegratorKind.RK4) == InterpolationScheme.LINEAR


# ============ Integrators ============

def test_euler_on_exponential_growth_is_a_geometric_sequence():
    states = integrate_interval(IntegratorKind.EULER, lambda x, u, t: x, np.array([1.0]), None, 0.0, 1.0, 10)
    assert len(states) == 11
    assert states[-1][0] == pytest.approx(1.1 ** 10)


def test_rk4_step_matches_its_taylor_polynomial():
    x = step(IntegratorKind.RK4, lambda x, u, t: x, np.array([1.0]), None, 0.0, 0.1)
    assert x[0] == pytest.approx(1 + 0.1 + 0.1 ** 2 / 2 + 0.1 ** 3 / 6 + 0.1 ** 4 / 24, rel=1e-14)


@pytest.mark.parametrize("kind", [IntegratorKind.HEUN, IntegratorKind.MIDPOINT])
def test_second_order_steps_on_exponential_growth(kind):
    x = step(kind, lambda x, u, t: x, np.array([1.0]), None, 0.0, 0.1)
    assert x[0] == pytest.approx(1.105, rel=1e-14)


def test_nonpositive_step_is_rejected():
    with pytest.raises(ValueError):
        step(IntegratorKind.EULER, lambda x, u, t: x, np.array([1.0]), None, 0.0, 0.0)


def test_blowup_is_reported_with_its_time():
    with pytest.raises(IntegrationBlowupError) as info:
        integrate_interval(IntegratorKind.EULER, lambda x, u, t: x * 1e300, np.array([1.0]), None, 0.0, 3.0, 3)
    assert info.value.time > 0.0


def test_empirical_orders_match_nominal_orders():
    results = convergence_study()
    tolerance = {"euler": 0.2, "heun": 0.2, "midpoint": 0.2, "rk4": 0.3}
    for name, result in results.items():
        assert abs(result["slope"] - result["expected_order"]) <= tolerance[name], (name, result["slope"])


def test_projectile_rollout_reaches_the_target_altitude():
    system = make_system("projectile")
    x0 = np.array([0.0, 491.5])
    spline = uniform_spline(np.zeros((2, 0)), 0.0, 100.0)
    traj, total = rollout(IntegratorKind.RK4, system, spline, 20, x0)
    assert traj.states[-1][0] == pytest.approx(100.0, abs=1e-6)
    assert traj.controls.shape == (21, 0)
    assert float(total) == 0.0


def test_rollout_accumulates_running_cost(scalar_lq):
    spline = uniform_spline(np.zeros((2, 1)), 0.0, 1.0)
    traj, total = rollout(IntegratorKind.RK4, scalar_lq, spline, 50)
    assert traj.states[-1][0] == pytest.approx(math.exp(-1.0), rel=1e-7)
    assert float(total) == pytest.approx((1.0 - math.exp(-2.0)) / 2.0, rel=1e-7)
    assert traj.header() == ["t", "x_0", "u_0"]


def test_untreated_mould_relaxes_to_its_carrying_level():
    system = make_system("mould-fungicide")
    spline = uniform_spline(np.zeros((2, 1)), 0.0, 5.0)
    traj, _ = rollout(IntegratorKind.RK4, system, spline, 100)
    expected = 10.0 + (1.0 - 10.0) * np.exp(-0.3 * traj.times)
    assert traj.states[:, 0] == pytest.approx(expected, rel=1e-8)
