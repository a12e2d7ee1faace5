"""Tests for neural ODE system identification."""

import numpy as np
import pytest

from diffctl import adcore as ad
from diffctl import storage
from diffctl.models import ControlSystem, MlpParams, SamplingStrategy, TrainConfig
from diffctl.sysid import (
    episode_loss_and_grad, field_grid, generate_dataset, init_mlp, mse_loss, network_sizes, neural_dynamics,
    predict_trajectory, train_sysid, vector_field_report, window_episodes,
)
from diffctl.systems import make_system

from conftest import stack

GENERATOR = np.array([[0.0, 1.0], [-1.0, -0.2]])
INPUT = np.array([0.0, 1.0])


def _linear_system():
    """Damped oscillator x' = A x + B u with controls in [-1, 1]."""
    def dynamics(x, u):
        return stack(
            GENERATOR[0, 0] * x[0] + GENERATOR[0, 1] * x[1] + INPUT[0] * u[0],
            GENERATOR[1, 0] * x[0] + GENERATOR[1, 1] * x[1] + INPUT[1] * u[0],
        )

    return ControlSystem(
        name="linear", state_dim=2, control_dim=1,
        dynamics=dynamics, cost=lambda x, u, t: 0.0,
        t_start=0.0, t_final=2.0, x_start=np.array([1.0, 0.0]),
        control_bounds=(np.array([-1.0]), np.array([1.0])),
    )


def _exact_linear_params():
    weight = np.hstack([GENERATOR, INPUT.reshape(2, 1)])
    return MlpParams([(weight, np.zeros(2))])


# ============ Loss ============

def test_mse_divides_by_steps_times_dimension():
    predicted = np.zeros((3, 2))
    observed = np.ones((3, 2))
    assert float(mse_loss(predicted, observed)) == pytest.approx(6.0 / 4.0)


def test_mse_rejects_mismatched_or_short_trajectories():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        mse_loss(np.zeros((1, 2)), np.zeros((1, 2)))


# ============ Network ============

def test_network_sizes_and_initialization():
    sizes = network_sizes(2, 1, [16, 16])
    assert sizes == [3, 16, 16, 2]
    params = init_mlp(sizes, seed=0)
    assert params.sizes == sizes
    assert params.n_params == 3 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2
    assert all(np.all(b == 0.0) for _, b in params.layers)
    again = init_mlp(sizes, seed=0)
    assert np.array_equal(params.flatten(), again.flatten())


def test_flatten_and_unflatten_agree():
    params = init_mlp([3, 4, 2], seed=1)
    rebuilt = MlpParams.unflatten(params.flatten(), params.sizes)
    for (w, b), (w2, b2) in zip(params.layers, rebuilt.layers):
        assert np.array_equal(w, w2) and np.array_equal(b, b2)
    with pytest.raises(ValueError):
        MlpParams.unflatten(params.flatten()[:-1], params.sizes)


def test_neural_dynamics_checks_input_width():
    params = init_mlp([3, 2], seed=0)
    with pytest.raises(ValueError):
        neural_dynamics(params, np.zeros(2), np.zeros(2))


def test_exact_linear_network_reproduces_the_rollout():
    system = _linear_system()
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 1, 20, 0.0, seed=4)
    controls, observed = dataset.episodes[0]
    predicted = predict_trajectory(_exact_linear_params(), observed[0], controls, dataset.grid)
    assert predicted == pytest.approx(observed, abs=1e-12)


def test_episode_gradient_matches_finite_differences():
    system = _linear_system()
    dataset = generate_dataset(system, SamplingStrategy.RANDOM_WALK, 1, 8, 0.01, seed=2, walk_sigma=0.3)
    controls, observed = dataset.episodes[0]
    params = init_mlp(network_sizes(2, 1, [4]), seed=3)
    theta = params.flatten()

    _, grad = episode_loss_and_grad(theta, params.sizes, controls, observed, dataset.grid)

    def loss(flat):
        predicted = predict_trajectory(MlpParams.unflatten(np.asarray(flat), params.sizes), observed[0],
                                       controls, dataset.grid)
        return mse_loss(predicted, observed)

    fd = ad.fd_gradient(loss, theta, h=1e-6)
    assert np.all(np.abs(grad - fd) <= 1e-4 * np.maximum(1.0, np.abs(fd)))


# ============ Datasets ============

def test_dataset_is_a_function_of_its_seed():
    system = _linear_system()
    a = generate_dataset(system, SamplingStrategy.UNIFORM, 3, 10, 0.05, seed=11)
    b = generate_dataset(system, SamplingStrategy.UNIFORM, 3, 10, 0.05, seed=11)
    c = generate_dataset(system, SamplingStrategy.UNIFORM, 3, 10, 0.05, seed=12)
    for (u1, x1), (u2, x2) in zip(a.episodes, b.episodes):
        assert np.array_equal(u1, u2) and np.array_equal(x1, x2)
    assert not np.array_equal(a.episodes[0][0], c.episodes[0][0])


def test_dataset_keeps_exact_start_states_and_control_bounds():
    system = _linear_system()
    dataset = generate_dataset(system, SamplingStrategy.RANDOM_WALK, 2, 15, 0.1, seed=0, walk_sigma=2.0)
    assert len(dataset) == 2
    assert len(dataset.grid) == 16
    for controls, states in dataset.episodes:
        assert np.array_equal(states[0], system.x_start)
        assert controls.shape == (16, 1)
        assert np.all(np.abs(controls) <= 1.0)


def test_sampling_strategy_requirements(scalar_lq):
    with pytest.raises(ValueError, match="finite control bounds"):
        generate_dataset(scalar_lq, SamplingStrategy.UNIFORM, 1, 5, 0.0, seed=0)
    with pytest.raises(ValueError, match="candidate"):
        generate_dataset(scalar_lq, SamplingStrategy.AROUND_CANDIDATE, 1, 5, 0.0, seed=0)
    around = generate_dataset(scalar_lq, SamplingStrategy.AROUND_CANDIDATE, 2, 5, 0.0, seed=0,
                              walk_sigma=0.1, candidate=np.zeros((6, 1)))
    assert np.max(np.abs(around.episodes[0][0])) < 1.0


def test_dataset_survives_storage(tmp_path):
    system = make_system("mould-fungicide")
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 2, 6, 0.01, seed=5)
    root = storage.save_dataset(tmp_path, dataset)
    loaded = storage.load_dataset(root)
    assert loaded.strategy == SamplingStrategy.UNIFORM
    assert loaded.seed == 5
    assert loaded.system == "mould-fungicide"
    for (u1, x1), (u2, x2) in zip(dataset.episodes, loaded.episodes):
        assert np.array_equal(u1, u2) and np.array_equal(x1, x2)


# ============ Training and reports ============

def test_training_lowers_the_loss_and_returns_the_best_parameters():
    system = _linear_system()
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 2, 10, 0.0, seed=1)
    cfg = TrainConfig(learning_rate=1e-2, momentum=0.0, train_steps=30, batch_size=2)
    params, history = train_sysid(system, dataset, hidden=[], train_cfg=cfg, seed=0)

    assert len(history) == 30
    losses = [r.loss for r in history]
    assert min(losses) < losses[0]
    best = float(np.mean([episode_loss_and_grad(params.flatten(), params.sizes, u, x, dataset.grid)[0]
                          for u, x in dataset.episodes]))
    assert best == pytest.approx(min(losses), rel=1e-10)


def test_training_is_deterministic():
    system = _linear_system()
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 3, 6, 0.0, seed=1)
    cfg = TrainConfig(learning_rate=1e-2, train_steps=5, batch_size=2)
    a, _ = train_sysid(system, dataset, hidden=[4], train_cfg=cfg, seed=9)
    b, _ = train_sysid(system, dataset, hidden=[4], train_cfg=cfg, seed=9)
    assert np.array_equal(a.flatten(), b.flatten())


@pytest.mark.slow
def test_linear_network_recovers_the_generator():
    system = _linear_system()
    dataset = window_episodes(generate_dataset(system, SamplingStrategy.UNIFORM, 8, 20, 0.0, seed=3), 1)
    cfg = TrainConfig(learning_rate=30.0, momentum=0.9, train_steps=300, batch_size=len(dataset))
    params, _ = train_sysid(system, dataset, hidden=[], train_cfg=cfg, seed=0)
    weight, bias = params.layers[0]
    exact = np.hstack([GENERATOR, INPUT.reshape(2, 1)])
    assert np.linalg.norm(weight - exact) <= 0.05 * np.linalg.norm(exact)
    assert np.linalg.norm(weight[:, :2] - GENERATOR) <= 0.05 * np.linalg.norm(GENERATOR)
    assert np.linalg.norm(bias) <= 0.05 * np.linalg.norm(exact)


def test_vector_field_report_of_an_exact_model():
    system = _linear_system()
    states = np.array([[0.0, 0.0], [1.0, -1.0], [0.5, 2.0]])
    controls = np.array([[-1.0], [1.0]])
    report = vector_field_report(_exact_linear_params(), system, states, controls)
    assert report.true.shape == (6, 2)
    assert report.mean_abs_error == pytest.approx(0.0, abs=1e-12)
    assert report.header() == ["x_0", "x_1", "u_0", "true_0", "true_1", "learned_0", "learned_1",
                               "abs_error_0", "abs_error_1"]
    assert len(report.rows()) == 6


def test_windows_restart_from_the_observed_states():
    system = _linear_system()
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 2, 7, 0.0, seed=0)
    windows = window_episodes(dataset, 3)
    assert len(windows) == 2 * 2
    assert windows.grid == pytest.approx(dataset.grid[:4])
    controls, states = dataset.episodes[1]
    assert np.array_equal(windows.episodes[3][0], controls[3:7])
    assert np.array_equal(windows.episodes[3][1], states[3:7])
    with pytest.raises(ValueError):
        window_episodes(dataset, 8)


def test_field_grid_spans_the_observed_states():
    system = make_system("mould-fungicide")
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 3, 10, 0.0, seed=2)
    states, controls = field_grid(dataset, system, 5, 3)
    observed = np.vstack([x for _, x in dataset.episodes])
    assert states[0, 0] == observed.min() and states[-1, 0] == observed.max()
    assert controls[:, 0] == pytest.approx([0.0, 0.5, 1.0])


@pytest.mark.slow
def test_mould_fungicide_vector_field_beats_the_zero_network():
    system = make_system("mould-fungicide")
    dataset = generate_dataset(system, SamplingStrategy.UNIFORM, 16, 25, 0.0, seed=7)
    cfg = TrainConfig(learning_rate=1.0, momentum=0.9, train_steps=2000, batch_size=16)
    params, history = train_sysid(system, window_episodes(dataset, 1), hidden=[16], train_cfg=cfg, seed=7)

    states, controls = field_grid(dataset, system, 21, 3)
    report = vector_field_report(params, system, states, controls)
    zero_network = float(np.mean(np.abs(report.true)))
    assert report.mean_abs_error * 10.0 <= zero_network
    assert min(r.loss for r in history) < history[0].loss
