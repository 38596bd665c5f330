import numpy as np
import pytest

from hebbmem import autodiff as ad
from hebbmem.checkpoint import save_model
from hebbmem.concentration.env import observation_dim
from hebbmem.concentration.ppo import (
    PpoConfig,
    clipped_surrogate,
    compute_returns,
    evaluate_agent,
    init_policy_params,
    load_policy,
    orthogonal_init,
    policy_forward,
    policy_param_shapes,
    ppo_train,
    rl_model_config,
    sample_actions,
    save_policy,
)
from hebbmem.errors import ArgumentError, CheckpointError
from hebbmem.export import FLIP_HISTORY_HEADER, read_csv
from hebbmem.model import ModelConfig, init_carry
from hebbmem.training import init_model_params

BASE = ModelConfig(tau_sim=20.0, tau_read=10.0, l=12, input_encoder=10)
TINY = PpoConfig(n_pairs=1, n_envs=2, minibatches=1, rollout_steps=3, iterations=2, epochs=1, hidden=8,
                 max_game_steps=20, log_every=1)


def test_returns_without_terminations():
    returns = compute_returns(np.ones(3), np.zeros(3), 0.9, 0.0)
    np.testing.assert_allclose(returns, [2.71, 1.9, 1.0])


def test_returns_stop_at_game_end():
    returns = compute_returns(np.ones(3), np.array([False, True, False]), 0.9, 10.0)
    np.testing.assert_allclose(returns, [1.9, 1.0, 10.0])


def test_full_lambda_advantages_reduce_to_returns():
    rng = np.random.default_rng(0)
    rewards, values = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    dones = rng.random((6, 4)) > 0.7
    bootstrap = rng.standard_normal(4)
    np.testing.assert_allclose(
        compute_returns(rewards, dones, 0.9, bootstrap, values, gae_lambda=1.0),
        compute_returns(rewards, dones, 0.9, bootstrap),
    )


def test_clipped_surrogate():
    ratio = ad.constant(np.array([1.5, 0.5, 1.0]))
    out = clipped_surrogate(ratio, np.array([2.0, -1.0, 3.0]), 0.2)
    np.testing.assert_allclose(out.values, [2.4, -0.8, 3.0])


def test_sample_actions_are_one_based():
    log_probs = np.log(np.array([[1e-12, 1.0 - 2e-12, 1e-12], [1.0 - 2e-12, 1e-12, 1e-12]]))
    np.testing.assert_array_equal(sample_actions(log_probs, np.random.default_rng(0)), [2, 1])


def test_orthogonal_init():
    w = orthogonal_init((8, 5), 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(w.T @ w, np.eye(5), atol=1e-12)
    wide = orthogonal_init((3, 7), 2.0, np.random.default_rng(1))
    np.testing.assert_allclose(wide @ wide.T, 4.0 * np.eye(3), atol=1e-12)


def test_config_validation():
    with pytest.raises(ArgumentError):
        PpoConfig(n_envs=10, minibatches=4)
    with pytest.raises(ArgumentError):
        PpoConfig(clip=1.5)
    assert PpoConfig(n_pairs=3).n_actions == 6


def test_policy_forward_shapes():
    model = rl_model_config(BASE, TINY)
    assert model.input_dim == observation_dim(1)
    params = init_policy_params(model, TINY, np.random.default_rng(0))
    assert set(params.arrays()) == set(policy_param_shapes(model, TINY))
    observations = np.random.default_rng(1).random((3, model.input_dim))
    with ad.no_grad():
        logits, value, _ = policy_forward(params, model, observations, init_carry(params.snn, model, 3))
    assert logits.shape == (3, 2)
    assert value.shape == (3,)


def test_tiny_training_run(tmp_path):
    result = ppo_train(TINY, BASE, tmp_path)
    assert len(result.iteration_mean_flips) == 2
    rows = read_csv(result.history_path)
    assert len(rows) == len(result.history)
    if rows:
        assert tuple(rows[0]) == FLIP_HISTORY_HEADER
    params, model, config, metadata = load_policy(result.checkpoint_path)
    assert config == TINY
    assert model == result.model_config
    assert metadata["iteration"] == 2
    for name, values in result.params.arrays().items():
        assert np.array_equal(params.arrays()[name], values)


def test_training_is_deterministic():
    a = ppo_train(TINY, BASE).params.arrays()
    b = ppo_train(TINY, BASE).params.arrays()
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_evaluation_caps_long_games():
    config = PpoConfig(n_pairs=2, n_envs=4, minibatches=1, hidden=8, max_game_steps=5)
    model = rl_model_config(BASE, config)
    params = init_policy_params(model, config, np.random.default_rng(2))
    evaluation = evaluate_agent(params, model, config, 6)
    assert evaluation.flips.shape == (6,)
    assert evaluation.flips.max() <= 5
    assert evaluation.flips.min() >= 1
    with pytest.raises(ArgumentError):
        evaluate_agent(params, model, config, 0)


def test_policy_checkpoint_round_trip(tmp_path):
    model = rl_model_config(BASE, TINY)
    params = init_policy_params(model, TINY, np.random.default_rng(3))
    path = save_policy(tmp_path / "p.hmem", params, model, TINY, {"iteration": 0})
    loaded, _, _, _ = load_policy(path)
    for name, values in params.arrays().items():
        assert np.array_equal(loaded.arrays()[name], values)


def test_model_checkpoint_is_not_a_policy(tmp_path):
    path = save_model(tmp_path / "m.hmem", init_model_params(BASE, np.random.default_rng(0)), BASE)
    with pytest.raises(CheckpointError):
        load_policy(path)


@pytest.mark.slow
def test_desk_agent_beats_eight_flips(tmp_path):
    from hebbmem.config import resolve_config

    cfg = resolve_config("rl", "desk", n_pairs=2)
    result = ppo_train(cfg.ppo, cfg.model, tmp_path)
    evaluation = evaluate_agent(result.params, result.model_config, cfg.ppo, 1000)
    assert evaluation.mean_flips <= 8.0
