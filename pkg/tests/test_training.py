import math

import numpy as np
import pytest

from hebbmem import autodiff as ad
from hebbmem.checkpoint import load_model
from hebbmem.errors import ArgumentError, NumericError
from hebbmem.export import METRICS_HEADER, read_csv
from hebbmem.model import ModelConfig, run_batch
from hebbmem.snn import LifParams, encode_sequence
from hebbmem.tasks import AssociationTaskConfig, evaluate_accuracy, gen_batch, stream_rng
from hebbmem.training import (
    AdamState,
    TrainConfig,
    ablate_memory,
    adam_step,
    batch_rates,
    clip_gradients,
    crossentropy_node,
    global_norm,
    glorot_init,
    init_model_params,
    learning_rate,
    loss_crossentropy,
    rate_gradient_node,
    rate_penalty,
    rate_regularizer,
    rate_regularizer_node,
    rate_slopes,
    spike_rates,
    train_association,
    train_step,
)

SMALL = ModelConfig(tau_sim=20.0, tau_read=10.0, l=12, input_encoder=10, label_encoder=10)
TASK = AssociationTaskConfig()


def test_crossentropy_examples():
    assert loss_crossentropy(np.zeros(30), 4) == pytest.approx(math.log(30), abs=1e-4)
    assert loss_crossentropy(np.array([0.0, 1e6, 0.0]), 2) == pytest.approx(0.0, abs=1e-9)
    assert loss_crossentropy(np.zeros(2), 1) == pytest.approx(math.log(2), abs=1e-4)


def test_crossentropy_errors():
    with pytest.raises(NumericError):
        loss_crossentropy(np.array([0.0, np.nan]), 1)
    with pytest.raises(ArgumentError):
        loss_crossentropy(np.zeros(3), 4)


def test_rate_regularizer_examples():
    assert rate_regularizer({"key": np.zeros((100, 4, 5))}, 1e-5) == 0.0
    raster = np.zeros((10, 2))
    raster[:1, 0] = 1
    raster[:3, 1] = 1
    assert abs(rate_regularizer({"value": raster}, 1e-5) - 5e-7) < 1e-12


def test_rate_regularizer_is_quadratic():
    rng = np.random.default_rng(0)
    raster = (rng.random((50, 3, 7)) > 0.8).astype(float)
    single = rate_regularizer({"a": raster}, 1e-5)
    assert rate_regularizer({"a": 2 * raster}, 1e-5) == pytest.approx(4 * single)


def test_rate_regularizer_node_matches_array_form():
    rng = np.random.default_rng(1)
    raster = (rng.random((20, 3, 4)) > 0.6).astype(float)
    node = rate_regularizer_node({"a": ad.constant(raster)}, 1e-5, 0.05)
    assert node.item() == pytest.approx(rate_regularizer({"a": raster}, 1e-5, 0.05), abs=1e-15)


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(params, {"w": np.zeros(2)}, AdamState.zeros(params), 0.003)
    np.testing.assert_array_equal(new["w"], params["w"])


def test_adam_first_step_size():
    params = {"w": np.array([0.0])}
    new, state = adam_step(params, {"w": np.array([0.5])}, AdamState.zeros(params), 0.003)
    assert new["w"][0] == pytest.approx(-0.003, abs=1e-8)
    assert state.step == 1


def test_adam_constant_gradient_step_stays_near_lr():
    params = {"w": np.array([0.0])}
    state = AdamState.zeros(params)
    for _ in range(5):
        new, state = adam_step(params, {"w": np.array([0.5])}, state, 0.003)
        assert abs(abs(new["w"][0] - params["w"][0]) - 0.003) < 1e-4
        params = new


def test_adam_zero_lr_is_bit_identical():
    params = {"w": np.array([0.123, 4.56])}
    new, _ = adam_step(params, {"w": np.array([1.0, -3.0])}, AdamState.zeros(params), 0.0)
    assert np.array_equal(new["w"], params["w"])


def test_adam_rejects_non_finite_gradients():
    params = {"w": np.zeros(2)}
    with pytest.raises(NumericError):
        adam_step(params, {"w": np.array([np.inf, 0.0])}, AdamState.zeros(params), 0.1)


def test_clip_gradients():
    small = {"a": np.array([6.0, 8.0])}
    assert clip_gradients(small, 40.0)["a"].tolist() == [6.0, 8.0]
    clipped = clip_gradients({"a": np.array([30.0, 40.0])}, 40.0)
    np.testing.assert_allclose(clipped["a"], [24.0, 32.0])
    rng = np.random.default_rng(3)
    big = {"a": rng.standard_normal((5, 5)) * 100, "b": rng.standard_normal(7) * 100}
    assert global_norm(clip_gradients(big, 40.0)) <= 40.0 + 1e-9


def test_glorot_init():
    bound = math.sqrt(2) * math.sqrt(6 / 90)
    w = glorot_init((80, 10), math.sqrt(2), np.random.default_rng(0))
    assert bound == pytest.approx(0.3651, abs=1e-4)
    assert np.all(np.abs(w) <= bound)
    again = glorot_init((80, 10), math.sqrt(2), np.random.default_rng(0))
    assert np.array_equal(w, again)
    big = glorot_init((100, 100), 1.0, np.random.default_rng(1))
    sigma = math.sqrt(6 / 200) / math.sqrt(3) / math.sqrt(big.size)
    assert abs(big.mean()) < 3 * sigma


def test_learning_rate_schedule():
    config = TrainConfig()
    assert learning_rate(config, 0) == 0.003
    assert learning_rate(config, 339) == 0.003
    assert learning_rate(config, 340) == 0.003 * 0.85
    assert learning_rate(config, 1000) == 0.003 * 0.85 ** 2


def test_train_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(lr=0.0)
    with pytest.raises(ArgumentError):
        TrainConfig(lr_decay=1.5)
    with pytest.raises(ArgumentError):
        TrainConfig(clip_norm=0.0)


def test_train_step_reports_and_updates():
    params = init_model_params(SMALL, np.random.default_rng(0))
    before = params.arrays()
    batch = gen_batch(TASK, np.random.default_rng(1), 8)
    config = TrainConfig(micro_batch=4)
    result, adam = train_step(params, SMALL, config, batch, AdamState.zeros(before), 0)
    assert result.loss > 0 and math.isfinite(result.grad_norm)
    assert 0.0 <= result.accuracy <= 1.0
    assert result.reg_loss >= 0.0
    assert adam.step == 1
    assert any(not np.array_equal(before[k], v) for k, v in params.arrays().items())


def test_micro_batches_split_the_same_gradient():
    batch = gen_batch(TASK, np.random.default_rng(2), 8)
    grads = []
    for micro in (8, 2):
        params = init_model_params(SMALL, np.random.default_rng(3))
        train_step(params, SMALL, TrainConfig(micro_batch=micro, lambda_rho=0.0), batch,
                   AdamState.zeros(params.arrays()), 0)
        grads.append(params.grads())
    for name in grads[0]:
        np.testing.assert_allclose(grads[0][name], grads[1][name], rtol=1e-9, atol=1e-12)


def test_regularizer_is_the_same_for_every_micro_batch():
    batch = gen_batch(TASK, np.random.default_rng(4), 8)
    reg_losses, grads = [], []
    for micro in (8, 4, 2):
        params = init_model_params(SMALL, np.random.default_rng(5))
        config = TrainConfig(micro_batch=micro, lambda_rho=1e-3)
        result, _ = train_step(params, SMALL, config, batch, AdamState.zeros(params.arrays()), 0)
        reg_losses.append(result.reg_loss)
        grads.append(params.grads())
    assert reg_losses[0] > 0
    for reg in reg_losses[1:]:
        assert reg == pytest.approx(reg_losses[0], rel=1e-12)
    for other in grads[1:]:
        for name in grads[0]:
            np.testing.assert_allclose(other[name], grads[0][name], rtol=1e-9, atol=1e-12)


def test_batch_rates_match_the_graph_run():
    params = init_model_params(SMALL, np.random.default_rng(6))
    batch = gen_batch(TASK, np.random.default_rng(7), 4)
    out = run_batch(params, SMALL, batch)
    rates = batch_rates(params, SMALL, batch)
    assert set(rates) == {name for name, r in out.rasters.items() if r.values.size}
    expected = rate_regularizer_node(out.rasters, 1e-3, 0.02).item()
    assert rate_penalty(rates, 1e-3, 0.02) == pytest.approx(expected, rel=1e-12)


def test_rate_gradient_node_carries_the_regularizer_gradient():
    rng = np.random.default_rng(8)
    values = rng.random((30, 4, 6))
    grads = []
    for build in ("penalty", "slopes"):
        raster = ad.parameter(values)
        if build == "penalty":
            loss = rate_regularizer_node({"a": raster}, 0.5, 0.1)
        else:
            slopes = rate_slopes({"a": spike_rates(values)}, 0.5, 0.1)
            loss = rate_gradient_node({"a": raster}, slopes)
        ad.backward(loss)
        grads.append(raster.grad)
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-12, atol=1e-15)


def test_regularizer_step_does_not_raise_squared_rates():
    lif = LifParams(theta=0.1, tau_m=20.0)
    rng = np.random.default_rng(9)
    x = rng.random((6, 8))
    start = glorot_init((12, 8), rng=rng) * 0.3 + 0.05

    def squared_rates(w: np.ndarray) -> float:
        with ad.no_grad():
            raster = encode_sequence(x, ad.constant(w), 100, lif).values
        return float(np.sum(spike_rates(raster) ** 2))

    weights = ad.parameter(start)
    raster = encode_sequence(x, weights, 100, lif)
    ad.backward(rate_regularizer_node({"enc": raster}, 1.0))
    direction = weights.grad / np.max(np.abs(weights.grad))
    before = squared_rates(start)
    assert before > 0
    after = [squared_rates(start - eta * direction) for eta in (0.01, 0.05, 0.2)]
    assert all(a <= before for a in after)
    assert after[-1] < before


@pytest.mark.slow
def test_loss_on_a_fixed_batch_drops_within_fifty_iterations():
    model = ModelConfig()
    fixed = gen_batch(TASK, stream_rng(99, "validation"), 64)

    def fixed_loss(params) -> float:
        with ad.no_grad():
            return crossentropy_node(run_batch(params, model, fixed).logits, fixed.targets).item()

    drops = 0
    for seed in range(10):
        train = TrainConfig(iterations=50, batch_size=64, micro_batch=16, seed=seed, log_every=0)
        start = fixed_loss(init_model_params(model, stream_rng(seed, "init"), train.init_gain))
        result = train_association(train, model, TASK)
        drops += fixed_loss(result.params) < start
    assert drops >= 9


def test_zero_iterations_keep_initialization(tmp_path):
    config = TrainConfig(iterations=0)
    result = train_association(config, SMALL, TASK, tmp_path)
    fresh = init_model_params(SMALL, stream_rng(0, "init"), config.init_gain)
    for name, values in fresh.arrays().items():
        assert np.array_equal(result.params.arrays()[name], values)
    loaded, loaded_config, _ = load_model(result.checkpoint_path)
    assert loaded_config == SMALL
    assert read_csv(result.metrics_path) == []


def test_training_log_has_one_row_per_iteration(tmp_path):
    config = TrainConfig(iterations=3, batch_size=4, micro_batch=4, checkpoint_every=2)
    result = train_association(config, SMALL, TASK, tmp_path)
    rows = read_csv(result.metrics_path)
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2]
    assert tuple(rows[0]) == METRICS_HEADER
    assert all(float(r["wall_ms"]) == 0.0 for r in rows)
    assert result.checkpoint_path.is_file()


def test_training_is_deterministic(tmp_path):
    config = TrainConfig(iterations=2, batch_size=4, micro_batch=2)
    train_association(config, SMALL, TASK, tmp_path / "a")
    train_association(config, SMALL, TASK, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b


def test_incompatible_task_is_rejected():
    with pytest.raises(ArgumentError):
        train_association(TrainConfig(iterations=0), SMALL, AssociationTaskConfig(vec_dim=7))


def test_ablation_turns_plasticity_off():
    assert ablate_memory(SMALL).hebbian.plasticity == "off"
    assert SMALL.hebbian.plasticity == "always"


@pytest.mark.slow
def test_desk_association_reaches_ninety_percent(tmp_path):
    model = ModelConfig()
    train = TrainConfig(batch_size=64, iterations=1500, micro_batch=16, log_every=100)
    result = train_association(train, model, TASK, tmp_path)
    assert evaluate_accuracy(result.params, model, TASK, 2000) >= 0.90


@pytest.mark.slow
def test_ablated_memory_falls_to_chance(tmp_path):
    model = ModelConfig()
    train = TrainConfig(batch_size=64, iterations=1500, micro_batch=16, log_every=100)
    result = train_association(train, model, TASK, tmp_path)
    accuracy = evaluate_accuracy(result.params, ablate_memory(model), TASK, 2000)
    assert accuracy < 1 / 3 + 0.05
