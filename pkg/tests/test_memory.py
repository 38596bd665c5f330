from dataclasses import replace

import numpy as np
import pytest

from hebbmem import autodiff as ad
from hebbmem.diagnostics import fused_memory_gap
from hebbmem.errors import ArgumentError
from hebbmem.memory import (
    HebbianParams,
    MemoryWeights,
    hebbian_update,
    init_memory_state,
    recall_step,
    reset_memory,
    run_memory,
    store_step,
    trace_update,
)

PARAMS = HebbianParams()


def _weights(w_s_key, w_s_value, w_r_key):
    return MemoryWeights(ad.constant(w_s_key), ad.constant(w_s_value), ad.constant(w_r_key))


def _drive(state, z, steps, step_fn=store_step, params=PARAMS):
    keys, values = [], []
    with ad.no_grad():
        for _ in range(steps):
            z_key, z_value, state = step_fn(state, ad.constant(z), params)
            keys.append(z_key.values[0])
            values.append(z_value.values[0])
    return state, np.array(keys), np.array(values)


def test_trace_examples():
    assert trace_update(np.array([0.0]), np.array([0.0]), PARAMS)[0] == 0.0
    assert trace_update(np.array([1.0]), np.array([0.0]), PARAMS)[0] == pytest.approx(0.95123, abs=1e-5)
    assert trace_update(np.array([0.0]), np.array([1.0]), PARAMS)[0] == pytest.approx(0.04877, abs=1e-5)


def test_trace_stays_within_unit_interval():
    rng = np.random.default_rng(0)
    kappa = np.zeros(50)
    for _ in range(500):
        kappa = trace_update(kappa, (rng.random(50) > 0.3).astype(float), PARAMS)
        assert np.all((kappa >= 0.0) & (kappa <= 1.0))
    assert np.all(trace_update(np.zeros(3), np.ones(3), PARAMS) <= 1.0)


def test_trace_shape_mismatch():
    with pytest.raises(ArgumentError):
        trace_update(np.zeros(3), np.zeros(4), PARAMS)


def test_hebbian_examples():
    one = np.ones((1, 1))
    assert hebbian_update(np.full((1, 1), 0.7), np.zeros(1), np.ones(1), PARAMS)[0, 0] == 0.0
    assert hebbian_update(np.zeros((1, 1)), np.ones(1), np.ones(1), PARAMS)[0, 0] == pytest.approx(0.3)
    assert hebbian_update(0.5 * one, np.ones(1), np.ones(1), PARAMS)[0, 0] == pytest.approx(0.0)


def test_hebbian_fixed_point():
    w = np.zeros((3, 3))
    kappa = np.full(3, 0.4)
    for _ in range(2000):
        w = w + hebbian_update(w, kappa, kappa, PARAMS)
    np.testing.assert_allclose(w, PARAMS.fixed_point, atol=1e-6)
    assert PARAMS.fixed_point == pytest.approx(0.5)


def test_hebbian_is_local():
    rng = np.random.default_rng(1)
    w = rng.random((4, 4))
    kk, kv = rng.random(4), rng.random(4)
    before = hebbian_update(w, kk, kv, PARAMS)[2, 1]
    w2 = w.copy()
    w2[0, 0], w2[3, 2], w2[2, 3] = 0.9, 0.1, 0.4
    assert hebbian_update(w2, kk, kv, PARAMS)[2, 1] == before


def test_zero_store_input_is_silent():
    rng = np.random.default_rng(2)
    weights = _weights(rng.random((5, 6)), rng.random((5, 6)), rng.random((5, 4 + 5)))
    state = init_memory_state(weights)
    state, keys, values = _drive(state, np.zeros((1, 6)), 50)
    assert not keys.any() and not values.any()
    assert not state.w_assoc.values.any()


def test_store_dimension_mismatch():
    weights = _weights(np.ones((3, 4)), np.ones((3, 4)), np.ones((3, 2 + 3)))
    with pytest.raises(ArgumentError):
        store_step(init_memory_state(weights), ad.constant(np.ones((1, 5))), PARAMS)
    with pytest.raises(ArgumentError):
        recall_step(init_memory_state(weights), ad.constant(np.ones((1, 4))), PARAMS)


def _pair_weights():
    # store input 0 drives key neuron 0, store input 1 drives value neuron 1
    w_s_key = np.array([[10.0, 0.0], [0.0, 0.0]])
    w_s_value = np.array([[0.0, 0.0], [0.0, 10.0]])
    return _weights(w_s_key, w_s_value, np.zeros((2, 2 + 2)))


def test_coactive_key_and_value_build_association():
    state = init_memory_state(_pair_weights())
    state, keys, values = _drive(state, np.ones((1, 2)), 100)
    w = state.w_assoc.values[0]
    assert keys[:, 0].sum() > 0 and values[:, 1].sum() > 0
    assert w[1, 0] > 0.0
    assert w[0, 0] == 0.0 and w[1, 1] == 0.0
    assert np.all((w >= 0.0) & (w <= PARAMS.w_max))


def test_association_saturates_below_w_max():
    state = init_memory_state(_pair_weights())
    state, _, _ = _drive(state, np.ones((1, 2)), 1000)
    w = state.w_assoc.values[0, 1, 0]
    assert 0.3 < w <= PARAMS.fixed_point + 1e-9


def test_keys_never_spiking_leave_memory_untouched():
    w_s_value = np.eye(2) * 10.0
    state = init_memory_state(_weights(np.zeros((2, 2)), w_s_value, np.zeros((2, 4))))
    state, keys, values = _drive(state, np.ones((1, 2)), 100)
    assert not keys.any() and values.any()
    assert not state.w_assoc.values.any()


def test_recall_with_empty_memory_is_silent():
    w_r_key = np.zeros((3, 2 + 3))
    w_r_key[:, 0] = 10.0
    state = init_memory_state(_weights(np.zeros((3, 2)), np.zeros((3, 2)), w_r_key), d_feedback=1.0)
    _, keys, values = _drive(state, np.array([[1.0, 0.0]]), 100, recall_step)
    assert keys.any()
    assert not values.any()


def test_store_then_recall_round_trip():
    # keys {0, 1} paired with values {0, 1}; values {2, 3} are distractors
    l = 4
    w_s_key = np.zeros((l, 4))
    w_s_key[0, 0] = w_s_key[1, 1] = 10.0
    w_s_value = np.zeros((l, 4))
    w_s_value[0, 2] = w_s_value[1, 3] = 10.0
    w_r_key = np.zeros((l, 2 + l))
    w_r_key[0, 0] = w_r_key[1, 0] = 10.0
    state = init_memory_state(_weights(w_s_key, w_s_value, w_r_key))

    state, _, _ = _drive(state, np.array([[1.0, 1.0, 1.0, 1.0]]), 100)
    _, _, values = _drive(state, np.array([[1.0, 0.0]]), 100, recall_step)
    counts = values.sum(axis=0)
    assert counts[:2].sum() > 0
    assert counts[2:].sum() == 0


def test_overwrite_weakens_older_association():
    l = 3
    w_s_key = np.zeros((l, 3))
    w_s_key[0, 0] = 10.0
    w_s_value = np.zeros((l, 3))
    w_s_value[1, 1] = w_s_value[2, 2] = 10.0
    state = init_memory_state(_weights(w_s_key, w_s_value, np.zeros((l, 3 + l))))

    state, _, _ = _drive(state, np.array([[1.0, 1.0, 0.0]]), 100)
    first = state.w_assoc.values[0, 1, 0]
    # let both layers fall silent so the first value neuron stops firing
    state, _, _ = _drive(state, np.zeros((1, 3)), 150)
    state, _, _ = _drive(state, np.array([[1.0, 0.0, 1.0]]), 100)
    w = state.w_assoc.values[0]
    assert w[2, 0] > w[1, 0]
    assert w[1, 0] < first


def test_feedback_delay_is_exact():
    l, depth = 3, 5
    w_r_key = np.zeros((l, 1 + l))
    w_r_key[:, 0] = 10.0
    state = init_memory_state(_weights(np.zeros((l, 1)), np.zeros((l, 1)), w_r_key), d_feedback=float(depth))
    state = replace(state, w_assoc=ad.constant(np.ones((1, l, l))))
    assert len(state.feedback_buffer) == depth

    emitted = []
    with ad.no_grad():
        for t in range(40):
            # the delayed value fed into this step
            delayed = state.feedback_buffer[0].values[0].copy()
            expected = emitted[t - depth] if t >= depth else np.zeros(l)
            np.testing.assert_array_equal(delayed, expected)
            _, z_value, state = recall_step(state, ad.constant(np.ones((1, 1))), PARAMS)
            emitted.append(z_value.values[0])
    assert np.array(emitted).any()


def test_reset_memory_clears_everything():
    state = init_memory_state(_pair_weights())
    state, _, _ = _drive(state, np.ones((1, 2)), 50)
    assert state.w_assoc.values.any()
    fresh = reset_memory(state)
    assert not fresh.w_assoc.values.any()
    assert not fresh.kappa_key.values.any() and not fresh.kappa_value.values.any()
    assert not fresh.key_state.membrane.values.any()
    assert all(not z.values.any() for z in fresh.feedback_buffer)


def test_reset_makes_episodes_independent():
    weights = _pair_weights()
    first, _, _ = _drive(init_memory_state(weights), np.array([[1.0, 0.0]]), 60)
    _, _, after_reset = _drive(reset_memory(first), np.array([[0.0, 1.0]]), 60)
    _, _, fresh = _drive(init_memory_state(weights), np.array([[0.0, 1.0]]), 60)
    assert np.array_equal(after_reset, fresh)


def test_weights_stay_bounded_under_random_spikes():
    # a thousand 500-step episodes run side by side as one batch
    rng = np.random.default_rng(3)
    batch, l, d = 1000, 8, 6
    weights = _weights(rng.random((l, d)) * 3, rng.random((l, d)) * 3, rng.random((l, d + l)) * 3)
    state = init_memory_state(weights, batch)
    with ad.no_grad():
        for t in range(500):
            z = ad.constant((rng.random((batch, d)) > 0.5).astype(float))
            step = store_step if t < 400 else recall_step
            _, _, state = step(state, z, PARAMS)
            w = state.w_assoc.values
            assert np.all((w >= 0.0) & (w <= PARAMS.w_max))
    assert state.w_assoc.values.any()


def test_fixed_point_with_saturated_traces():
    w = np.zeros((1, 1))
    for _ in range(200):
        w = w + hebbian_update(w, np.ones(1), np.ones(1), PARAMS)
    assert abs(w[0, 0] - 0.5) < 1e-6


@pytest.mark.parametrize("trials", [10, pytest.param(200, marks=pytest.mark.slow)])
def test_recall_finds_bound_partner(trials):
    # five key groups and five value groups of ten neurons; each trial binds them by its own permutation
    groups, size = 5, 10
    l = groups * size
    w_s_key = np.zeros((l, 2 * groups))
    w_s_value = np.zeros((l, 2 * groups))
    w_r_key = np.zeros((l, groups + l))
    for g in range(groups):
        members = slice(g * size, (g + 1) * size)
        w_s_key[members, g] = 10.0
        w_s_value[members, groups + g] = 10.0
        w_r_key[members, g] = 10.0
    state = init_memory_state(_weights(w_s_key, w_s_value, w_r_key), trials)
    rng = np.random.default_rng(4)
    partner = np.stack([rng.permutation(groups) for _ in range(trials)])
    rows = np.arange(trials)

    def run(step_fn, z, steps):
        nonlocal state
        counts = np.zeros((trials, l))
        for _ in range(steps):
            _, z_value, state = step_fn(state, ad.constant(z), PARAMS)
            counts += z_value.values
        return counts

    with ad.no_grad():
        for g in range(groups):
            z = np.zeros((trials, 2 * groups))
            z[:, g] = 1.0
            z[rows, groups + partner[:, g]] = 1.0
            run(store_step, z, 100)
            run(store_step, np.zeros((trials, 2 * groups)), 150)

        hits = 0
        for g in range(groups):
            z = np.zeros((trials, groups))
            z[:, g] = 1.0
            counts = run(recall_step, z, 100)
            run(recall_step, np.zeros((trials, groups)), 150)
            per_group = counts.reshape(trials, groups, size).sum(axis=2)
            norms = np.linalg.norm(counts, axis=1) * np.sqrt(size)
            similarity = per_group / np.maximum(norms, 1e-12)[:, None]
            bound = similarity[rows, partner[:, g]]
            others = np.where(np.eye(groups, dtype=bool)[partner[:, g]], -np.inf, similarity)
            hits += int(np.sum(bound > others.max(axis=1)))
    assert hits >= 0.95 * groups * trials


def test_plasticity_modes():
    weights = _pair_weights()
    off = replace(PARAMS, plasticity="off")
    state, _, _ = _drive(init_memory_state(weights), np.ones((1, 2)), 50, params=off)
    assert not state.w_assoc.values.any()

    store_only = replace(PARAMS, plasticity="store_only")
    stored, _, _ = _drive(init_memory_state(weights), np.ones((1, 2)), 50, params=store_only)
    recalled, _, _ = _drive(stored, np.ones((1, 2)), 20, recall_step, params=store_only)
    assert np.array_equal(stored.w_assoc.values, recalled.w_assoc.values)

    with pytest.raises(ArgumentError):
        HebbianParams(plasticity="sometimes")


def test_gradient_reaches_store_weights():
    l, d = 2, 2
    w_s_key = ad.parameter(np.array([[10.0, 0.0], [0.0, 0.0]]))
    w_s_value = ad.parameter(np.array([[0.0, 0.0], [0.0, 10.0]]))
    w_r_key = ad.parameter(np.array([[0.0, 0.0, 0.0, 0.0], [10.0, 0.0, 0.0, 0.0]]))
    state = init_memory_state(MemoryWeights(w_s_key, w_s_value, w_r_key))
    for _ in range(30):
        _, _, state = store_step(state, ad.constant(np.ones((1, d))), PARAMS)
    total = None
    for _ in range(30):
        _, z_value, state = recall_step(state, ad.constant(np.array([[1.0, 0.0]])), PARAMS)
        total = z_value if total is None else ad.add(total, z_value)
    ad.backward(ad.sum(total))
    assert w_s_value.grad is not None
    assert np.all(np.isfinite(w_s_value.grad))


@pytest.mark.parametrize("plasticity", ["always", "store_only", "off"])
@pytest.mark.parametrize("seed", [0, 1])
def test_run_memory_matches_memory_step(plasticity, seed):
    assert fused_memory_gap(seed, plasticity) < 1e-9


def test_run_memory_replays_stepped_store():
    weights = _pair_weights()
    stepped, keys, values = _drive(init_memory_state(weights), np.ones((1, 2)), 50)
    with ad.no_grad():
        out = run_memory(init_memory_state(weights), ad.constant(np.ones((50, 1, 2))), None, PARAMS)
    np.testing.assert_array_equal(out.key_raster.values[:, 0], keys)
    np.testing.assert_array_equal(out.value_raster.values[:, 0], values)
    np.testing.assert_allclose(out.state.w_assoc.values, stepped.w_assoc.values, rtol=1e-12, atol=1e-15)
    assert out.state.w_assoc.values[0, 1, 0] > 0
    assert not out.key_raster.requires_grad


def test_run_memory_rejects_bad_inputs():
    state = init_memory_state(_pair_weights())
    with pytest.raises(ArgumentError):
        run_memory(state, None, None, PARAMS)
    with pytest.raises(ArgumentError):
        run_memory(state, ad.constant(np.ones((10, 1, 3))), None, PARAMS)
    with pytest.raises(ArgumentError):
        run_memory(state, ad.constant(np.ones((10, 1, 2))), ad.constant(np.ones((9, 1, 2))), PARAMS)
