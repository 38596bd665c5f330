#==========================================================
# smooth_op_cases, lif_two_step_gradient, fused_encoder_gap, fused_memory_gap
# run_gradcheck_suite
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import logging
from typing import Callable

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .memory import (
    HebbianParams,
    MemoryWeights,
    hebbian_step,
    init_memory_state,
    memory_step,
    run_memory,
    trace_step,
)
from .snn import LifLayerState, LifParams, encode_sequence, leaky_integrate, lif_step
from .training import crossentropy_node

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4


def smooth_op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One small graph per smooth op kind, with parameter arrays to check it at."""
    x3 = ad.constant(rng.random((2, 3)))
    x10 = [ad.constant(rng.random((1, 4))) for _ in range(10)]
    targets = np.array([3])
    hebb = HebbianParams()

    def linear_steps(w):
        return ad.sum(ad.add_n([ad.matmul(x, w) for x in x10]))

    def mlp(w, b):
        return ad.sum(ad.square(ad.tanh(ad.add_bias(ad.matmul(x3, w), b))))

    def elementwise(a, b):
        y = ad.log(ad.shift(ad.exp(ad.mul(a, b)), 1.0))
        return ad.mean(ad.sub(ad.minimum(y, ad.scale(b, 0.7)), ad.clip(a, 0.2, 0.8)))

    def hebbian(w, kk, kv):
        return ad.sum(ad.square(hebbian_step(w, kk, kv, hebb)))

    def traces(kappa, z):
        return ad.sum(ad.square(trace_step(kappa, z, hebb)))

    def recurrent(w, z):
        y = ad.bmatvec(w, z)
        m = ad.row_mask(ad.concat([y, z]), np.array([1.0, 0.0]))
        return ad.sum(ad.mul(m, m), axis=None)

    def membrane(v, i, z):
        return ad.sum(ad.square(leaky_integrate(v, i, z, 0.95, 0.05, 0.1)))

    return {
        "quadratic": (lambda w: ad.sum(ad.square(w)), [rng.standard_normal(5)]),
        "softmax_crossentropy": (lambda z: crossentropy_node(z, targets), [rng.standard_normal((1, 5))]),
        "linear_sum_10_steps": (linear_steps, [rng.standard_normal((3, 4))]),
        "tanh_mlp": (mlp, [rng.standard_normal((4, 3)), rng.standard_normal(4)]),
        "elementwise": (elementwise, [rng.random((2, 3)), rng.random((2, 3))]),
        "hebbian_update": (hebbian, [rng.random((2, 3, 3)), rng.random((2, 3)), rng.random((2, 3))]),
        "trace_update": (traces, [rng.random((2, 3)), rng.random((2, 3))]),
        "bmatvec_concat_mask": (recurrent, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4))]),
        "leaky_integrate": (membrane, [rng.standard_normal((2, 3)) for _ in range(3)]),
    }


def lif_two_step_gradient(w: float = 2.46, x: float = 1.0, params: LifParams = LifParams()) -> tuple[float, float]:
    """(backward, hand-derived) d(z2 + V2)/dw for one neuron driven by I = w x from rest.

    Step 1 cannot fire from V0 = 0, so V1 = (1 - a) w x; step 2 fires on V1 and
    V2 = a V1 + (1 - a) w x - theta z2, with dz2/dV1 = max(0, 1 - |v|)/theta.
    """
    weight = ad.parameter(np.array([[w]]))
    current = ad.matmul(ad.constant(np.array([[x]])), weight)
    state = LifLayerState.zeros(1, 1)
    _, state = lif_step(state, current, params)
    z2, state = lif_step(state, current, params)
    ad.backward(ad.sum(ad.add(z2, state.membrane)))
    analytic = float(weight.grad[0, 0])

    a, theta = params.alpha, params.theta
    v1 = (1.0 - a) * w * x
    dv1 = (1.0 - a) * x
    surrogate = max(0.0, 1.0 - abs((v1 - theta) / theta)) / theta
    dv2 = a * dv1 + (1.0 - a) * x - theta * surrogate * dv1
    return analytic, surrogate * dv1 + dv2


#------------------Fused sequences against the step graph-------------------
def _relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0))


def _stack_steps(nodes: list[ad.ComputeNode]) -> ad.ComputeNode:
    return ad.concat([ad.reshape(z, (1,) + z.shape) for z in nodes], axis=0)


def _step_of(raster: ad.ComputeNode, t: int) -> ad.ComputeNode:
    return ad.reshape(ad.take_steps(raster, t, t + 1), raster.shape[1:])


def _compare(run: Callable[[bool], tuple[list[np.ndarray], list[ad.ComputeNode]]]) -> float:
    """Run a case fused and step by step; worst gap over forward values and gradients."""
    fused_values, fused_params = run(True)
    step_values, step_params = run(False)
    gaps = [_relative_gap(a, b) for a, b in zip(fused_values, step_values)]
    for a, b in zip(fused_params, step_params):
        zeros = np.zeros_like(a.values)
        gaps.append(_relative_gap(zeros if a.grad is None else a.grad, zeros if b.grad is None else b.grad))
    return max(gaps)


def fused_encoder_gap(seed: int = 0, steps: int = 40, params: LifParams = LifParams()) -> float:
    """encode_sequence against lif_step driven item by item."""
    rng = np.random.default_rng(seed)
    x = rng.random((2, 3, 4))
    w0 = rng.uniform(-0.5, 1.5, (5, 4))
    projection = rng.standard_normal((2 * steps, 3, 5))

    def run(fused: bool):
        w = ad.parameter(w0, name="w_enc")
        if fused:
            raster = encode_sequence(x, w, steps, params)
        else:
            spikes = []
            for item in x:
                current = ad.matmul(ad.constant(item), w)
                state = LifLayerState.zeros(5, 3)
                for _ in range(steps):
                    z, state = lif_step(state, current, params)
                    spikes.append(z)
            raster = _stack_steps(spikes)
        ad.backward(ad.sum(ad.mul(raster, ad.constant(projection))))
        return [raster.values], [w]

    return _compare(run)


def fused_memory_gap(seed: int = 0, plasticity: str = "always", steps: int = 20) -> float:
    """run_memory against memory_step over a store, a recall and a combined phase."""
    rng = np.random.default_rng(seed)
    l, d, d_recall, batch = 5, 4, 3, 2
    hebb = HebbianParams(plasticity=plasticity)
    arrays = {
        "w_s_key": rng.uniform(-0.2, 0.6, (l, d)),
        "w_s_value": rng.uniform(-0.2, 0.6, (l, d)),
        "w_r_key": rng.uniform(-0.2, 0.6, (l, d_recall + l)),
        "store": (rng.random((steps, batch, d)) < 0.4).astype(np.float64),
        "recall": (rng.random((steps, batch, d_recall)) < 0.4).astype(np.float64),
    }
    projections = [rng.standard_normal((3 * steps, batch, l)) for _ in range(2)] + [rng.standard_normal((batch, l, l))]

    def run(fused: bool):
        nodes = {name: ad.parameter(a, name=name) for name, a in arrays.items()}
        weights = MemoryWeights(nodes["w_s_key"], nodes["w_s_value"], nodes["w_r_key"])
        state = init_memory_state(weights, batch, d_feedback=2.0)
        phases = [(nodes["store"], None), (None, nodes["recall"]), (nodes["store"], nodes["recall"])]
        if fused:
            keys, values = [], []
            for z_store, z_recall in phases:
                out = run_memory(state, z_store, z_recall, hebb)
                keys.append(out.key_raster)
                values.append(out.value_raster)
                state = out.state
            key_raster, value_raster = ad.concat(keys, axis=0), ad.concat(values, axis=0)
        else:
            keys, values = [], []
            for z_store, z_recall in phases:
                for t in range(steps):
                    z_key, z_value, state = memory_step(
                        state,
                        None if z_store is None else _step_of(z_store, t),
                        None if z_recall is None else _step_of(z_recall, t),
                        hebb,
                    )
                    keys.append(z_key)
                    values.append(z_value)
            key_raster, value_raster = _stack_steps(keys), _stack_steps(values)
        outputs = [key_raster, value_raster, state.w_assoc]
        terms = [ad.sum(ad.mul(node, ad.constant(p))) for node, p in zip(outputs, projections)]
        terms += [ad.sum(state.value_state.membrane), ad.sum(state.kappa_key), ad.sum(state.feedback_buffer[0])]
        ad.backward(ad.add_n(terms))
        return [node.values for node in outputs], list(nodes.values())

    return _compare(run)


def run_gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errors = {}
    for name, (function, params) in smooth_op_cases(rng).items():
        errors[name] = ad.grad_check(function, params, eps)
        logger.debug("grad_check %s: %.3e", name, errors[name])
    analytic, expected = lif_two_step_gradient()
    errors["lif_two_step_surrogate"] = abs(analytic - expected) / max(1.0, abs(expected))
    errors["lif_encode_sequence"] = fused_encoder_gap(seed)
    for mode in ("always", "store_only"):
        errors[f"memory_run_{mode}"] = fused_memory_gap(seed, mode)
    return errors
