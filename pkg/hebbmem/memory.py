#==========================================================
# HebbianParams, MemoryLayout, HebbianMemoryState
# trace_update, hebbian_update, store_step, recall_step, run_memory, reset_memory
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .autodiff import ComputeNode
from .errors import ArgumentError
from .snn import LifLayerState, LifParams, lif_step

logger = logging.getLogger(__name__)

PLASTICITY_MODES = ("always", "store_only", "off")


#------------------Parameters-------------------
@dataclass(frozen=True)
class HebbianParams:
    gamma_plus: float = 0.3
    gamma_minus: float = 0.3
    w_max: float = 1.0
    tau_trace: float = 20.0
    c: float = 0.2
    dt: float = 1.0
    plasticity: str = "always"

    def __post_init__(self):
        if self.gamma_plus <= 0 or self.gamma_minus <= 0:
            raise ArgumentError("gamma_plus and gamma_minus must be positive")
        if self.w_max <= 0:
            raise ArgumentError("w_max must be positive")
        if self.tau_trace <= 0 or self.dt <= 0:
            raise ArgumentError("tau_trace and dt must be positive")
        if self.plasticity not in PLASTICITY_MODES:
            raise ArgumentError(f"plasticity must be one of {PLASTICITY_MODES}, got {self.plasticity!r}")

    @property
    def decay(self) -> float:
        return math.exp(-self.dt / self.tau_trace)

    @property
    def fixed_point(self) -> float:
        """Weight reached under constant, equal, nonzero traces."""
        return self.gamma_plus * self.w_max / (self.gamma_plus + self.gamma_minus)


@dataclass(frozen=True)
class MemoryLayout:
    """l key/value neurons, d store-path inputs, d_recall recall-path inputs (defaults to d)."""

    l: int = 100
    d: int = 80
    d_recall: Optional[int] = None

    def __post_init__(self):
        if self.l <= 0 or self.d <= 0 or self.recall_dim <= 0:
            raise ArgumentError(f"layout sizes must be positive: {self}")

    @property
    def recall_dim(self) -> int:
        return self.d if self.d_recall is None else self.d_recall


#------------------State-------------------
@dataclass
class MemoryWeights:
    """Learned projections into the key and value layers."""

    w_s_key: ComputeNode
    w_s_value: ComputeNode
    w_r_key: ComputeNode

    @property
    def layout(self) -> MemoryLayout:
        l, d = self.w_s_key.shape
        return MemoryLayout(l=l, d=d, d_recall=self.w_r_key.shape[1] - l)


@dataclass
class HebbianMemoryState:
    w_assoc: ComputeNode
    kappa_key: ComputeNode
    kappa_value: ComputeNode
    key_state: LifLayerState
    value_state: LifLayerState
    feedback_buffer: tuple[ComputeNode, ...]
    weights: MemoryWeights
    d_feedback: float

    @property
    def w_s_key(self) -> ComputeNode:
        return self.weights.w_s_key

    @property
    def w_s_value(self) -> ComputeNode:
        return self.weights.w_s_value

    @property
    def w_r_key(self) -> ComputeNode:
        return self.weights.w_r_key

    @property
    def batch(self) -> int:
        return self.w_assoc.shape[0]

    def detach(self) -> "HebbianMemoryState":
        """Same values, no history: the truncation point for backpropagation."""
        return replace(
            self,
            w_assoc=self.w_assoc.detach(),
            kappa_key=self.kappa_key.detach(),
            kappa_value=self.kappa_value.detach(),
            key_state=self.key_state.detach(),
            value_state=self.value_state.detach(),
            feedback_buffer=tuple(z.detach() for z in self.feedback_buffer),
        )

    def take_rows(self, rows: np.ndarray) -> "HebbianMemoryState":
        """Detached copy of the selected batch rows (minibatch re-simulation)."""
        return replace(
            self,
            w_assoc=ad.constant(self.w_assoc.values[rows]),
            kappa_key=ad.constant(self.kappa_key.values[rows]),
            kappa_value=ad.constant(self.kappa_value.values[rows]),
            key_state=self.key_state.take_rows(rows),
            value_state=self.value_state.take_rows(rows),
            feedback_buffer=tuple(ad.constant(z.values[rows]) for z in self.feedback_buffer),
        )

    def reset_rows(self, keep: np.ndarray) -> "HebbianMemoryState":
        """Zero every per-episode quantity of the batch rows where keep is false."""
        return replace(
            self,
            w_assoc=ad.row_mask(self.w_assoc, keep),
            kappa_key=ad.row_mask(self.kappa_key, keep),
            kappa_value=ad.row_mask(self.kappa_value, keep),
            key_state=self.key_state.reset_rows(keep),
            value_state=self.value_state.reset_rows(keep),
            feedback_buffer=tuple(ad.row_mask(z, keep) for z in self.feedback_buffer),
        )


def feedback_steps(d_feedback: float, dt: float) -> int:
    steps = int(round(d_feedback / dt))
    if steps < 1:
        raise ArgumentError(f"d_feedback={d_feedback} must be at least one time step ({dt})")
    return steps


def init_memory_state(
    weights: MemoryWeights,
    batch: int = 1,
    d_feedback: float = 1.0,
    dt: float = 1.0,
) -> HebbianMemoryState:
    l = weights.layout.l
    depth = feedback_steps(d_feedback, dt)
    return HebbianMemoryState(
        w_assoc=ad.constant(np.zeros((batch, l, l))),
        kappa_key=ad.constant(np.zeros((batch, l))),
        kappa_value=ad.constant(np.zeros((batch, l))),
        key_state=LifLayerState.zeros(l, batch),
        value_state=LifLayerState.zeros(l, batch),
        feedback_buffer=tuple(ad.constant(np.zeros((batch, l))) for _ in range(depth)),
        weights=weights,
        d_feedback=d_feedback,
    )


def reset_memory(state: HebbianMemoryState, dt: float = 1.0) -> HebbianMemoryState:
    return init_memory_state(state.weights, state.batch, state.d_feedback, dt)


#------------------Traces-------------------
def trace_update(kappa: np.ndarray, spikes: np.ndarray, params: HebbianParams) -> np.ndarray:
    """Decay first, then add (1 - decay) for every spike of this step."""
    kappa = np.asarray(kappa, dtype=np.float64)
    spikes = np.asarray(spikes, dtype=np.float64)
    if kappa.shape != spikes.shape:
        raise ArgumentError(f"trace {kappa.shape} and spikes {spikes.shape} differ in shape")
    decay = params.decay
    return decay * kappa + (1.0 - decay) * spikes


def trace_step(kappa: ComputeNode, spikes: ComputeNode, params: HebbianParams) -> ComputeNode:
    decay = params.decay
    return ad.make_node(
        trace_update(kappa.values, spikes.values, params),
        (kappa, spikes),
        "trace",
        lambda g: (decay * g, (1.0 - decay) * g),
    )


#------------------Hebbian rule-------------------
def hebbian_update(
    w: np.ndarray,
    kappa_key: np.ndarray,
    kappa_value: np.ndarray,
    params: HebbianParams,
) -> np.ndarray:
    """dW[k, j] = g+ (w_max - W[k, j]) kv[k] kk[j] - g- W[k, j] kk[j]^2.

    Rows index value neurons, columns key neurons; leading axes are batch axes.
    """
    w = np.asarray(w, dtype=np.float64)
    kk = np.asarray(kappa_key, dtype=np.float64)[..., None, :]
    kv = np.asarray(kappa_value, dtype=np.float64)[..., :, None]
    return params.gamma_plus * (params.w_max - w) * kv * kk - params.gamma_minus * w * kk * kk


def hebbian_step(
    w: ComputeNode,
    kappa_key: ComputeNode,
    kappa_value: ComputeNode,
    params: HebbianParams,
) -> ComputeNode:
    """W(t + dt) = W(t) + dW(t), differentiated through W and both traces."""
    wv, kk, kv = w.values, kappa_key.values, kappa_value.values
    gp, gm, w_max = params.gamma_plus, params.gamma_minus, params.w_max

    def backward(g):
        room = g * (w_max - wv)
        g_w = g * (1.0 - gp * kv[:, :, None] * kk[:, None, :] - gm * kk[:, None, :] ** 2)
        g_kv = gp * (room @ kk[:, :, None])[:, :, 0]
        g_kk = gp * (kv[:, None, :] @ room)[:, 0, :] - 2.0 * gm * kk * (g * wv).sum(axis=1)
        return g_w, g_kk, g_kv

    return ad.make_node(wv + hebbian_update(wv, kk, kv, params), (w, kappa_key, kappa_value), "hebbian", backward)


#------------------Network step-------------------
def memory_step(
    state: HebbianMemoryState,
    z_store: Optional[ComputeNode],
    z_recall: Optional[ComputeNode],
    params: HebbianParams,
    lif: LifParams = LifParams(),
    beta: float = 1.0,
) -> tuple[ComputeNode, ComputeNode, HebbianMemoryState]:
    """Advance the key/value layers by one step with either or both pathways driven.

    Currents and spikes use W_assoc(t); the Hebbian change is applied afterwards and
    uses traces that already include this step's spikes. The associative current
    into the value layer carries the factor c whenever the store path is driven.
    """
    if z_store is None and z_recall is None:
        raise ArgumentError("memory_step needs a store input, a recall input, or both")
    layout = state.weights.layout
    batch = state.batch
    key_parts: list[ComputeNode] = []
    value_parts: list[ComputeNode] = []

    if z_store is not None:
        z_store = ad.as_node(z_store)
        if z_store.shape != (batch, layout.d):
            raise ArgumentError(f"store input {z_store.shape} does not match ({batch}, {layout.d})")
        key_parts.append(ad.matmul(z_store, state.w_s_key))
        value_parts.append(ad.matmul(z_store, state.w_s_value))
    if z_recall is not None:
        z_recall = ad.as_node(z_recall)
        if z_recall.shape != (batch, layout.recall_dim):
            raise ArgumentError(f"recall input {z_recall.shape} does not match ({batch}, {layout.recall_dim})")
        delayed_value = state.feedback_buffer[0]
        key_parts.append(ad.matmul(ad.concat([z_recall, delayed_value]), state.w_r_key))

    i_key = key_parts[0] if len(key_parts) == 1 else ad.add_n(key_parts)
    z_key, key_state = lif_step(state.key_state, i_key, lif, beta)

    assoc = ad.bmatvec(state.w_assoc, z_key)
    value_parts.append(ad.scale(assoc, params.c) if z_store is not None else assoc)
    i_value = value_parts[0] if len(value_parts) == 1 else ad.add_n(value_parts)
    z_value, value_state = lif_step(state.value_state, i_value, lif, beta)

    kappa_key = trace_step(state.kappa_key, z_key, params)
    kappa_value = trace_step(state.kappa_value, z_value, params)
    plastic = params.plasticity == "always" or (params.plasticity == "store_only" and z_store is not None)
    w_assoc = hebbian_step(state.w_assoc, kappa_key, kappa_value, params) if plastic else state.w_assoc

    next_state = replace(
        state,
        w_assoc=w_assoc,
        kappa_key=kappa_key,
        kappa_value=kappa_value,
        key_state=key_state,
        value_state=value_state,
        feedback_buffer=state.feedback_buffer[1:] + (z_value,),
    )
    return z_key, z_value, next_state


def store_step(
    state: HebbianMemoryState,
    z_s_enc: ComputeNode,
    params: HebbianParams,
    lif: LifParams = LifParams(),
    beta: float = 1.0,
) -> tuple[ComputeNode, ComputeNode, HebbianMemoryState]:
    return memory_step(state, z_s_enc, None, params, lif, beta)


def recall_step(
    state: HebbianMemoryState,
    z_r_enc: ComputeNode,
    params: HebbianParams,
    lif: LifParams = LifParams(),
    beta: float = 1.0,
) -> tuple[ComputeNode, ComputeNode, HebbianMemoryState]:
    return memory_step(state, None, z_r_enc, params, lif, beta)


#------------------Sequence core-------------------
def _hebbian_factor(kk: np.ndarray, kv: np.ndarray, params: HebbianParams, out: np.ndarray) -> np.ndarray:
    """A[k, j] = 1 - g- kk[j]^2 - g+ kv[k] kk[j], the factor W(t + dt) carries of W(t)."""
    np.multiply((-params.gamma_plus * kv)[:, :, None], kk[:, None, :], out=out)
    out += (1.0 - params.gamma_minus * kk * kk)[:, None, :]
    return out


def _hebbian_into(w: np.ndarray, kk: np.ndarray, kv: np.ndarray, params: HebbianParams,
                  out: np.ndarray, scratch: np.ndarray) -> None:
    """out = W + dW written as (W - w_max) * A + w_max * (1 - g- kk^2)."""
    _hebbian_factor(kk, kv, params, scratch)
    np.subtract(w, params.w_max, out=out)
    out *= scratch
    out += (params.w_max * (1.0 - params.gamma_minus * kk * kk))[:, None, :]


def _hebbian_grads(g: np.ndarray, w: np.ndarray, kk: np.ndarray, kv: np.ndarray, params: HebbianParams,
                   scratch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Turn g = dL/dW(t + dt) into dL/dW(t) in place and return (dL/dkk, dL/dkv)."""
    gp, gm, w_max = params.gamma_plus, params.gamma_minus, params.w_max
    np.subtract(w_max, w, out=scratch)
    scratch *= g
    g_cols = w_max * g.sum(axis=1) - scratch.sum(axis=1)
    g_kv = gp * np.matmul(scratch, kk[:, :, None])[:, :, 0]
    g_kk = gp * np.matmul(kv[:, None, :], scratch)[:, 0, :] - 2.0 * gm * kk * g_cols
    g *= _hebbian_factor(kk, kv, params, scratch)
    return g_kk, g_kv


@dataclass
class MemoryRun:
    """Key and value rasters (T, B, l) of one run_memory call and the state after it."""

    key_raster: ComputeNode
    value_raster: ComputeNode
    state: HebbianMemoryState


def run_memory(
    state: HebbianMemoryState,
    z_store: Optional[ComputeNode],
    z_recall: Optional[ComputeNode],
    params: HebbianParams,
    lif: LifParams = LifParams(),
    beta: float = 1.0,
) -> MemoryRun:
    """memory_step repeated over (T, B, .) input rasters, recorded as one graph node.

    The forward pass follows memory_step exactly and the backward sweep is its BPTT
    written out by hand. While recording, the association matrix of every step is
    kept for the backward sweep.
    """
    if z_store is None and z_recall is None:
        raise ArgumentError("run_memory needs a store input, a recall input, or both")
    layout = state.weights.layout
    batch, l, dr = state.batch, layout.l, layout.recall_dim
    store, recall = z_store is not None, z_recall is not None
    z_store = ad.as_node(z_store) if store else None
    z_recall = ad.as_node(z_recall) if recall else None
    steps = (z_store if store else z_recall).shape[0]
    if store and z_store.shape != (steps, batch, layout.d):
        raise ArgumentError(f"store raster {z_store.shape} does not match (T, {batch}, {layout.d})")
    if recall and z_recall.shape != (steps, batch, dr):
        raise ArgumentError(f"recall raster {z_recall.shape} does not match ({steps}, {batch}, {dr})")

    alpha, theta = lif.alpha, lif.theta
    gain = 1.0 - alpha
    refractory_steps = lif.refractory_steps
    surrogate = lif.surrogate(beta)
    decay = params.decay
    c = params.c if store else 1.0
    plastic = params.plasticity == "always" or (params.plasticity == "store_only" and store)
    depth = len(state.feedback_buffer)

    parents = [
        state.w_assoc, state.kappa_key, state.kappa_value,
        state.key_state.membrane, state.value_state.membrane, *state.feedback_buffer,
    ]
    if store:
        parents += [z_store, state.w_s_key, state.w_s_value]
    if recall:
        parents += [z_recall, state.w_r_key]
    record = ad.grad_enabled() and any(p.requires_grad for p in parents)

    key_drive = np.zeros((steps, batch, l))
    value_drive = None
    if store:
        key_drive += z_store.values @ state.w_s_key.values.T
        value_drive = z_store.values @ state.w_s_value.values.T
    if recall:
        w_r = state.w_r_key.values
        key_drive += z_recall.values @ w_r[:, :dr].T
        w_feedback_t = np.ascontiguousarray(w_r[:, dr:].T)

    # z_value of step t lands at depth + t; the recall path at step t reads index t
    values_ext = np.empty((depth + steps, batch, l))
    values_ext[:depth] = [z.values for z in state.feedback_buffer]
    keys = np.zeros((steps, batch, l))
    if record:
        key_slopes, value_slopes = np.empty_like(keys), np.empty_like(keys)
        kk_after, kv_after = np.empty_like(keys), np.empty_like(keys)

    w0 = state.w_assoc.values
    if plastic and record:
        w_history = np.empty((steps + 1,) + w0.shape)
        w_history[0] = w0
    elif plastic:
        w_history = np.empty((2,) + w0.shape)
        w_history[0] = w0
    scratch = np.empty_like(w0) if plastic else None

    v_key, v_value = state.key_state.membrane.values, state.value_state.membrane.values
    ref_key = state.key_state.refractory_remaining
    ref_value = state.value_state.refractory_remaining
    kk, kv = state.kappa_key.values, state.kappa_value.values
    w = w0
    for t in range(steps):
        i_key = key_drive[t] + values_ext[t] @ w_feedback_t if recall else key_drive[t]
        allowed = ref_key == 0
        z_key = keys[t]
        np.greater(v_key, theta, out=z_key)
        z_key *= allowed
        if record:
            key_slopes[t] = ad.surrogate_slope(v_key, surrogate, allowed)
        v_key = alpha * v_key + gain * i_key - theta * z_key
        ref_key = np.where(z_key > 0, refractory_steps, np.maximum(ref_key - 1, 0))

        assoc = np.matmul(w, z_key[:, :, None])[:, :, 0]
        i_value = value_drive[t] + c * assoc if store else assoc
        allowed = ref_value == 0
        z_value = values_ext[depth + t]
        np.greater(v_value, theta, out=z_value)
        z_value *= allowed
        if record:
            value_slopes[t] = ad.surrogate_slope(v_value, surrogate, allowed)
        v_value = alpha * v_value + gain * i_value - theta * z_value
        ref_value = np.where(z_value > 0, refractory_steps, np.maximum(ref_value - 1, 0))

        kk = decay * kk + (1.0 - decay) * z_key
        kv = decay * kv + (1.0 - decay) * z_value
        if record:
            kk_after[t], kv_after[t] = kk, kv
        if plastic:
            nxt = w_history[t + 1] if record else w_history[(t + 1) % 2]
            _hebbian_into(w, kk, kv, params, nxt, scratch)
            w = nxt

    def backward(grads):
        g_keys, g_values, g_w, g_kk, g_kv, g_v_key, g_v_value, *g_buffer = grads
        g_w, g_kk, g_kv = g_w.copy(), g_kk.copy(), g_kv.copy()
        g_v_key, g_v_value = g_v_key.copy(), g_v_value.copy()
        g_ext = np.zeros_like(values_ext)
        g_ext[depth:] = g_values
        if depth:
            g_ext[steps:] += np.stack(g_buffer)
        g_key_current = np.empty((steps, batch, l))
        g_value_current = np.empty((steps, batch, l))
        track_w = plastic or state.w_assoc.requires_grad
        scratch_b = np.empty_like(w0) if plastic else None
        w_feedback = state.w_r_key.values[:, dr:] if recall else None

        for t in reversed(range(steps)):
            w_t = w_history[t] if plastic else w0
            if plastic:
                hk, hv = _hebbian_grads(g_w, w_t, kk_after[t], kv_after[t], params, scratch_b)
                g_kk += hk
                g_kv += hv
            g_z_key = g_keys[t] + (1.0 - decay) * g_kk - theta * g_v_key
            g_z_value = g_ext[depth + t] + (1.0 - decay) * g_kv - theta * g_v_value
            g_kk *= decay
            g_kv *= decay

            g_i_value = gain * g_v_value
            g_value_current[t] = g_i_value
            g_v_value = alpha * g_v_value + g_z_value * value_slopes[t]
            g_assoc = c * g_i_value
            if track_w:
                g_w += g_assoc[:, :, None] * keys[t][:, None, :]
            g_z_key += np.matmul(g_assoc[:, None, :], w_t)[:, 0, :]

            g_i_key = gain * g_v_key
            g_key_current[t] = g_i_key
            g_v_key = alpha * g_v_key + g_z_key * key_slopes[t]
            if recall:
                g_ext[t] += g_i_key @ w_feedback

        flat_key = g_key_current.reshape(-1, l)
        out = [g_w if track_w else None, g_kk, g_kv, g_v_key, g_v_value, *g_ext[:depth]]
        if store:
            zs = z_store.values.reshape(-1, layout.d)
            g_zs = None
            if z_store.requires_grad:
                g_zs = g_key_current @ state.w_s_key.values + g_value_current @ state.w_s_value.values
            out += [g_zs, flat_key.T @ zs, g_value_current.reshape(-1, l).T @ zs]
        if recall:
            g_zr = g_key_current @ state.w_r_key.values[:, :dr] if z_recall.requires_grad else None
            seen = np.concatenate([z_recall.values, values_ext[:steps]], axis=-1).reshape(-1, dr + l)
            out += [g_zr, flat_key.T @ seen]
        return out

    final_w = w if plastic else w0
    outputs = [keys, values_ext[depth:], final_w, kk, kv, v_key, v_value, *values_ext[steps:]]
    key_raster, value_raster, w_node, kk_node, kv_node, vk_node, vv_node, *buffer = ad.packed_op(
        outputs, parents, "memory_run", backward
    )
    next_state = replace(
        state,
        w_assoc=w_node,
        kappa_key=kk_node,
        kappa_value=kv_node,
        key_state=LifLayerState(vk_node, ref_key),
        value_state=LifLayerState(vv_node, ref_value),
        feedback_buffer=tuple(buffer),
    )
    return MemoryRun(key_raster, value_raster, next_state)
