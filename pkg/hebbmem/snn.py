#==========================================================
# LifParams, LifLayerState, IfLayerState
# lif_step, if_step, encode_sequence, encode_constant_current, readout_sum
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import math
from dataclasses import dataclass
from typing import Optional

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .autodiff import ComputeNode, SurrogateParams
from .errors import ArgumentError, StateError


#------------------Parameters-------------------
@dataclass(frozen=True)
class LifParams:
    """Leaky integrate-and-fire constants. Times are in milliseconds."""

    theta: float = 0.1
    tau_m: float = 20.0
    delta_abs: float = 3.0
    dt: float = 1.0

    def __post_init__(self):
        if self.theta <= 0 or self.tau_m <= 0 or self.dt <= 0 or self.delta_abs < 0:
            raise ArgumentError(f"invalid LIF parameters: {self}")
        ratio = self.delta_abs / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ArgumentError(f"delta_abs={self.delta_abs} is not a multiple of dt={self.dt}")

    @property
    def alpha(self) -> float:
        return math.exp(-self.dt / self.tau_m)

    @property
    def refractory_steps(self) -> int:
        return int(round(self.delta_abs / self.dt))

    def steps(self, duration: float) -> int:
        return int(round(duration / self.dt))

    def surrogate(self, beta: float = 1.0) -> SurrogateParams:
        return SurrogateParams(beta=beta, theta=self.theta)


#------------------Layer state-------------------
@dataclass
class LifLayerState:
    """Membrane (B, n) as a graph node plus integer refractory counters (B, n)."""

    membrane: ComputeNode
    refractory_remaining: np.ndarray

    @classmethod
    def zeros(cls, size: int, batch: int = 1) -> "LifLayerState":
        return cls(ad.constant(np.zeros((batch, size))), np.zeros((batch, size), dtype=np.int64))

    @property
    def size(self) -> int:
        return self.membrane.shape[-1]

    @property
    def batch(self) -> int:
        return self.membrane.shape[0]

    def detach(self) -> "LifLayerState":
        return LifLayerState(self.membrane.detach(), self.refractory_remaining.copy())

    def take_rows(self, rows: np.ndarray) -> "LifLayerState":
        """Detached copy of the selected batch rows."""
        return LifLayerState(ad.constant(self.membrane.values[rows]), self.refractory_remaining[rows].copy())

    def reset_rows(self, keep: np.ndarray) -> "LifLayerState":
        keep = np.asarray(keep, dtype=bool)
        return LifLayerState(
            ad.row_mask(self.membrane, keep),
            np.where(keep[:, None], self.refractory_remaining, 0),
        )


@dataclass
class IfLayerState:
    """Leakless layer used by converted networks; plain arrays, never differentiated."""

    membrane: np.ndarray
    layer_threshold: Optional[float] = None

    @classmethod
    def zeros(cls, size: int, batch: int = 1, layer_threshold: Optional[float] = None) -> "IfLayerState":
        return cls(np.zeros((batch, size)), layer_threshold)


#------------------Membrane update node-------------------
def leaky_integrate(
    membrane: ComputeNode,
    current: ComputeNode,
    spikes: ComputeNode,
    decay: float,
    gain: float,
    theta: float,
) -> ComputeNode:
    """V' = decay*V + gain*I - theta*z as a single graph node."""
    values = decay * membrane.values + gain * current.values - theta * spikes.values
    return ad.make_node(
        values,
        (membrane, current, spikes),
        "leaky_integrate",
        lambda g: (decay * g, gain * g, -theta * g),
    )


#------------------lif_step-------------------
def lif_step(
    state: LifLayerState,
    input_current,
    params: LifParams,
    beta: float = 1.0,
) -> tuple[ComputeNode, LifLayerState]:
    """One Euler step. Spikes are read from V(t); the membrane keeps integrating while refractory."""
    current = ad.as_node(input_current)
    if current.shape != state.membrane.shape:
        raise ArgumentError(f"input current {current.shape} does not match layer {state.membrane.shape}")
    allowed = state.refractory_remaining == 0
    spikes = ad.spike(state.membrane, params.surrogate(beta), allowed)
    alpha = params.alpha
    membrane = leaky_integrate(state.membrane, current, spikes, alpha, 1.0 - alpha, params.theta)
    refractory = np.where(
        spikes.values > 0,
        params.refractory_steps,
        np.maximum(state.refractory_remaining - 1, 0),
    )
    return spikes, LifLayerState(membrane, refractory)


#------------------if_step-------------------
def if_step(state: IfLayerState, input_current: np.ndarray) -> tuple[np.ndarray, IfLayerState]:
    """Integrate, then fire on the integrated potential and subtract the threshold."""
    if state.layer_threshold is None:
        raise StateError("IF layer threshold has not been set")
    current = np.asarray(input_current, dtype=np.float64)
    if current.shape != state.membrane.shape:
        raise ArgumentError(f"input current {current.shape} does not match layer {state.membrane.shape}")
    theta = state.layer_threshold
    potential = state.membrane + current
    spikes = (potential > theta).astype(np.float64)
    return spikes, IfLayerState(potential - theta * spikes, theta)


#------------------Input encoding-------------------
def encode_sequence(
    x: np.ndarray,
    weights: ComputeNode,
    steps: int,
    params: LifParams,
    beta: float = 1.0,
) -> ComputeNode:
    """Drive fresh LIF layers with the constant currents W x, one item after another.

    x is (B, input_dim) or (items, B, input_dim). Every item starts from a resting
    layer and the result stacks the items in time: a (items*steps, B, n) raster.
    The whole simulation is one graph node whose backward sweep is the BPTT of
    lif_step.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = ad.as_node(weights)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or weights.values.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ArgumentError(f"encoder weights {weights.shape} do not fit input {x.shape}")
    if steps < 0:
        raise ArgumentError(f"steps must be non-negative, got {steps}")
    items, batch, size = x.shape[0], x.shape[1], weights.shape[0]
    alpha, theta = params.alpha, params.theta
    gain = 1.0 - alpha
    surrogate = params.surrogate(beta)
    record = ad.grad_enabled() and weights.requires_grad

    drive = gain * (x @ weights.values.T)
    raster = np.zeros((steps, items, batch, size))
    slopes = np.empty_like(raster) if record else None
    membrane = np.zeros((items, batch, size))
    refractory = np.zeros((items, batch, size), dtype=np.int64)
    for t in range(steps):
        allowed = refractory == 0
        z = raster[t]
        np.greater(membrane, theta, out=z)
        z *= allowed
        if record:
            slopes[t] = ad.surrogate_slope(membrane, surrogate, allowed)
        membrane = alpha * membrane + drive - theta * z
        refractory = np.where(z > 0, params.refractory_steps, np.maximum(refractory - 1, 0))

    def backward(g):
        g = g.reshape(items, steps, batch, size).transpose(1, 0, 2, 3)
        g_membrane = np.zeros((items, batch, size))
        g_drive = np.zeros((items, batch, size))
        for t in reversed(range(steps)):
            g_drive += g_membrane
            g_z = g[t] - theta * g_membrane
            g_membrane = alpha * g_membrane + g_z * slopes[t]
        g_current = gain * g_drive
        return (g_current.reshape(-1, size).T @ x.reshape(-1, x.shape[-1]),)

    out = raster.transpose(1, 0, 2, 3).reshape(items * steps, batch, size)
    return ad.make_node(out, (weights,), "lif_encode", backward)


def encode_constant_current(
    x: np.ndarray,
    weights: np.ndarray,
    duration: float = 100.0,
    params: LifParams = LifParams(),
) -> np.ndarray:
    """Spike raster (encoder_size x steps) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ArgumentError(f"encoder weights {weights.shape} do not fit input {x.shape}")
    with ad.no_grad():
        raster = encode_sequence(x[None, :], ad.constant(weights), params.steps(duration), params)
    return raster.values[:, 0, :].T.copy()


#------------------Readout-------------------
def readout_sum(spikes: np.ndarray, tau_read: float, dt: float = 1.0) -> np.ndarray:
    """Per-neuron spike counts over the final tau_read of a (neurons x steps) raster."""
    spikes = np.asarray(spikes, dtype=np.float64)
    window = int(round(tau_read / dt))
    if window > spikes.shape[-1]:
        raise ArgumentError(f"tau_read={tau_read} exceeds raster duration {spikes.shape[-1] * dt}")
    if window <= 0:
        return np.zeros(spikes.shape[:-1])
    return spikes[..., -window:].sum(axis=-1)


def readout_window(raster: ComputeNode, window: int) -> ComputeNode:
    """Graph counterpart of readout_sum over a (T, B, n) spike raster node."""
    steps = raster.shape[0]
    if window > steps or window <= 0:
        raise ArgumentError(f"readout window of {window} steps does not fit {steps} steps")
    return ad.sum(ad.take_steps(raster, steps - window, steps), axis=0)
