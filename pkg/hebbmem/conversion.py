#==========================================================
# DenseReluNet, ConversionConfig
# balance_thresholds, run_converted, layer_fidelity, convert_demo
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ArgumentError, CheckpointError, StateError
from .snn import IfLayerState, LifParams, encode_sequence, if_step
from .tasks import stream_rng
from .training import glorot_init

logger = logging.getLogger(__name__)


#------------------Network-------------------
@dataclass
class DenseReluNet:
    """Bias-free rectified-linear layers; weights[k] has shape (out_k, in_k)."""

    weights: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if not self.weights:
            raise ArgumentError("a network needs at least one layer")
        for k, w in enumerate(self.weights):
            if w.ndim != 2:
                raise ArgumentError(f"layer {k} weights must be a matrix, got shape {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ArgumentError(f"layer {k} expects {w.shape[1]} inputs, previous layer has {self.weights[k - 1].shape[0]}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations of every layer for inputs of shape (S, in)."""
        acts, h = [], np.asarray(x, dtype=np.float64)
        for w in self.weights:
            h = np.maximum(h @ w.T, 0.0)
            acts.append(h)
        return acts

    @classmethod
    def random(cls, sizes: Sequence[int], rng: np.random.Generator, gain: float = 1.0) -> "DenseReluNet":
        return cls([glorot_init((sizes[k + 1], sizes[k]), gain, rng) for k in range(len(sizes) - 1)])


@dataclass(frozen=True)
class ConversionConfig:
    duration: float = 100.0
    epsilon: float = 1e-6
    front_end: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        if self.duration <= 0 or self.epsilon <= 0:
            raise ArgumentError("duration and epsilon must be positive")

    @property
    def steps(self) -> int:
        return self.front_end.steps(self.duration)


#------------------Spiking passes-------------------
def front_end_raster(inputs: np.ndarray, config: ConversionConfig) -> np.ndarray:
    """LIF input neurons driven by the input values as constant currents: (T, S, in)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    with ad.no_grad():
        raster = encode_sequence(inputs, ad.constant(np.eye(inputs.shape[1])), config.steps, config.front_end)
    return raster.values


def run_if_layer(currents: np.ndarray, threshold: Optional[float]) -> np.ndarray:
    """Leakless IF neurons over (T, S, n) input currents; returns the (T, S, n) raster."""
    state = IfLayerState.zeros(currents.shape[2], currents.shape[1], threshold)
    raster = np.zeros_like(currents)
    for t in range(currents.shape[0]):
        raster[t], state = if_step(state, currents[t])
    return raster


def balance_thresholds(
    net: DenseReluNet,
    calibration_inputs: np.ndarray,
    config: ConversionConfig = ConversionConfig(),
) -> list[float]:
    """Layer by layer: threshold = largest weighted spike sum any neuron receives at any step.

    Earlier thresholds stay fixed while a layer is balanced; each layer is forwarded
    once to find its maximum and once more with the threshold set. Degenerate layers
    get the epsilon floor.
    """
    calibration_inputs = np.asarray(calibration_inputs, dtype=np.float64)
    if calibration_inputs.ndim != 2 or calibration_inputs.shape[0] == 0:
        raise ArgumentError("calibration set is empty")
    if calibration_inputs.shape[1] != net.layer_sizes[0]:
        raise ArgumentError(f"calibration inputs have {calibration_inputs.shape[1]} features, net expects {net.layer_sizes[0]}")
    thresholds = [0.0] * len(net.weights)
    spikes = front_end_raster(calibration_inputs, config)
    for k, w in enumerate(net.weights):
        currents = spikes @ w.T
        peak = float(currents.max())
        thresholds[k] = max(peak, config.epsilon)
        spikes = run_if_layer(currents, thresholds[k])
        logger.debug("layer %d: max current %.4f, threshold %.4f", k, peak, thresholds[k])
    return thresholds


@dataclass
class ConvertedRun:
    input_raster: np.ndarray
    layer_rasters: list[np.ndarray]

    @property
    def input_counts(self) -> np.ndarray:
        return self.input_raster.sum(axis=0)

    @property
    def layer_counts(self) -> list[np.ndarray]:
        return [r.sum(axis=0) for r in self.layer_rasters]


def run_converted(
    net: DenseReluNet,
    thresholds: Optional[Sequence[float]],
    inputs: np.ndarray,
    config: ConversionConfig = ConversionConfig(),
) -> ConvertedRun:
    if thresholds is None:
        raise StateError("thresholds have not been balanced")
    if len(thresholds) != len(net.weights):
        raise ArgumentError(f"{len(thresholds)} thresholds for {len(net.weights)} layers")
    spikes = front_end_raster(inputs, config)
    run = ConvertedRun(spikes, [])
    for w, threshold in zip(net.weights, thresholds):
        spikes = run_if_layer(spikes @ w.T, threshold)
        run.layer_rasters.append(spikes)
    return run


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.reshape(-1), b.reshape(-1)
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def layer_fidelity(
    net: DenseReluNet,
    thresholds: Sequence[float],
    inputs: np.ndarray,
    config: ConversionConfig = ConversionConfig(),
) -> list[float]:
    """Pearson r per layer between spike counts and ReLU activations.

    The reference network sees the front end's spike rates, the signal the converted
    layers actually receive.
    """
    run = run_converted(net, thresholds, inputs, config)
    reference = net.forward(run.input_counts / config.steps)
    return [_pearson(counts, act) for counts, act in zip(run.layer_counts, reference)]


#------------------Persistence-------------------
def save_converted(
    path: Path,
    net: DenseReluNet,
    thresholds: Sequence[float],
    config: ConversionConfig = ConversionConfig(),
    metadata: Optional[dict[str, Any]] = None,
) -> Path:
    arrays = {f"layer{k}.w": w for k, w in enumerate(net.weights)}
    header = {"kind": "converted", "layer_sizes": net.layer_sizes, "conversion": asdict(config)}
    meta = dict(metadata or {})
    meta["conversion"] = {"thresholds": [float(t) for t in thresholds], "epsilon": config.epsilon}
    return save_checkpoint(path, arrays, header, meta)


def load_converted(path: Path) -> tuple[DenseReluNet, list[float], ConversionConfig]:
    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "converted":
        raise CheckpointError(f"{path}: not a converted-network checkpoint")
    try:
        weights = [ckpt.arrays[f"layer{k}.w"] for k in range(len(ckpt.arrays))]
        thresholds = list(ckpt.metadata["conversion"]["thresholds"])
        conv = dict(ckpt.config["conversion"])
        config = ConversionConfig(front_end=LifParams(**conv.pop("front_end")), **conv)
        net = DenseReluNet(weights)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid converted-network checkpoint: {e}") from e
    if net.layer_sizes != list(ckpt.config.get("layer_sizes", [])) or len(thresholds) != len(weights):
        raise CheckpointError(f"{path}: layer sizes or thresholds do not match the stored weights")
    return net, thresholds, config


#------------------Demo-------------------
@dataclass
class ConversionDemo:
    net: DenseReluNet
    thresholds: list[float]
    fidelity: list[float]
    checkpoint_path: Optional[Path] = None


def convert_demo(
    seed: int = 0,
    sizes: Sequence[int] = (20, 15, 10),
    n_calibration: int = 200,
    n_heldout: int = 200,
    config: ConversionConfig = ConversionConfig(),
    out_dir: Optional[Path] = None,
) -> ConversionDemo:
    """Random dense net, balanced on one input sample and scored on a held-out one."""
    net = DenseReluNet.random(sizes, stream_rng(seed, "init"))
    calibration = stream_rng(seed, "calibration").random((n_calibration, sizes[0]))
    heldout = stream_rng(seed, "heldout").random((n_heldout, sizes[0]))
    thresholds = balance_thresholds(net, calibration, config)
    fidelity = layer_fidelity(net, thresholds, heldout, config)
    for k, (t, r) in enumerate(zip(thresholds, fidelity)):
        logger.info("layer %d: threshold=%.4f fidelity r=%.4f", k, t, r)
    demo = ConversionDemo(net, thresholds, fidelity)
    if out_dir is not None:
        demo.checkpoint_path = save_converted(Path(out_dir) / "converted.hmem", net, thresholds, config, {"seed": seed})
    return demo
