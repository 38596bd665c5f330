#==========================================================
# ModelConfig, ModelParams, EpisodeInput, EpisodeBatch
# run_batch, run_sequence, run_rl_step
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .autodiff import ComputeNode
from .errors import ArgumentError
from .memory import (
    HebbianMemoryState,
    HebbianParams,
    MemoryLayout,
    MemoryWeights,
    init_memory_state,
    run_memory,
)
from .snn import LifParams, encode_sequence, readout_window

logger = logging.getLogger(__name__)

LAYER_NAMES = ("input_encoder", "label_encoder", "key", "value")


#------------------ModelConfig-------------------
@dataclass(frozen=True)
class ModelConfig:
    """Sizes and time constants of the encoder -> memory -> readout network.

    label_encoder = 0 builds the single-encoder variant used by the card game, where
    the observation drives both memory pathways and there is no output layer.
    """

    tau_sim: float = 100.0
    tau_read: float = 30.0
    d_feedback: float = 1.0
    l: int = 100
    input_dim: int = 10
    input_encoder: int = 80
    label_range: int = 3
    label_encoder: int = 80
    output_dim: Optional[int] = None
    beta: float = 1.0
    lif: LifParams = field(default_factory=LifParams)
    hebbian: HebbianParams = field(default_factory=HebbianParams)

    def __post_init__(self):
        if self.tau_read > self.tau_sim:
            raise ArgumentError(f"tau_read={self.tau_read} exceeds tau_sim={self.tau_sim}")
        if min(self.l, self.input_dim, self.input_encoder, self.label_range) <= 0:
            raise ArgumentError("model sizes must be positive")
        if self.label_encoder < 0 or (self.output_dim is not None and self.output_dim < 0):
            raise ArgumentError("label_encoder and output_dim cannot be negative")

    @property
    def layout(self) -> MemoryLayout:
        return MemoryLayout(l=self.l, d=self.input_encoder + self.label_encoder, d_recall=self.input_encoder)

    @property
    def outputs(self) -> int:
        return self.label_range if self.output_dim is None else self.output_dim

    @property
    def sim_steps(self) -> int:
        return self.lif.steps(self.tau_sim)

    @property
    def read_steps(self) -> int:
        return self.lif.steps(self.tau_read)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        lif = LifParams(**data.pop("lif", {}))
        hebbian = HebbianParams(**data.pop("hebbian", {}))
        return cls(lif=lif, hebbian=hebbian, **data)


#------------------ModelParams-------------------
@dataclass
class ModelParams:
    w_enc_input: ComputeNode
    memory: MemoryWeights
    w_enc_label: Optional[ComputeNode] = None
    w_out: Optional[ComputeNode] = None

    def named(self) -> dict[str, ComputeNode]:
        nodes = {
            "w_enc_input": self.w_enc_input,
            "w_enc_label": self.w_enc_label,
            "w_s_key": self.memory.w_s_key,
            "w_s_value": self.memory.w_s_value,
            "w_r_key": self.memory.w_r_key,
            "w_out": self.w_out,
        }
        return {name: node for name, node in nodes.items() if node is not None}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.values.copy() for name, node in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        def node(name: str) -> Optional[ComputeNode]:
            return ad.parameter(arrays[name], name=name) if name in arrays else None

        return cls(
            w_enc_input=node("w_enc_input"),
            memory=MemoryWeights(node("w_s_key"), node("w_s_value"), node("w_r_key")),
            w_enc_label=node("w_enc_label"),
            w_out=node("w_out"),
        )

    def zero_grad(self) -> None:
        for node in self.named().values():
            node.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.values)
            for name, node in self.named().items()
        }

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        """Replace parameter values (new arrays, never written in place)."""
        for name, node in self.named().items():
            node.values = np.asarray(arrays[name], dtype=np.float64)


def expected_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    layout = config.layout
    shapes = {
        "w_enc_input": (config.input_encoder, config.input_dim),
        "w_s_key": (layout.l, layout.d),
        "w_s_value": (layout.l, layout.d),
        "w_r_key": (layout.l, layout.recall_dim + layout.l),
    }
    if config.label_encoder:
        shapes["w_enc_label"] = (config.label_encoder, config.label_range)
    if config.outputs:
        shapes["w_out"] = (config.outputs, layout.l)
    return shapes


#------------------Episodes-------------------
@dataclass(frozen=True)
class EpisodeInput:
    """Ordered (vector, label) facts and one query; labels are 1-based."""

    facts: tuple[tuple[np.ndarray, int], ...]
    query: np.ndarray
    target_label: int

    def issues(self, label_range: Optional[int] = None) -> list[str]:
        issues: list[str] = []
        labels = [label for _, label in self.facts]
        if not self.facts:
            issues.append("episode has no facts")
        if len(set(labels)) != len(labels):
            issues.append(f"labels are not distinct: {labels}")
        if label_range is not None:
            bad = [label for label in labels + [self.target_label] if not 1 <= label <= label_range]
            if bad:
                issues.append(f"labels {bad} outside [1, {label_range}]")
        matches = [label for vec, label in self.facts if np.array_equal(vec, self.query)]
        if len(matches) != 1:
            issues.append(f"query matches {len(matches)} facts, expected exactly one")
        elif matches[0] != self.target_label:
            issues.append(f"target {self.target_label} is not the query's label {matches[0]}")
        return issues


@dataclass(frozen=True)
class EpisodeBatch:
    fact_vectors: np.ndarray
    fact_labels: np.ndarray
    queries: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_episodes(cls, episodes: Sequence[EpisodeInput]) -> "EpisodeBatch":
        if not episodes:
            raise ArgumentError("cannot batch zero episodes")
        lengths = {len(e.facts) for e in episodes}
        if len(lengths) != 1:
            raise ArgumentError(f"episodes in a batch must have the same length, got {sorted(lengths)}")
        return cls(
            fact_vectors=np.stack([np.stack([v for v, _ in e.facts]) for e in episodes]),
            fact_labels=np.array([[label for _, label in e.facts] for e in episodes], dtype=np.int64),
            queries=np.stack([e.query for e in episodes]),
            targets=np.array([e.target_label for e in episodes], dtype=np.int64),
        )

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    @property
    def n_facts(self) -> int:
        return self.fact_labels.shape[1]

    def select(self, rows: slice) -> "EpisodeBatch":
        return EpisodeBatch(self.fact_vectors[rows], self.fact_labels[rows], self.queries[rows], self.targets[rows])


def one_hot(labels: np.ndarray, label_range: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > label_range):
        raise ArgumentError(f"labels must lie in [1, {label_range}], got {labels.min()}..{labels.max()}")
    out = np.zeros(labels.shape + (label_range,))
    np.put_along_axis(out, (labels - 1)[..., None], 1.0, axis=-1)
    return out


#------------------Forward passes-------------------
@dataclass
class SequenceOutput:
    """Logits plus one (T, B, n) spike raster node per layer in LAYER_NAMES."""

    logits: ComputeNode
    rasters: dict[str, ComputeNode]


def run_batch(params: ModelParams, config: ModelConfig, batch: EpisodeBatch) -> SequenceOutput:
    """Store every fact, then recall with the query, then read the value layer out.

    All network state starts from zero; only params carry over between calls.
    """
    if params.w_enc_label is None or params.w_out is None:
        raise ArgumentError("association model needs a label encoder and an output layer")
    lif, hebb, beta = config.lif, config.hebbian, config.beta
    steps = config.sim_steps
    stored_steps = batch.n_facts * steps

    # facts first, then the query; every item is encoded from rest
    items = np.concatenate([batch.fact_vectors.transpose(1, 0, 2), batch.queries[None]], axis=0)
    input_raster = encode_sequence(items, params.w_enc_input, steps, lif, beta)
    labels = one_hot(batch.fact_labels.T, config.label_range)
    label_raster = encode_sequence(labels, params.w_enc_label, steps, lif, beta)

    state = init_memory_state(params.memory, batch.size, config.d_feedback, lif.dt)
    store_input = ad.concat([ad.take_steps(input_raster, 0, stored_steps), label_raster])
    stored = run_memory(state, store_input, None, hebb, lif, beta)
    query = ad.take_steps(input_raster, stored_steps, stored_steps + steps)
    recalled = run_memory(stored.state, None, query, hebb, lif, beta)

    rasters = {
        "input_encoder": input_raster,
        "label_encoder": label_raster,
        "key": ad.concat([stored.key_raster, recalled.key_raster], axis=0),
        "value": ad.concat([stored.value_raster, recalled.value_raster], axis=0),
    }
    counts = readout_window(recalled.value_raster, config.read_steps)
    return SequenceOutput(ad.matmul(counts, params.w_out), rasters)


def run_sequence(params: ModelParams, config: ModelConfig, episode: EpisodeInput) -> np.ndarray:
    """Logits for a single episode."""
    issues = episode.issues(config.label_range)
    if issues:
        raise ArgumentError("; ".join(issues))
    with ad.no_grad():
        out = run_batch(params, config, EpisodeBatch.from_episodes([episode]))
    return out.logits.values[0]


def layer_rates(rasters: dict[str, ComputeNode]) -> dict[str, float]:
    """Mean spikes per neuron per step for every recorded layer."""
    return {name: float(raster.values.mean()) for name, raster in rasters.items() if raster.values.size}


#------------------Card-game step-------------------
def init_carry(params: ModelParams, config: ModelConfig, batch: int) -> HebbianMemoryState:
    return init_memory_state(params.memory, batch, config.d_feedback, config.lif.dt)


def run_rl_step(
    params: ModelParams,
    config: ModelConfig,
    observation: np.ndarray,
    carry: HebbianMemoryState,
) -> tuple[ComputeNode, HebbianMemoryState]:
    """Present one observation for tau_sim with both pathways driven by its encoding.

    Returns the value-layer spike counts over the last tau_read and the carried state.
    """
    observation = np.asarray(observation, dtype=np.float64)
    if observation.ndim != 2 or observation.shape[1] != config.input_dim:
        raise ArgumentError(f"observation {observation.shape} does not match input_dim={config.input_dim}")
    if observation.shape[0] != carry.batch:
        raise ArgumentError(f"observation batch {observation.shape[0]} does not match carry batch {carry.batch}")
    lif, hebb, beta = config.lif, config.hebbian, config.beta
    raster = encode_sequence(observation, params.w_enc_input, config.sim_steps, lif, beta)
    run = run_memory(carry, raster, raster, hebb, lif, beta)
    return readout_window(run.value_raster, config.read_steps), run.state
