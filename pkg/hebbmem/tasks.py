#==========================================================
# stream_rng, AssociationTaskConfig
# gen_association_episode, gen_batch, evaluate_accuracy, ood_protocol
# dump_episodes, load_episodes
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .errors import ArgumentError
from .export import read_csv, write_csv
from .model import EpisodeBatch, EpisodeInput, ModelConfig, ModelParams, run_batch

logger = logging.getLogger(__name__)

# Fixed spawn keys; a stream never changes meaning between releases.
STREAMS = {
    "init": 0,
    "train": 1,
    "validation": 2,
    "test": 3,
    "env": 4,
    "policy": 5,
    "calibration": 6,
    "heldout": 7,
}

EPISODE_DUMP_HEADER = ("n_facts", "vec_dim", "fact_vectors", "fact_labels", "query", "target")

Predictor = Callable[[EpisodeBatch], np.ndarray]


def stream_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named purpose of one run."""
    if stream not in STREAMS:
        raise ArgumentError(f"unknown random stream {stream!r}; known: {sorted(STREAMS)}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[stream], *map(int, extra)]))


#------------------AssociationTaskConfig-------------------
@dataclass(frozen=True)
class AssociationTaskConfig:
    """label_range None ties the range to the episode length (in-distribution mode)."""

    n_train: int = 3
    n_test: int = 3
    vec_dim: int = 10
    label_range: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.vec_dim <= 0:
            raise ArgumentError(f"vec_dim must be positive, got {self.vec_dim}")
        if self.n_train < 1 or self.n_test < 1:
            raise ArgumentError("episodes need at least one fact")
        if self.label_range is not None:
            for n in (self.n_train, self.n_test):
                if n > self.label_range:
                    raise ArgumentError(f"{n} facts cannot carry distinct labels from [1, {self.label_range}]")

    @property
    def fixed_range(self) -> bool:
        return self.label_range is not None

    def range_for(self, n: int) -> int:
        return n if self.label_range is None else self.label_range

    @property
    def output_range(self) -> int:
        """Size of the label one-hot and readout for a model trained on this task."""
        return self.range_for(self.n_train)


#------------------Generation-------------------
def gen_association_episode(
    config: AssociationTaskConfig,
    rng: np.random.Generator,
    n: Optional[int] = None,
) -> EpisodeInput:
    n = config.n_train if n is None else n
    label_range = config.range_for(n)
    if not 1 <= n <= label_range:
        raise ArgumentError(f"cannot draw {n} distinct labels from [1, {label_range}]")
    vectors = rng.random((n, config.vec_dim))
    labels = rng.choice(label_range, size=n, replace=False) + 1
    pick = int(rng.integers(n))
    return EpisodeInput(
        facts=tuple((vectors[i], int(labels[i])) for i in range(n)),
        query=vectors[pick].copy(),
        target_label=int(labels[pick]),
    )


def gen_episodes(
    config: AssociationTaskConfig,
    rng: np.random.Generator,
    count: int,
    n: Optional[int] = None,
) -> list[EpisodeInput]:
    return [gen_association_episode(config, rng, n) for _ in range(count)]


def gen_batch(
    config: AssociationTaskConfig,
    rng: np.random.Generator,
    batch_size: int,
    n: Optional[int] = None,
) -> EpisodeBatch:
    return EpisodeBatch.from_episodes(gen_episodes(config, rng, batch_size, n))


#------------------Evaluation-------------------
def model_predictor(params: ModelParams, model_config: ModelConfig) -> Predictor:
    def predict(batch: EpisodeBatch) -> np.ndarray:
        with ad.no_grad():
            return run_batch(params, model_config, batch).logits.values

    return predict


def predictions(logits: np.ndarray) -> np.ndarray:
    """1-based argmax labels; ties go to the lowest label."""
    return np.argmax(np.asarray(logits), axis=-1) + 1


def evaluate_accuracy(
    params: Optional[ModelParams],
    model_config: ModelConfig,
    config: AssociationTaskConfig,
    n_episodes: int,
    n: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    predictor: Optional[Predictor] = None,
    batch_size: int = 64,
) -> float:
    """Fraction of fresh held-out episodes whose argmax logit is the target label."""
    if n_episodes <= 0:
        raise ArgumentError(f"n_episodes must be positive, got {n_episodes}")
    n = config.n_test if n is None else n
    if config.range_for(n) > model_config.label_range:
        raise ArgumentError(
            f"episodes with labels up to {config.range_for(n)} do not fit a model with label_range={model_config.label_range}"
        )
    if predictor is None:
        if params is None:
            raise ArgumentError("evaluate_accuracy needs params or a predictor")
        predictor = model_predictor(params, model_config)
    rng = stream_rng(config.seed, "test", n) if rng is None else rng

    correct = 0
    for start in range(0, n_episodes, batch_size):
        batch = gen_batch(config, rng, min(batch_size, n_episodes - start), n)
        correct += int(np.sum(predictions(predictor(batch)) == batch.targets))
    accuracy = correct / n_episodes
    logger.debug("accuracy at N=%d over %d episodes: %.4f", n, n_episodes, accuracy)
    return accuracy


def ood_protocol(
    params: Optional[ModelParams],
    model_config: ModelConfig,
    config: AssociationTaskConfig,
    lengths: Iterable[int],
    n_episodes: int = 2000,
    predictor: Optional[Predictor] = None,
) -> dict[int, float]:
    """Accuracy of the same parameters at every test length, no retraining."""
    if not config.fixed_range:
        raise ArgumentError("the out-of-distribution protocol needs a fixed label_range")
    lengths = list(lengths)
    too_long = [n for n in lengths if n > config.label_range]
    if too_long:
        raise ArgumentError(f"test lengths {too_long} exceed label_range={config.label_range}")
    curve = {}
    for n in lengths:
        curve[n] = evaluate_accuracy(params, model_config, config, n_episodes, n=n, predictor=predictor)
        logger.info("ood N_test=%d accuracy=%.4f", n, curve[n])
    return curve


#------------------Episode dump-------------------
def _flat(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def dump_episodes(path: Path, episodes: Sequence[EpisodeInput]) -> Path:
    """One episode per row; array fields are space separated, facts in presentation order.

    Columns: n_facts, vec_dim, fact_vectors (n_facts * vec_dim, row-major),
    fact_labels (n_facts), query (vec_dim), target.
    """
    rows = []
    for e in episodes:
        vectors = np.stack([v for v, _ in e.facts])
        rows.append((
            len(e.facts),
            vectors.shape[1],
            _flat(vectors.reshape(-1)),
            " ".join(str(label) for _, label in e.facts),
            _flat(e.query),
            e.target_label,
        ))
    return write_csv(path, EPISODE_DUMP_HEADER, rows)


def load_episodes(path: Path) -> list[EpisodeInput]:
    episodes = []
    for row in read_csv(path):
        n, dim = int(row["n_facts"]), int(row["vec_dim"])
        vectors = np.array([float(v) for v in row["fact_vectors"].split()]).reshape(n, dim)
        labels = [int(v) for v in row["fact_labels"].split()]
        episodes.append(EpisodeInput(
            facts=tuple((vectors[i], labels[i]) for i in range(n)),
            query=np.array([float(v) for v in row["query"].split()]),
            target_label=int(row["target"]),
        ))
    return episodes
