#==========================================================
# TrainConfig, AdamState, adam_step, clip_gradients, glorot_init
# loss_crossentropy, rate_regularizer, train_step, train_association
#==========================================================

from __future__ import annotations

#------------------Standard Library-------------------
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

#------------------Third-Party-------------------
import numpy as np

#------------------Local-------------------
from . import autodiff as ad
from .autodiff import ComputeNode
from .checkpoint import save_model
from .errors import ArgumentError, NumericError
from .export import METRICS_HEADER, MetricsLog
from .model import EpisodeBatch, ModelConfig, ModelParams, expected_param_shapes, run_batch
from .tasks import AssociationTaskConfig, evaluate_accuracy, gen_batch, predictions, stream_rng

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.hmem"


#------------------TrainConfig-------------------
@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003
    lr_decay: float = 0.85
    decay_interval: int = 340
    batch_size: int = 64
    micro_batch: int = 16
    iterations: int = 1500
    lambda_rho: float = 1e-5
    rho_0: float = 0.0
    reg_warmup: int = 0
    clip_norm: float = 40.0
    init_gain: float = math.sqrt(2.0)
    seed: int = 0
    checkpoint_every: int = 100
    eval_every: int = 0
    eval_episodes: int = 1000
    log_every: int = 10
    record_timing: bool = False

    def issues(self) -> list[str]:
        issues = []
        if self.lr <= 0:
            issues.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            issues.append(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.decay_interval <= 0:
            issues.append("decay_interval must be positive")
        if self.clip_norm <= 0:
            issues.append(f"clip_norm must be positive, got {self.clip_norm}")
        if self.batch_size <= 0 or self.micro_batch <= 0:
            issues.append("batch_size and micro_batch must be positive")
        if self.iterations < 0:
            issues.append("iterations cannot be negative")
        if self.lambda_rho < 0:
            issues.append("lambda_rho cannot be negative")
        return issues

    def __post_init__(self):
        issues = self.issues()
        if issues:
            raise ArgumentError("; ".join(issues))


#------------------Adam-------------------
@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray], **coefficients) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            **coefficients,
        )


def _check_finite(grads: Mapping[str, np.ndarray]) -> None:
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients in {bad}")


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam. Returns new arrays; inputs are left untouched."""
    _check_finite(grads)
    for name, p in params.items():
        if grads[name].shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ArgumentError(f"adam_step: shape mismatch for {name}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, step, b1, b2, state.eps)


#------------------Gradient clipping-------------------
def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ArgumentError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


#------------------Initialization-------------------
def glorot_init(shape: Sequence[int], gain: float = math.sqrt(2.0), rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Uniform on +-gain*sqrt(6/(fan_in+fan_out)) for an (out, in) matrix."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2 or min(shape) <= 0:
        raise ArgumentError(f"glorot_init needs a positive 2-D shape, got {shape}")
    rng = np.random.default_rng() if rng is None else rng
    fan_out, fan_in = shape
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_model_params(
    config: ModelConfig,
    rng: np.random.Generator,
    gain: float = math.sqrt(2.0),
) -> ModelParams:
    # draw order is part of the seed contract
    arrays = {name: glorot_init(shape, gain, rng) for name, shape in expected_param_shapes(config).items()}
    return ModelParams.from_arrays(arrays)


#------------------Losses-------------------
def loss_crossentropy(logits: np.ndarray, target: int) -> float:
    """-log softmax(logits)[target] for a 1-based target."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ArgumentError(f"need a vector of at least two logits, got shape {logits.shape}")
    if not 1 <= target <= logits.shape[0]:
        raise ArgumentError(f"target {target} outside [1, {logits.shape[0]}]")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[target - 1])


def crossentropy_node(logits: ComputeNode, targets: np.ndarray) -> ComputeNode:
    """Batch-mean cross entropy of (B, K) logits against 1-based targets."""
    if not np.all(np.isfinite(logits.values)):
        raise NumericError("non-finite logits")
    targets = np.asarray(targets, dtype=np.int64)
    return ad.scale(ad.mean(ad.gather(ad.log_softmax(logits), targets - 1)), -1.0)


def spike_rates(raster: np.ndarray) -> np.ndarray:
    """Mean spikes per step of every neuron (last axis) over all other axes."""
    raster = np.asarray(raster, dtype=np.float64)
    return raster.reshape(-1, raster.shape[-1]).mean(axis=0)


def rate_penalty(rates: Mapping[str, np.ndarray], lambda_rho: float, rho_0: float = 0.0) -> float:
    return float(sum(lambda_rho * float(np.mean((rho_0 - r) ** 2)) for r in rates.values()))


def rate_regularizer(rasters: Mapping[str, np.ndarray], lambda_rho: float, rho_0: float = 0.0) -> float:
    """Sum over layers of lambda * mean_i (rho_0 - rho_i)^2.

    Each raster's last axis indexes neurons; rho_i averages over every other axis
    (time and batch), so rates are in spikes per time step.
    """
    return rate_penalty({name: spike_rates(r) for name, r in rasters.items()}, lambda_rho, rho_0)


def _raster_rates(raster: ComputeNode) -> ComputeNode:
    return ad.mean(ad.reshape(raster, (-1, raster.shape[-1])), axis=0)


def rate_regularizer_node(
    rasters: Mapping[str, ComputeNode],
    lambda_rho: float,
    rho_0: float = 0.0,
) -> ComputeNode:
    """Graph form of rate_regularizer over (T, B, n) spike raster nodes."""
    terms = [
        ad.scale(ad.mean(ad.square(ad.shift(_raster_rates(raster), -rho_0))), lambda_rho)
        for raster in rasters.values()
        if raster.values.size
    ]
    if not terms:
        return ad.constant(0.0)
    return ad.add_n(terms)


def rate_slopes(rates: Mapping[str, np.ndarray], lambda_rho: float, rho_0: float = 0.0) -> dict[str, np.ndarray]:
    """d rate_penalty / d rho_i for every layer."""
    return {name: 2.0 * lambda_rho * (r - rho_0) / r.size for name, r in rates.items()}


def rate_gradient_node(rasters: Mapping[str, ComputeNode], slopes: Mapping[str, np.ndarray]) -> ComputeNode:
    """sum_i slope_i * rho_i: carries the penalty's gradient at fixed slopes, not its value."""
    terms = [
        ad.sum(ad.mul(_raster_rates(raster), ad.constant(slopes[name])))
        for name, raster in rasters.items()
        if raster.values.size
    ]
    if not terms:
        return ad.constant(0.0)
    return ad.add_n(terms)


def batch_rates(params: ModelParams, model_config: ModelConfig, batch: EpisodeBatch) -> dict[str, np.ndarray]:
    """Per-layer spike rates over the whole batch, without recording a graph."""
    with ad.no_grad():
        out = run_batch(params, model_config, batch)
    return {name: spike_rates(raster.values) for name, raster in out.rasters.items() if raster.values.size}


def learning_rate(config: TrainConfig, iteration: int) -> float:
    return config.lr * config.lr_decay ** (iteration // config.decay_interval)


#------------------Training step-------------------
@dataclass(frozen=True)
class StepResult:
    loss: float
    reg_loss: float
    accuracy: float
    grad_norm: float


def train_step(
    params: ModelParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    batch: EpisodeBatch,
    adam: AdamState,
    iteration: int,
) -> tuple[StepResult, AdamState]:
    """Forward and backward in micro-batches, then one clipped Adam update.

    Micro-batch losses are weighted by their share of the batch and their gradients
    summed in index order. The rate regularizer always uses rates over the whole
    batch: with several micro-batches a graph-free pass measures them first and
    every micro-batch then contributes its share of the regularizer's gradient.
    """
    params.zero_grad()
    regularize = train_config.lambda_rho > 0 and iteration >= train_config.reg_warmup
    lam, rho_0 = train_config.lambda_rho, train_config.rho_0
    parts = [
        batch.select(slice(start, start + train_config.micro_batch))
        for start in range(0, batch.size, train_config.micro_batch)
    ]
    slopes = None
    loss = reg_loss = 0.0
    if regularize and len(parts) > 1:
        rates = batch_rates(params, model_config, batch)
        reg_loss = rate_penalty(rates, lam, rho_0)
        slopes = rate_slopes(rates, lam, rho_0)

    correct = 0
    for part in parts:
        weight = part.size / batch.size
        out = run_batch(params, model_config, part)
        ce = crossentropy_node(out.logits, part.targets)
        total = ce
        if regularize and slopes is None:
            reg = rate_regularizer_node(out.rasters, lam, rho_0)
            reg_loss = reg.item()
            total = ad.add(ce, reg)
        elif regularize:
            total = ad.add(ce, rate_gradient_node(out.rasters, slopes))
        loss += weight * ce.item()
        correct += int(np.sum(predictions(out.logits.values) == part.targets))
        ad.backward(ad.scale(total, weight))

    if not math.isfinite(loss) or not math.isfinite(reg_loss):
        raise NumericError(f"non-finite loss at iteration {iteration}: loss={loss} reg={reg_loss}")
    grads = params.grads()
    norm = global_norm(grads)
    new_arrays, adam = adam_step(
        params.arrays(), clip_gradients(grads, train_config.clip_norm), adam, learning_rate(train_config, iteration)
    )
    params.assign(new_arrays)
    return StepResult(loss, reg_loss, correct / batch.size, norm), adam


#------------------train_association-------------------
@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    validation: dict[int, float] = field(default_factory=dict)


def check_compatible(model_config: ModelConfig, task_config: AssociationTaskConfig) -> None:
    if model_config.input_dim != task_config.vec_dim:
        raise ArgumentError(f"model input_dim={model_config.input_dim} differs from task vec_dim={task_config.vec_dim}")
    if model_config.label_range < task_config.output_range:
        raise ArgumentError(
            f"model label_range={model_config.label_range} is smaller than the task's label range {task_config.output_range}"
        )
    if not model_config.label_encoder:
        raise ArgumentError("the association task needs a label encoder")


def train_association(
    train_config: TrainConfig,
    model_config: ModelConfig,
    task_config: AssociationTaskConfig,
    out_dir: Optional[Path] = None,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """Fresh batch per iteration, BPTT through the whole episode, clipped Adam."""
    check_compatible(model_config, task_config)
    seed = train_config.seed
    if params is None:
        params = init_model_params(model_config, stream_rng(seed, "init"), train_config.init_gain)
    adam = AdamState.zeros(params.arrays())
    batches = stream_rng(seed, "train")

    result = TrainResult(params)
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        metrics = MetricsLog(out_dir / "metrics.csv", METRICS_HEADER)
        result.metrics_path = metrics.path
        result.checkpoint_path = out_dir / CHECKPOINT_NAME

    def checkpoint(iteration: int) -> None:
        if result.checkpoint_path is not None:
            save_model(result.checkpoint_path, params, model_config, {"iteration": iteration, "seed": seed})

    for it in range(train_config.iterations):
        started = time.perf_counter()
        batch = gen_batch(task_config, batches, train_config.batch_size)
        try:
            step, adam = train_step(params, model_config, train_config, batch, adam, it)
        except NumericError as e:
            logger.error("training diverged at iteration %d: %s (last checkpoint kept)", it, e)
            raise
        wall_ms = (time.perf_counter() - started) * 1000.0 if train_config.record_timing else 0
        row = {
            "iteration": it,
            "loss": step.loss,
            "reg_loss": step.reg_loss,
            "accuracy": step.accuracy,
            "lr": learning_rate(train_config, it),
            "wall_ms": wall_ms,
        }
        result.history.append(row)
        if metrics is not None:
            metrics.append(row)

        if train_config.log_every and (it + 1) % train_config.log_every == 0:
            logger.info("iter %d loss=%.4f reg=%.2e acc=%.3f lr=%.2e |g|=%.2f",
                        it + 1, step.loss, step.reg_loss, step.accuracy, row["lr"], step.grad_norm)
        else:
            logger.debug("iter %d loss=%.4f acc=%.3f |g|=%.2f", it + 1, step.loss, step.accuracy, step.grad_norm)

        if train_config.eval_every and (it + 1) % train_config.eval_every == 0:
            acc = evaluate_accuracy(
                params, model_config, task_config, train_config.eval_episodes,
                n=task_config.n_train, rng=stream_rng(seed, "validation"),
            )
            result.validation[it + 1] = acc
            logger.info("iter %d validation accuracy=%.4f", it + 1, acc)

        if train_config.checkpoint_every and (it + 1) % train_config.checkpoint_every == 0:
            checkpoint(it + 1)

    checkpoint(train_config.iterations)
    return result


def ablate_memory(model_config: ModelConfig) -> ModelConfig:
    """Same network with the association matrix clamped at zero."""
    return replace(model_config, hebbian=replace(model_config.hebbian, plasticity="off"))
