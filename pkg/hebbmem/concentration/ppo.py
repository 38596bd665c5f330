#==============================================================
# PpoConfig, PolicyParams, orthogonal_init, compute_returns
# collect_rollout, ppo_update, ppo_train, evaluate_agent
# save_policy, load_policy
#==============================================================

from __future__ import annotations

#---------------------Standard Library---------------------
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

#---------------------Third-Party---------------------
import numpy as np

#---------------------Local---------------------
from .. import autodiff as ad
from ..autodiff import ComputeNode
from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import ArgumentError, CheckpointError, NumericError
from ..export import FLIP_HISTORY_HEADER, MetricsLog
from ..memory import HebbianMemoryState
from ..model import ModelConfig, ModelParams, expected_param_shapes, init_carry, run_rl_step
from ..tasks import stream_rng
from ..training import AdamState, adam_step, clip_gradients, global_norm, init_model_params
from .env import GameRecord, VectorEnv, observation_dim

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.hmem"
HEAD_NAMES = ("actor", "critic")


#---------------------PpoConfig---------------------
@dataclass(frozen=True)
class PpoConfig:
    n_pairs: int = 2
    n_envs: int = 64
    rollout_steps: int = 10
    iterations: int = 4000
    epochs: int = 4
    minibatches: int = 16
    lr: float = 3e-4
    value_coef: float = 0.1
    entropy_coef: float = 0.01
    gamma: float = 0.9
    clip: float = 0.2
    reward_pair: float = 25.0
    penalty_flip: float = 0.5
    grad_clip: float = 0.5
    gae_lambda: float = 1.0
    new_deck: bool = False
    max_game_steps: int = 100
    norm_adv: bool = True
    hidden: int = 100
    init_gain: float = math.sqrt(2.0)
    seed: int = 0
    eval_games: int = 1000
    log_every: int = 10
    checkpoint_every: int = 100

    def issues(self) -> list[str]:
        issues = []
        if not 0 < self.clip < 1:
            issues.append(f"clip must lie in (0, 1), got {self.clip}")
        if not 0 < self.gamma <= 1:
            issues.append(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            issues.append(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.n_pairs < 1 or self.n_envs < 1 or self.rollout_steps < 1 or self.hidden < 1:
            issues.append("n_pairs, n_envs, rollout_steps and hidden must be positive")
        if self.minibatches < 1 or self.n_envs % self.minibatches:
            issues.append(f"minibatches={self.minibatches} must divide n_envs={self.n_envs}")
        if self.lr <= 0 or self.grad_clip <= 0:
            issues.append("lr and grad_clip must be positive")
        if self.iterations < 0 or self.epochs < 1 or self.max_game_steps < 1:
            issues.append("iterations cannot be negative; epochs and max_game_steps must be positive")
        return issues

    def __post_init__(self):
        issues = self.issues()
        if issues:
            raise ArgumentError("; ".join(issues))

    @property
    def n_actions(self) -> int:
        return 2 * self.n_pairs


def rl_model_config(base: ModelConfig, config: PpoConfig) -> ModelConfig:
    """Single-encoder network without readout layer, sized for the game's observation."""
    return replace(base, input_dim=observation_dim(config.n_pairs), label_encoder=0, output_dim=0)


#---------------------Parameters---------------------
def orthogonal_init(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def head_shapes(model_config: ModelConfig, config: PpoConfig) -> dict[str, tuple[int, ...]]:
    h, l = config.hidden, model_config.l
    inputs = {"actor": l, "critic": l + model_config.input_dim}
    outputs = {"actor": config.n_actions, "critic": 1}
    shapes = {}
    for head in HEAD_NAMES:
        shapes[f"{head}.w1"] = (h, inputs[head])
        shapes[f"{head}.b1"] = (h,)
        shapes[f"{head}.w2"] = (h, h)
        shapes[f"{head}.b2"] = (h,)
        shapes[f"{head}.w3"] = (outputs[head], h)
        shapes[f"{head}.b3"] = (outputs[head],)
    return shapes


def policy_param_shapes(model_config: ModelConfig, config: PpoConfig) -> dict[str, tuple[int, ...]]:
    return {**expected_param_shapes(model_config), **head_shapes(model_config, config)}


@dataclass
class PolicyParams:
    snn: ModelParams
    heads: dict[str, ComputeNode]

    def named(self) -> dict[str, ComputeNode]:
        return {**self.snn.named(), **self.heads}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.values.copy() for name, node in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PolicyParams":
        heads = {k: ad.parameter(v, name=k) for k, v in arrays.items() if k.split(".")[0] in HEAD_NAMES}
        snn = {k: v for k, v in arrays.items() if k not in heads}
        return cls(ModelParams.from_arrays(snn), heads)

    def zero_grad(self) -> None:
        for node in self.named().values():
            node.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.values)
            for name, node in self.named().items()
        }

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        for name, node in self.named().items():
            node.values = np.asarray(arrays[name], dtype=np.float64)


def init_policy_params(model_config: ModelConfig, config: PpoConfig, rng: np.random.Generator) -> PolicyParams:
    """Glorot SNN weights; orthogonal heads with zero biases and small output layers."""
    snn = init_model_params(model_config, rng, config.init_gain)
    out_gain = {"actor": 0.01, "critic": 1.0}
    heads = {}
    for name, shape in head_shapes(model_config, config).items():
        head, layer = name.split(".")
        if layer.startswith("b"):
            values = np.zeros(shape)
        else:
            values = orthogonal_init(shape, out_gain[head] if layer == "w3" else config.init_gain, rng)
        heads[name] = ad.parameter(values, name=name)
    return PolicyParams(snn, heads)


#---------------------Forward---------------------
def mlp(x: ComputeNode, heads: dict[str, ComputeNode], head: str) -> ComputeNode:
    h = ad.tanh(ad.add_bias(ad.matmul(x, heads[f"{head}.w1"]), heads[f"{head}.b1"]))
    h = ad.tanh(ad.add_bias(ad.matmul(h, heads[f"{head}.w2"]), heads[f"{head}.b2"]))
    return ad.add_bias(ad.matmul(h, heads[f"{head}.w3"]), heads[f"{head}.b3"])


def policy_forward(
    params: PolicyParams,
    model_config: ModelConfig,
    observations: np.ndarray,
    carry: HebbianMemoryState,
) -> tuple[ComputeNode, ComputeNode, HebbianMemoryState]:
    """Action logits (B, 2n), state values (B,) and the advanced network state.

    Heads see readout counts divided by the window length; the critic also gets
    the raw observation.
    """
    counts, carry = run_rl_step(params.snn, model_config, observations, carry)
    features = ad.scale(counts, 1.0 / model_config.read_steps)
    logits = mlp(features, params.heads, "actor")
    value = ad.sum(mlp(ad.concat([features, ad.constant(observations)]), params.heads, "critic"), axis=1)
    return logits, value, carry


def sample_actions(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """1-based categorical samples, one uniform draw per row."""
    cdf = np.cumsum(np.exp(log_probs), axis=1)
    u = rng.random(log_probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), log_probs.shape[1] - 1) + 1


def entropy(log_probs: ComputeNode) -> ComputeNode:
    return ad.scale(ad.sum(ad.mul(ad.exp(log_probs), log_probs), axis=1), -1.0)


def clipped_surrogate(ratio: ComputeNode, advantages: np.ndarray, clip: float) -> ComputeNode:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A); the policy loss is its negated mean."""
    adv = ad.constant(advantages)
    return ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1.0 - clip, 1.0 + clip), adv))


#---------------------Returns---------------------
def compute_returns(
    rewards: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    bootstrap,
    values: Optional[np.ndarray] = None,
    gae_lambda: float = 1.0,
) -> np.ndarray:
    """Discounted returns over a (T,) or (T, E) segment, bootstrapped past its end.

    With values given the result is GAE(lambda) advantages plus values, which for
    lambda = 1 is the plain discounted return.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    live = 1.0 - np.asarray(dones, dtype=np.float64)
    bootstrap = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), rewards.shape[1:])
    returns = np.zeros_like(rewards)
    if values is None:
        running = bootstrap.copy()
        for t in reversed(range(rewards.shape[0])):
            running = rewards[t] + gamma * live[t] * running
            returns[t] = running
        return returns
    values = np.asarray(values, dtype=np.float64)
    next_value, running = bootstrap, np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        delta = rewards[t] + gamma * live[t] * next_value - values[t]
        running = delta + gamma * gae_lambda * live[t] * running
        returns[t] = running + values[t]
        next_value = values[t]
    return returns


#---------------------Rollouts---------------------
@dataclass
class Rollout:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    start_carry: HebbianMemoryState
    bootstrap: np.ndarray


def collect_rollout(
    params: PolicyParams,
    model_config: ModelConfig,
    config: PpoConfig,
    envs: VectorEnv,
    observations: np.ndarray,
    carry: HebbianMemoryState,
    rng: np.random.Generator,
) -> tuple[Rollout, np.ndarray, HebbianMemoryState]:
    """Step every environment rollout_steps times with sampled actions, no graph recorded."""
    T, E = config.rollout_steps, envs.n_envs
    obs_buf = np.zeros((T, E, envs.obs_dim))
    actions = np.zeros((T, E), dtype=np.int64)
    log_probs, values, rewards = np.zeros((T, E)), np.zeros((T, E)), np.zeros((T, E))
    dones = np.zeros((T, E), dtype=bool)
    start_carry = carry.detach()
    with ad.no_grad():
        for t in range(T):
            logits, value, carry = policy_forward(params, model_config, observations, carry)
            logp = ad.log_softmax(logits).values
            action = sample_actions(logp, rng)
            obs_buf[t], actions[t], values[t] = observations, action, value.values
            log_probs[t] = logp[np.arange(E), action - 1]
            observations, rewards[t], dones[t] = envs.step(action)
            if dones[t].any():
                carry = carry.reset_rows(~dones[t])
        _, bootstrap, _ = policy_forward(params, model_config, observations, carry)
    rollout = Rollout(obs_buf, actions, log_probs, values, rewards, dones, start_carry, bootstrap.values.copy())
    return rollout, observations, carry.detach()


@dataclass(frozen=True)
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float


def ppo_update(
    params: PolicyParams,
    model_config: ModelConfig,
    config: PpoConfig,
    rollout: Rollout,
    adam: AdamState,
    rng: np.random.Generator,
) -> tuple[UpdateStats, AdamState]:
    """Clipped-surrogate epochs over minibatches of environments.

    Each minibatch re-simulates its environments from the carried state at the
    rollout start, so backpropagation is truncated at the rollout boundary.
    """
    returns = compute_returns(
        rollout.rewards, rollout.dones, config.gamma, rollout.bootstrap, rollout.values, config.gae_lambda
    )
    advantages = returns - rollout.values
    T, E = rollout.rewards.shape
    sums = np.zeros(4)
    updates = 0
    for _ in range(config.epochs):
        for envs in np.array_split(rng.permutation(E), config.minibatches):
            envs = np.sort(envs)
            adv = advantages[:, envs]
            if config.norm_adv:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            params.zero_grad()
            carry = rollout.start_carry.take_rows(envs)
            surrogate, value_err, ent = [], [], []
            for t in range(T):
                logits, value, carry = policy_forward(params, model_config, rollout.observations[t, envs], carry)
                logp = ad.log_softmax(logits)
                taken = ad.gather(logp, rollout.actions[t, envs] - 1)
                ratio = ad.exp(ad.sub(taken, ad.constant(rollout.log_probs[t, envs])))
                surrogate.append(clipped_surrogate(ratio, adv[t], config.clip))
                value_err.append(ad.square(ad.sub(value, ad.constant(returns[t, envs]))))
                ent.append(entropy(logp))
                done = rollout.dones[t, envs]
                if done.any():
                    carry = carry.reset_rows(~done)
            policy_loss = -ad.mean(ad.concat(surrogate))
            value_loss = ad.mean(ad.concat(value_err))
            mean_entropy = ad.mean(ad.concat(ent))
            loss = policy_loss + value_loss * config.value_coef - mean_entropy * config.entropy_coef
            if not np.isfinite(loss.values):
                raise NumericError(f"non-finite PPO loss (policy={policy_loss.item()}, value={value_loss.item()})")
            ad.backward(loss)
            grads = params.grads()
            norm = global_norm(grads)
            new_arrays, adam = adam_step(params.arrays(), clip_gradients(grads, config.grad_clip), adam, config.lr)
            params.assign(new_arrays)
            sums += (policy_loss.item(), value_loss.item(), mean_entropy.item(), norm)
            updates += 1
    means = sums / max(updates, 1)
    return UpdateStats(*map(float, means)), adam


#---------------------Training---------------------
@dataclass
class PpoResult:
    params: PolicyParams
    model_config: ModelConfig
    history: list[tuple[int, int, float]] = field(default_factory=list)
    iteration_mean_flips: list[float] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None


def ppo_train(
    config: PpoConfig,
    model_config: ModelConfig,
    out_dir: Optional[Path] = None,
    params: Optional[PolicyParams] = None,
) -> PpoResult:
    """Train the memory network and its heads on the card game.

    Network state carries across steps within a game and across rollouts; it is
    zeroed for an environment whenever its game ends.
    """
    model_config = rl_model_config(model_config, config)
    seed = config.seed
    if params is None:
        params = init_policy_params(model_config, config, stream_rng(seed, "init"))
    envs = VectorEnv(config.n_envs, config.n_pairs, seed, config.new_deck, config.reward_pair, config.penalty_flip)
    policy_rng = stream_rng(seed, "policy")
    adam = AdamState.zeros(params.arrays())

    result = PpoResult(params, model_config)
    flip_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        flip_log = MetricsLog(out_dir / "flip_history.csv", FLIP_HISTORY_HEADER)
        result.history_path = flip_log.path
        result.checkpoint_path = out_dir / CHECKPOINT_NAME

    def checkpoint(iteration: int) -> None:
        if result.checkpoint_path is not None:
            save_policy(result.checkpoint_path, params, model_config, config, {"iteration": iteration, "seed": seed})

    observations = envs.reset()
    carry = init_carry(params.snn, model_config, config.n_envs)
    for it in range(config.iterations):
        started = time.perf_counter()
        rollout, observations, carry = collect_rollout(params, model_config, config, envs, observations, carry, policy_rng)
        try:
            stats, adam = ppo_update(params, model_config, config, rollout, adam, policy_rng)
        except NumericError as e:
            logger.error("PPO diverged at iteration %d: %s (last checkpoint kept)", it, e)
            raise
        games = envs.drain_finished()
        for game in games:
            row = (len(result.history), game.n_flips, game.total_reward)
            result.history.append(row)
            if flip_log is not None:
                flip_log.append(dict(zip(FLIP_HISTORY_HEADER, row)))
        mean_flips = float(np.mean([g.n_flips for g in games])) if games else float("nan")
        result.iteration_mean_flips.append(mean_flips)

        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info("iter %d games=%d mean_flips=%.2f entropy=%.3f value_loss=%.3f (%.1fs)",
                        it + 1, len(result.history), mean_flips, stats.entropy, stats.value_loss,
                        time.perf_counter() - started)
        else:
            logger.debug("iter %d mean_flips=%.2f policy_loss=%.4f |g|=%.3f",
                         it + 1, mean_flips, stats.policy_loss, stats.grad_norm)
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint(it + 1)

    checkpoint(config.iterations)
    return result


#---------------------Evaluation---------------------
@dataclass
class AgentEvaluation:
    flips: np.ndarray
    rewards: np.ndarray
    truncated: int

    @property
    def mean_flips(self) -> float:
        return float(self.flips.mean())


def evaluate_agent(
    params: PolicyParams,
    model_config: ModelConfig,
    config: PpoConfig,
    n_games: int,
    greedy: bool = True,
    seed: Optional[int] = None,
) -> AgentEvaluation:
    """Play n_games on held-out shuffles; games longer than max_game_steps are cut off."""
    if n_games < 1:
        raise ArgumentError(f"n_games must be at least 1, got {n_games}")
    seed = config.seed if seed is None else seed
    n_envs = min(n_games, config.n_envs)
    envs = VectorEnv(n_envs, config.n_pairs, seed, config.new_deck, config.reward_pair, config.penalty_flip,
                     stream="heldout")
    rng = stream_rng(seed, "heldout")
    observations = envs.reset()
    carry = init_carry(params.snn, model_config, n_envs)
    steps = np.zeros(n_envs, dtype=np.int64)
    records: list[GameRecord] = []
    truncated = 0
    with ad.no_grad():
        while len(records) < n_games:
            logits, _, carry = policy_forward(params, model_config, observations, carry)
            logp = ad.log_softmax(logits).values
            actions = np.argmax(logp, axis=1) + 1 if greedy else sample_actions(logp, rng)
            observations, _, dones = envs.step(actions)
            records.extend(envs.drain_finished())
            steps += 1
            cut = (steps >= config.max_game_steps) & ~dones
            for i in np.flatnonzero(cut):
                records.append(GameRecord(int(steps[i]), envs.envs[i].state.total_reward))
                observations[i] = envs.reset_env(i)
                truncated += 1
            ended = dones | cut
            if ended.any():
                carry = carry.reset_rows(~ended)
                steps[ended] = 0
    records = records[:n_games]
    if truncated:
        logger.warning("%d of %d evaluation games hit the %d-flip cap", truncated, n_games, config.max_game_steps)
    return AgentEvaluation(
        np.array([r.n_flips for r in records], dtype=np.int64),
        np.array([r.total_reward for r in records]),
        truncated,
    )


#---------------------Persistence---------------------
def save_policy(
    path: Path,
    params: PolicyParams,
    model_config: ModelConfig,
    config: PpoConfig,
    metadata: Optional[dict[str, Any]] = None,
) -> Path:
    header = {"kind": "policy", "model": model_config.to_dict(), "ppo": asdict(config)}
    return save_checkpoint(path, params.arrays(), header, metadata)


def load_policy(path: Path) -> tuple[PolicyParams, ModelConfig, PpoConfig, dict[str, Any]]:
    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "policy":
        raise CheckpointError(f"{path}: not a card-game policy checkpoint")
    try:
        model_config = ModelConfig.from_dict(ckpt.config["model"])
        config = PpoConfig(**ckpt.config["ppo"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid policy config: {e}") from e
    shapes = policy_param_shapes(model_config, config)
    if set(shapes) != set(ckpt.arrays):
        raise CheckpointError(f"{path}: tensors {sorted(ckpt.arrays)} do not match expected {sorted(shapes)}")
    for name, shape in shapes.items():
        if ckpt.arrays[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {ckpt.arrays[name].shape}, expected {shape}")
    return PolicyParams.from_arrays(ckpt.arrays), model_config, config, ckpt.metadata
