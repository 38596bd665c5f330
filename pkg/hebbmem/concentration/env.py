#==============================================================
# CellStatus, ConcentrationState, Observation
# env_reset, env_step, ConcentrationEnv, VectorEnv
#==============================================================

from __future__ import annotations

#---------------------Standard Library---------------------
import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

#---------------------Third-Party---------------------
import numpy as np

#---------------------Local---------------------
from ..errors import ArgumentError
from ..tasks import stream_rng

logger = logging.getLogger(__name__)

FACE_DIM = 10
REWARD_PAIR = 25.0
PENALTY_FLIP = 0.5


class CellStatus(IntEnum):
    EMPTY = 0
    FACE_DOWN = 1
    FACE_UP = 2


def observation_dim(n_pairs: int) -> int:
    cells = 2 * n_pairs
    return cells * len(CellStatus) + cells + FACE_DIM


#---------------------State-------------------------------
@dataclass(frozen=True, eq=False)
class ConcentrationState:
    """One solitaire game. Cells are 0-based here; actions are 1-based."""

    n_pairs: int
    faces: np.ndarray
    pair_ids: np.ndarray
    cell_status: np.ndarray
    prev_action: Optional[int] = None
    prev_revealed: np.ndarray = field(default_factory=lambda: np.zeros(FACE_DIM))
    flips_so_far: int = 0
    total_reward: float = 0.0
    # mismatched cards, turned face down at the start of the next step
    pending_hide: tuple[int, ...] = ()

    @property
    def n_cells(self) -> int:
        return 2 * self.n_pairs

    @property
    def removed(self) -> np.ndarray:
        return self.cell_status == CellStatus.EMPTY

    @property
    def done(self) -> bool:
        return bool(np.all(self.removed))

    def face_up_cells(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.cell_status == CellStatus.FACE_UP)]


@dataclass(frozen=True, eq=False)
class Observation:
    cell_onehots: np.ndarray
    prev_action_onehot: np.ndarray
    prev_card: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.cell_onehots.reshape(-1), self.prev_action_onehot, self.prev_card])

    @property
    def dim(self) -> int:
        return self.cell_onehots.size + self.prev_action_onehot.size + self.prev_card.size


def observe(state: ConcentrationState) -> Observation:
    onehots = np.zeros((state.n_cells, len(CellStatus)))
    onehots[np.arange(state.n_cells), state.cell_status] = 1.0
    action = np.zeros(state.n_cells)
    if state.prev_action is not None:
        action[state.prev_action - 1] = 1.0
    return Observation(onehots, action, state.prev_revealed.copy())


#---------------------Transitions---------------------
def draw_deck(n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random((n_pairs, FACE_DIM))


def env_reset(
    n_pairs: int,
    rng: np.random.Generator,
    deck: Optional[np.ndarray] = None,
) -> tuple[ConcentrationState, Observation]:
    """Shuffle the pairs of `deck` (or a freshly drawn one) face down onto 2n cells."""
    if n_pairs < 1:
        raise ArgumentError(f"n_pairs must be at least 1, got {n_pairs}")
    deck = draw_deck(n_pairs, rng) if deck is None else np.asarray(deck, dtype=np.float64)
    if deck.shape != (n_pairs, FACE_DIM):
        raise ArgumentError(f"deck shape {deck.shape} does not match ({n_pairs}, {FACE_DIM})")
    pair_ids = np.repeat(np.arange(n_pairs), 2)[rng.permutation(2 * n_pairs)]
    state = ConcentrationState(
        n_pairs=n_pairs,
        faces=deck[pair_ids],
        pair_ids=pair_ids,
        cell_status=np.full(2 * n_pairs, CellStatus.FACE_DOWN, dtype=np.int64),
    )
    return state, observe(state)


def env_step(
    state: ConcentrationState,
    action: int,
    reward_pair: float = REWARD_PAIR,
    penalty_flip: float = PENALTY_FLIP,
) -> tuple[Observation, float, bool, ConcentrationState]:
    """Flip the card at 1-based `action`.

    Every flip costs the penalty. Flipping an empty cell reveals nothing, flipping a
    face-up card turns it face down again. A second face-up card either completes a
    pair (both removed, reward_pair paid) or both turn face down on the next step.
    """
    if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
        raise ArgumentError(f"action must be an integer cell index, got {action!r}")
    action = int(action)
    if not 1 <= action <= state.n_cells:
        raise ArgumentError(f"action {action} outside [1, {state.n_cells}]")

    status = state.cell_status.copy()
    for cell in state.pending_hide:
        if status[cell] == CellStatus.FACE_UP:
            status[cell] = CellStatus.FACE_DOWN

    cell = action - 1
    reward = -penalty_flip
    revealed = np.zeros(FACE_DIM)
    pending: tuple[int, ...] = ()
    if status[cell] == CellStatus.FACE_UP:
        status[cell] = CellStatus.FACE_DOWN
    elif status[cell] == CellStatus.FACE_DOWN:
        status[cell] = CellStatus.FACE_UP
        revealed = state.faces[cell].copy()
        up = np.flatnonzero(status == CellStatus.FACE_UP)
        if len(up) == 2:
            a, b = int(up[0]), int(up[1])
            if state.pair_ids[a] == state.pair_ids[b]:
                status[[a, b]] = CellStatus.EMPTY
                reward += reward_pair
            else:
                pending = (a, b)

    next_state = replace(
        state,
        cell_status=status,
        prev_action=action,
        prev_revealed=revealed,
        flips_so_far=state.flips_so_far + 1,
        total_reward=state.total_reward + reward,
        pending_hide=pending,
    )
    return observe(next_state), reward, next_state.done, next_state


#---------------------ConcentrationEnv---------------------
class ConcentrationEnv:
    """A game that restarts itself: the fixed deck is reshuffled each game, or redrawn in new-deck mode."""

    def __init__(
        self,
        n_pairs: int,
        rng: np.random.Generator,
        new_deck: bool = False,
        reward_pair: float = REWARD_PAIR,
        penalty_flip: float = PENALTY_FLIP,
        deck: Optional[np.ndarray] = None,
    ):
        self.n_pairs = n_pairs
        self.rng = rng
        self.new_deck = new_deck
        self.reward_pair = reward_pair
        self.penalty_flip = penalty_flip
        self.deck = draw_deck(n_pairs, rng) if deck is None else np.asarray(deck, dtype=np.float64)
        self.state: Optional[ConcentrationState] = None

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.n_pairs)

    def reset(self) -> np.ndarray:
        if self.new_deck:
            self.deck = draw_deck(self.n_pairs, self.rng)
        self.state, obs = env_reset(self.n_pairs, self.rng, self.deck)
        return obs.as_vector()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            self.reset()
        obs, reward, done, self.state = env_step(self.state, action, self.reward_pair, self.penalty_flip)
        return obs.as_vector(), reward, done


@dataclass(frozen=True)
class GameRecord:
    n_flips: int
    total_reward: float


class VectorEnv:
    """Independently seeded environments stepped together in index order.

    In fixed-deck mode every environment shares one deck drawn from the run's env
    stream, so evaluation with the same seed plays the cards training saw.

    Finished games are recorded and their environment reset in the same call, so
    the returned observation is the first observation of the next game.
    """

    def __init__(
        self,
        n_envs: int,
        n_pairs: int,
        seed: int,
        new_deck: bool = False,
        reward_pair: float = REWARD_PAIR,
        penalty_flip: float = PENALTY_FLIP,
        stream: str = "env",
    ):
        if n_envs < 1:
            raise ArgumentError(f"n_envs must be at least 1, got {n_envs}")
        deck = None if new_deck else draw_deck(n_pairs, stream_rng(seed, "env"))
        self.envs = [
            ConcentrationEnv(n_pairs, stream_rng(seed, stream, i + 1), new_deck, reward_pair, penalty_flip, deck)
            for i in range(n_envs)
        ]
        self.finished: list[GameRecord] = []

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    @property
    def obs_dim(self) -> int:
        return self.envs[0].obs_dim

    def reset(self) -> np.ndarray:
        return np.stack([env.reset() for env in self.envs])

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        observations, rewards, dones = [], [], []
        for env, action in zip(self.envs, actions):
            obs, reward, done = env.step(int(action))
            if done:
                self.finished.append(GameRecord(env.state.flips_so_far, env.state.total_reward))
                obs = env.reset()
            observations.append(obs)
            rewards.append(reward)
            dones.append(done)
        return np.stack(observations), np.array(rewards), np.array(dones, dtype=bool)

    def reset_env(self, index: int) -> np.ndarray:
        return self.envs[index].reset()

    def drain_finished(self) -> list[GameRecord]:
        games, self.finished = self.finished, []
        return games
