#==============================================================
# random_agent_eval, optimal_agent_eval, MemoryPerfectAgent
# exact_optimal_flips, expected_random_flips, asymptotic_optimal_flips
#==============================================================

from __future__ import annotations

#---------------------Standard Library---------------------
import logging
import math
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional

#---------------------Third-Party---------------------
import numpy as np

#---------------------Local---------------------
from ..errors import ArgumentError
from .env import CellStatus, ConcentrationState, env_reset, env_step

logger = logging.getLogger(__name__)

Policy = Callable[[ConcentrationState, np.random.Generator], int]


#---------------------Game loop---------------------
def play_game(
    n_pairs: int,
    policy: Policy,
    rng: np.random.Generator,
    max_steps: int = 100_000,
) -> ConcentrationState:
    """Play one game to completion; raises if it runs past max_steps."""
    state, _ = env_reset(n_pairs, rng)
    while not state.done:
        if state.flips_so_far >= max_steps:
            raise ArgumentError(f"game did not finish within {max_steps} flips")
        _, _, _, state = env_step(state, policy(state, rng))
    return state


def random_policy(state: ConcentrationState, rng: np.random.Generator) -> int:
    return int(rng.integers(1, state.n_cells + 1))


class MemoryPerfectAgent:
    """Remembers every face it has seen and never wastes a flip it can avoid.

    Turn start: flip a known unremoved pair if there is one, else an unseen card.
    Second flip: the partner if its location is known, else another unseen card.
    The agent only reads what an observation shows (revealed faces and cell status).
    """

    def __init__(self):
        self.seen: dict[int, bytes] = {}

    def reset(self) -> None:
        self.seen.clear()

    def __call__(self, state: ConcentrationState, rng: np.random.Generator) -> int:
        if state.flips_so_far == 0:
            self.reset()
        if state.prev_action is not None and np.any(state.prev_revealed):
            self.seen[state.prev_action - 1] = state.prev_revealed.tobytes()

        live = [c for c in range(state.n_cells) if state.cell_status[c] != CellStatus.EMPTY]
        for c in list(self.seen):
            if c not in live:
                del self.seen[c]
        unseen = [c for c in live if c not in self.seen]

        up = [c for c in live if state.cell_status[c] == CellStatus.FACE_UP and c not in state.pending_hide]
        if len(up) == 1:
            open_cell = up[0]
            partner = self._partner(open_cell)
            if partner is not None:
                return partner + 1
            return int(rng.choice([c for c in unseen if c != open_cell])) + 1

        by_face: dict[bytes, list[int]] = {}
        for c, face in self.seen.items():
            by_face.setdefault(face, []).append(c)
        known_pairs = sorted(cells for cells in by_face.values() if len(cells) == 2)
        if known_pairs:
            return min(known_pairs[0]) + 1
        return int(rng.choice(unseen)) + 1

    def _partner(self, cell: int) -> Optional[int]:
        face = self.seen.get(cell)
        for other, other_face in self.seen.items():
            if other != cell and other_face == face:
                return other
        return None


#---------------------Monte Carlo baselines---------------------
def _flip_counts(n_pairs: int, n_games: int, policy_factory, rng: np.random.Generator) -> np.ndarray:
    if n_pairs < 1 or n_games < 1:
        raise ArgumentError("n_pairs and n_games must be at least 1")
    counts = np.empty(n_games, dtype=np.int64)
    for g in range(n_games):
        counts[g] = play_game(n_pairs, policy_factory(), rng).flips_so_far
    return counts


def random_agent_flips(n_pairs: int, n_games: int, rng: np.random.Generator) -> np.ndarray:
    """Flip counts of games played by uniformly random flips over all 2n cells."""
    return _flip_counts(n_pairs, n_games, lambda: random_policy, rng)


def optimal_agent_flips(n_pairs: int, n_games: int, rng: np.random.Generator) -> np.ndarray:
    return _flip_counts(n_pairs, n_games, MemoryPerfectAgent, rng)


def random_agent_eval(n_pairs: int, n_games: int, rng: np.random.Generator) -> float:
    mean = float(random_agent_flips(n_pairs, n_games, rng).mean())
    logger.debug("random agent n=%d over %d games: %.3f flips", n_pairs, n_games, mean)
    return mean


def optimal_agent_eval(n_pairs: int, n_games: int, rng: np.random.Generator) -> float:
    mean = float(optimal_agent_flips(n_pairs, n_games, rng).mean())
    logger.debug("memory-perfect agent n=%d over %d games: %.3f flips", n_pairs, n_games, mean)
    return mean


#---------------------Closed forms---------------------
def expected_random_flips(n_pairs: int) -> int:
    return (2 * n_pairs) ** 2


def asymptotic_optimal_flips(n_pairs: int) -> float:
    """Large-n expectation of the memory-perfect strategy."""
    return (6.0 - 4.0 * math.log(2.0)) * n_pairs + 7.0 / 8.0 - 2.0 * math.log(2.0)


@lru_cache(maxsize=None)
def _expected_remaining(unseen: int, singles: int) -> Fraction:
    """Expected flips left with `unseen` never-flipped cards, `singles` of them partners of known cards."""
    if unseen == 0:
        return Fraction(0)
    total = Fraction(0)
    # first flip lands on the partner of a known card: match it
    if singles:
        total += Fraction(singles, unseen) * (2 + _expected_remaining(unseen - 1, singles - 1))
    fresh = unseen - singles
    if fresh:
        rest = unseen - 1
        branch = Fraction(1, rest) * (2 + _expected_remaining(unseen - 2, singles))
        if singles:
            # second flip finds a known card's partner: clear that pair on the next turn
            branch += Fraction(singles, rest) * (4 + _expected_remaining(unseen - 2, singles))
        if rest - 1 - singles > 0:
            branch += Fraction(rest - 1 - singles, rest) * (2 + _expected_remaining(unseen - 2, singles + 2))
        total += Fraction(fresh, unseen) * branch
    return total


def exact_optimal_flips(n_pairs: int) -> Fraction:
    """Exact expected game length of the memory-perfect strategy."""
    if n_pairs < 1:
        raise ArgumentError(f"n_pairs must be at least 1, got {n_pairs}")
    return _expected_remaining(2 * n_pairs, 0)


def optimal_flip_bounds(n_pairs: int) -> tuple[int, int]:
    return 2 * n_pairs, 4 * n_pairs - 2
