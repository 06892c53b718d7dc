"""Target selection: optimistic UCB scoring and the epsilon traffic split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError

SIGMA_SOURCES = ("data", "model", "measurement")


@dataclass(frozen=True)
class StrategyConfig:
    epsilon: float = 0.1
    a: float = 0.5
    sigma_sources: tuple = ("data", "model")
    explore_impression_threshold: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "sigma_sources", tuple(self.sigma_sources))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.a < 0:
            raise ConfigError(f"UCB multiplier a must be >= 0, got {self.a}")
        unknown = set(self.sigma_sources) - set(SIGMA_SOURCES)
        if unknown:
            raise ConfigError(f"unknown sigma sources {sorted(unknown)}")
        if self.a > 0 and not self.sigma_sources:
            raise ConfigError("a > 0 needs at least one sigma source")


@dataclass(frozen=True)
class ArmScore:
    target_id: int
    mean: float
    std_combined: float
    ucb_score: float


def combined_sigma(rep, sources: Sequence[str]):
    """Quadrature sum of the selected standard deviations.

    ``rep`` is anything with ``data_std``/``model_std``/``measurement_std``
    attributes (a single report or a batch of arrays).
    """
    if not sources:
        raise ConfigError("combined_sigma needs at least one source")
    total = 0.0
    for s in sources:
        if s not in SIGMA_SOURCES:
            raise ConfigError(f"unknown sigma source {s!r}")
        total = total + np.square(getattr(rep, f"{s}_std"))
    return np.sqrt(total)


def score(target_id, rep, cfg: StrategyConfig) -> ArmScore:
    std = float(combined_sigma(rep, cfg.sigma_sources)) if cfg.sigma_sources else 0.0
    return ArmScore(target_id, float(rep.mean), std, float(rep.mean) + cfg.a * std)


def _argmax_smallest_id(ids: Sequence[int], values: Sequence[float]) -> int:
    best_id, best = None, -np.inf
    for tid, v in zip(ids, values):
        if v > best or (v == best and tid < best_id):
            best_id, best = tid, v
    return best_id


def select_ucb(candidates: Sequence[tuple], cfg: StrategyConfig, rng=None) -> int:
    """argmax of mean + a * sigma over (target_id, report) pairs; ties go to
    the smallest target id."""
    if not candidates:
        raise UsageError("select_ucb needs at least one candidate")
    scores = [score(tid, rep, cfg) for tid, rep in candidates]
    return _argmax_smallest_id([s.target_id for s in scores], [s.ucb_score for s in scores])


def select_greedy(candidates: Sequence[tuple]) -> int:
    if not candidates:
        raise UsageError("select_greedy needs at least one candidate")
    return _argmax_smallest_id([tid for tid, _ in candidates], [rep.mean for _, rep in candidates])


def select_epsilon_split(exploit_pool, explore_pool, cfg: StrategyConfig, rng: np.random.Generator):
    """Route to UCB over ``explore_pool`` with probability epsilon, else to
    greedy over ``exploit_pool``.  Returns (target_id, branch)."""
    if not exploit_pool and not explore_pool:
        raise UsageError("both candidate pools are empty")
    explore = bool(explore_pool) and (not exploit_pool or rng.random() < cfg.epsilon)
    if explore:
        return select_ucb(explore_pool, cfg), "explore"
    return select_greedy(exploit_pool), "exploit"


@dataclass
class SlateChoice:
    chosen: np.ndarray          # index into the candidate arrays, one per event
    explored: np.ndarray        # bool, one per event


def select_slates(
    slates: np.ndarray,
    ids: np.ndarray,
    mean: np.ndarray,
    ucb: np.ndarray,
    explorable: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> SlateChoice:
    """Vectorised epsilon split over many events.

    ``slates`` is (events, slate) of candidate indices; ``mean``, ``ucb`` and
    ``ids`` are (events, slate) gathered scores and target ids; ``explorable``
    marks slate members in the explore pool.  Each event explores with
    probability epsilon when its slate has an explorable member.  Matches
    ``select_epsilon_split`` applied event by event with the exploit pool
    being the whole slate.
    """
    n = slates.shape[0]
    coin = rng.random(n) < epsilon
    has_explore = explorable.any(axis=1)
    explored = coin & has_explore
    big = np.iinfo(np.int64).max

    def pick(vals, allowed):
        vals = np.where(allowed, vals, -np.inf)
        top = vals.max(axis=1, keepdims=True)
        tie_ids = np.where(allowed & (vals == top), ids, big)
        return np.argmin(tie_ids, axis=1)

    greedy = pick(mean, np.ones_like(explorable))
    optimistic = pick(ucb, explorable)
    col = np.where(explored, optimistic, greedy)
    return SlateChoice(slates[np.arange(n), col], explored)
