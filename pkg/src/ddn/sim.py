"""Closed-loop synthetic recommendation marketplace.

Each target (arm) has a latent calibrated log-CTR made of a group mean, the
effects of its title tokens, a content-feature effect and an idiosyncratic
residual.  Per-day CTR adds a temporal shock whose scale depends on the
group.  Impressions are allocated by a selection strategy over random
candidate slates; clicks are drawn once per (target, publisher, day) from a
binomial with the aggregated impression count.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from scipy.special import ndtri

from . import bandit
from .dataset import Catalog, hash_uniform, split_targets
from .errors import ConfigError, UsageError
from .network import (
    ContextBatch,
    ContextFeatures,
    DDNModel,
    FeatureBatch,
    ModelConfig,
    TargetBatch,
    TargetFeatures,
    TrainingSet,
)
from .noise import empirical_log_ctr, sigma_eps

log = logging.getLogger(__name__)

P_RANGE = (1e-5, 0.5)
STATES = ("fresh", "live", "retired")


@dataclass
class GroupConfig:
    name: str
    share: float = 1.0
    base_mean: float = 0.0
    token_effect_sd: float = 0.8
    residual_sd: float = 0.2
    temporal_sigma: float = 0.1
    cpc_mean: float = 0.5
    # median impressions per record under the legacy logging policy; 0 = never shown
    exposure: float = 500.0
    vocab_size: int = 30


@dataclass
class SimScenario:
    """Marketplace configuration; see ``scenario_schema`` in the README."""

    seed: int = 0
    groups: list = field(default_factory=list)
    publisher_baselines: tuple = (0.02, 0.03, 0.04, 0.05)
    publisher_traffic: tuple | None = None
    affinity_sd: float = 0.15
    shared_vocab: int = 40
    group_token_share: float = 0.7
    title_len: tuple = (4, 8)
    token_vocab: int = 1024
    n_content_reals: int = 2
    content_effect: float = 0.15
    advertisers_per_group: int = 20
    cpc_sd: float = 0.3
    initial_arms: int = 2000
    arrivals_per_day: int = 50
    retirement_age: int = 40
    impressions_per_day: int = 100_000
    slate_size: int = 50
    throughput_threshold: int = 500
    legacy_show_prob: float = 0.3
    legacy_r_sd: float = 0.8
    popularity_sd: float = 0.5

    def __post_init__(self):
        self.groups = [g if isinstance(g, GroupConfig) else GroupConfig(**g) for g in self.groups]
        self.publisher_baselines = tuple(float(b) for b in self.publisher_baselines)
        if self.publisher_traffic is not None:
            self.publisher_traffic = tuple(float(t) for t in self.publisher_traffic)
        self.title_len = tuple(int(x) for x in self.title_len)

    def validate(self) -> "SimScenario":
        if not self.groups:
            raise ConfigError("scenario needs at least one group")
        if len(self.groups) < 2 or len({g.temporal_sigma for g in self.groups}) < 2:
            raise ConfigError("scenario needs at least two groups with distinct temporal_sigma")
        if len({g.name for g in self.groups}) != len(self.groups):
            raise ConfigError("group names must be unique")
        if any(g.share < 0 for g in self.groups) or sum(g.share for g in self.groups) <= 0:
            raise ConfigError("group shares must be non-negative with a positive total")
        if any(g.temporal_sigma < 0 or g.residual_sd < 0 or g.exposure < 0 for g in self.groups):
            raise ConfigError("group spreads and exposures must be non-negative")
        if any(g.cpc_mean <= 0 or g.vocab_size < 1 for g in self.groups):
            raise ConfigError("cpc_mean and vocab_size must be positive")
        if not self.publisher_baselines or any(not 0 < b < 1 for b in self.publisher_baselines):
            raise ConfigError("publisher baselines must be probabilities in (0, 1)")
        if self.publisher_traffic is not None and len(self.publisher_traffic) != len(self.publisher_baselines):
            raise ConfigError("publisher_traffic must match publisher_baselines in length")
        lo, hi = self.title_len
        if lo < 1 or hi < lo:
            raise ConfigError("title_len must be (min, max) with 1 <= min <= max")
        if self.slate_size < 1 or self.impressions_per_day < 0 or self.retirement_age < 1:
            raise ConfigError("slate_size and retirement_age must be positive")
        if self.initial_arms < 1 or self.arrivals_per_day < 0:
            raise ConfigError("need a positive initial population")
        return self

    @property
    def n_publishers(self) -> int:
        return len(self.publisher_baselines)

    @property
    def n_advertisers(self) -> int:
        return self.advertisers_per_group * len(self.groups)

    def model_config(self, **overrides) -> ModelConfig:
        cfg = ModelConfig(
            token_vocab=self.token_vocab,
            target_cat_sizes=(len(self.groups), self.n_advertisers),
            n_target_reals=self.n_content_reals,
            context_cat_sizes=(self.n_publishers,),
        )
        return replace(cfg, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scenario: {exc}") from exc


def load_scenario(path) -> SimScenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file {path} does not exist")
    try:
        d = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: scenario must be a mapping")
    return SimScenario.from_dict(d).validate()


def save_scenario(scenario: SimScenario, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(scenario.to_dict(), sort_keys=True))
    return path


def standard_groups() -> list[GroupConfig]:
    """Eight content groups.

    Legacy exposure spans two orders of magnitude and is unrelated to the
    temporal variability; one high-CTR group ("cars") was never shown by the
    legacy policy and is the unexplored region of feature space.
    """
    return [
        GroupConfig("shopping", 1.0, 0.0, 0.8, 0.30, 0.45, 0.6, 3000.0),
        GroupConfig("sports", 1.0, 0.1, 0.8, 0.10, 0.05, 0.4, 1200.0),
        GroupConfig("news", 1.0, -0.2, 0.8, 0.15, 0.30, 0.3, 150.0),
        GroupConfig("finance", 1.0, -0.1, 0.8, 0.15, 0.10, 0.8, 6000.0),
        GroupConfig("travel", 1.0, 0.0, 0.8, 0.20, 0.35, 0.5, 400.0),
        GroupConfig("health", 1.0, -0.1, 0.8, 0.15, 0.15, 0.5, 60.0),
        GroupConfig("games", 1.0, 0.1, 0.8, 0.20, 0.25, 0.4, 2000.0),
        GroupConfig("cars", 1.0, 0.6, 0.8, 0.20, 0.20, 0.7, 0.0),
    ]


def standard_scenario(seed: int = 0, **overrides) -> SimScenario:
    return replace(SimScenario(seed=seed, groups=standard_groups()), **overrides).validate()


# --------------------------------------------------------------------------
# Population
# --------------------------------------------------------------------------

def _normal_from_hash(seed: int, *keys) -> np.ndarray:
    u = hash_uniform(seed, *keys)
    return ndtri(np.clip(u, 1e-12, 1 - 1e-12))


def hash_token(word: str, vocab: int) -> int:
    return zlib.crc32(word.encode("utf-8")) % vocab


@dataclass
class TargetArm:
    target_id: int
    features: TargetFeatures
    group: str
    cpc: float
    base_log_ctr: float
    temporal_sigma: float
    birth_day: int
    state: str
    title: str = ""


@dataclass
class DayLog:
    day: int
    target_ids: np.ndarray
    context_ids: np.ndarray
    impressions: np.ndarray
    clicks: np.ndarray
    revenue: np.ndarray
    new_targets: list = field(default_factory=list)
    retired: list = field(default_factory=list)
    explore_impressions: int = 0
    target_throughput: int = 0
    advertiser_throughput: int = 0

    @property
    def total_impressions(self) -> int:
        return int(self.impressions.sum())

    @property
    def total_revenue(self) -> float:
        return float(self.revenue.sum())

    @property
    def rpm(self) -> float:
        n = self.total_impressions
        return 1000.0 * self.total_revenue / n if n else 0.0


class Marketplace:
    """All arms ever created, stored column-wise; ``target_id`` is the row."""

    def __init__(self, scenario: SimScenario):
        self.scenario = sc = scenario.validate()
        self.rng = np.random.default_rng([sc.seed, 1])
        g_rng = np.random.default_rng([sc.seed, 2])
        n_groups = len(sc.groups)
        self.group_words = []
        self.group_effects = []
        for g in sc.groups:
            eff = g_rng.normal(0.0, g.token_effect_sd, size=g.vocab_size)
            self.group_effects.append(eff - eff.mean())
            self.group_words.append([f"{g.name}{j}" for j in range(g.vocab_size)])
        shared = g_rng.normal(0.0, 0.3, size=sc.shared_vocab)
        self.shared_effects = shared - shared.mean() if sc.shared_vocab else shared
        self.shared_words = [f"w{j}" for j in range(sc.shared_vocab)]
        self.affinity = g_rng.normal(0.0, sc.affinity_sd, size=(sc.n_publishers, n_groups))
        self.advertiser_cpc = np.concatenate([
            g.cpc_mean * np.exp(g_rng.normal(0.0, sc.cpc_sd, size=sc.advertisers_per_group)) for g in sc.groups
        ])
        self.baselines = np.asarray(sc.publisher_baselines)
        traffic = np.ones(sc.n_publishers) if sc.publisher_traffic is None else np.asarray(sc.publisher_traffic)
        self.traffic = traffic / traffic.sum()
        self.group_share = np.array([g.share for g in sc.groups], dtype=float)
        self.group_share /= self.group_share.sum()
        self.group_temporal = np.array([g.temporal_sigma for g in sc.groups])
        self.group_exposure = np.array([g.exposure for g in sc.groups])

        self.group = np.zeros(0, dtype=np.int64)
        self.advertiser = np.zeros(0, dtype=np.int64)
        self.base_log_ctr = np.zeros(0)
        self.birth_day = np.zeros(0, dtype=np.int64)
        self.retired_day = np.zeros(0, dtype=np.int64)
        self.popularity = np.zeros(0)
        self.reals = np.zeros((0, sc.n_content_reals))
        self.lifetime = np.zeros(0, dtype=np.int64)
        self.tokens: list[tuple] = []
        self.titles: list[str] = []

    # -- arm creation ------------------------------------------------------

    def draw_arms(self, n: int, rng: np.random.Generator, group: int | None = None) -> dict:
        """Sample ``n`` new arm descriptions (not yet added to the market)."""
        sc = self.scenario
        groups = (np.full(n, group) if group is not None
                  else rng.choice(len(sc.groups), size=n, p=self.group_share))
        lo, hi = sc.title_len
        out = {"group": groups, "tokens": [], "titles": [], "base": np.empty(n)}
        out["reals"] = rng.normal(size=(n, sc.n_content_reals))
        out["advertiser"] = groups * sc.advertisers_per_group + rng.integers(0, sc.advertisers_per_group, size=n)
        out["popularity"] = rng.normal(0.0, sc.popularity_sd, size=n)
        for i, g in enumerate(groups):
            gcfg = sc.groups[g]
            length = int(rng.integers(lo, hi + 1))
            own = rng.random(length) < sc.group_token_share if sc.shared_vocab else np.ones(length, bool)
            words, effects = [], []
            for is_own in own:
                if is_own:
                    j = int(rng.integers(gcfg.vocab_size))
                    words.append(self.group_words[g][j])
                    effects.append(self.group_effects[g][j])
                else:
                    j = int(rng.integers(sc.shared_vocab))
                    words.append(self.shared_words[j])
                    effects.append(self.shared_effects[j])
            content = sc.content_effect * out["reals"][i, 0] if sc.n_content_reals else 0.0
            out["base"][i] = (gcfg.base_mean + float(np.mean(effects)) + content
                              + rng.normal(0.0, gcfg.residual_sd))
            out["tokens"].append(tuple(hash_token(w, sc.token_vocab) for w in words))
            out["titles"].append(" ".join(words))
        return out

    def add_arms(self, n: int, birth_days, rng: np.random.Generator, group: int | None = None) -> np.ndarray:
        d = self.draw_arms(n, rng, group)
        start = len(self.group)
        self.group = np.concatenate([self.group, d["group"].astype(np.int64)])
        self.advertiser = np.concatenate([self.advertiser, d["advertiser"].astype(np.int64)])
        self.base_log_ctr = np.concatenate([self.base_log_ctr, d["base"]])
        self.birth_day = np.concatenate([self.birth_day, np.broadcast_to(np.asarray(birth_days, dtype=np.int64), (n,))])
        self.retired_day = np.concatenate([self.retired_day, np.full(n, -1, dtype=np.int64)])
        self.popularity = np.concatenate([self.popularity, d["popularity"]])
        self.reals = np.concatenate([self.reals, d["reals"]])
        self.lifetime = np.concatenate([self.lifetime, np.zeros(n, dtype=np.int64)])
        self.tokens.extend(d["tokens"])
        self.titles.extend(d["titles"])
        return np.arange(start, start + n)

    # -- views ---------------------------------------------------------------

    def __len__(self):
        return len(self.group)

    @property
    def cpc(self) -> np.ndarray:
        return self.advertiser_cpc[self.advertiser]

    def live(self) -> np.ndarray:
        return np.flatnonzero(self.retired_day < 0)

    def target_features(self, i: int) -> TargetFeatures:
        return TargetFeatures(self.tokens[i], (int(self.group[i]), int(self.advertiser[i])),
                              tuple(float(x) for x in self.reals[i]))

    def context_features(self, pub: int) -> ContextFeatures:
        return ContextFeatures((int(pub),), ())

    def arm(self, i: int) -> TargetArm:
        if self.retired_day[i] >= 0:
            state = "retired"
        elif self.lifetime[i] == 0:
            state = "fresh"
        else:
            state = "live"
        g = int(self.group[i])
        return TargetArm(int(i), self.target_features(i), self.scenario.groups[g].name, float(self.cpc[i]),
                         float(self.base_log_ctr[i]), float(self.group_temporal[g]), int(self.birth_day[i]),
                         state, self.titles[i])

    def target_batch(self, idx, cfg: ModelConfig) -> TargetBatch:
        return TargetBatch.encode([self.target_features(int(i)) for i in idx], cfg)

    def context_batch(self, cfg: ModelConfig) -> ContextBatch:
        return ContextBatch.encode([self.context_features(p) for p in range(self.scenario.n_publishers)], cfg)

    def catalog(self) -> Catalog:
        n_pub = self.scenario.n_publishers
        clean = self.clean_label(np.arange(len(self)))
        return Catalog(
            targets={i: self.target_features(i) for i in range(len(self))},
            contexts={p: self.context_features(p) for p in range(n_pub)},
            baselines={p: float(self.baselines[p]) for p in range(n_pub)},
            clean_labels={(i, p): float(clean[i, p]) for i in range(len(self)) for p in range(n_pub)},
        )

    # -- latent CTR ----------------------------------------------------------

    def temporal_shock(self, idx, day: int) -> np.ndarray:
        idx = np.asarray(idx)
        z = _normal_from_hash(self.scenario.seed, np.full(idx.shape, day), idx)
        return self.group_temporal[self.group[idx]] * z

    def clean_label(self, idx) -> np.ndarray:
        """Expected calibrated log-CTR per (target, publisher), no temporal shock."""
        idx = np.asarray(idx)
        return self.base_log_ctr[idx][:, None] + self.affinity[:, self.group[idx]].T

    def true_p(self, idx, day: int) -> np.ndarray:
        """Daily click probability, shape (len(idx), n_publishers)."""
        idx = np.asarray(idx)
        logit = self.clean_label(idx) + self.temporal_shock(idx, day)[:, None]
        with np.errstate(over="ignore"):
            return np.clip(self.baselines[None, :] * np.exp(logit), *P_RANGE)

    # -- lifecycle -----------------------------------------------------------

    def turnover(self, day: int) -> tuple[list, list]:
        """Retire arms reaching retirement age; add the day's arrivals."""
        sc = self.scenario
        live = self.live()
        old = live[day + 1 - self.birth_day[live] >= sc.retirement_age]
        self.retired_day[old] = day
        new = self.add_arms(sc.arrivals_per_day, day + 1, self.rng) if sc.arrivals_per_day else np.zeros(0, int)
        return old.tolist(), new.tolist()


def generate_scenario(scenario: SimScenario) -> Marketplace:
    """Initial population with ages spread over the retirement window."""
    market = Marketplace(scenario)
    sc = market.scenario
    births = -market.rng.integers(0, sc.retirement_age, size=sc.initial_arms)
    market.add_arms(sc.initial_arms, births, market.rng)
    return market


# --------------------------------------------------------------------------
# Traffic allocation
# --------------------------------------------------------------------------

@dataclass
class DayContext:
    market: Marketplace
    day: int
    live: np.ndarray          # global arm indices
    slates: np.ndarray        # (events, slate) positions into ``live``
    pubs: np.ndarray          # publisher per event
    rng: np.random.Generator


class Strategy:
    name = "strategy"

    def choose(self, ctx: DayContext) -> bandit.SlateChoice:
        raise NotImplementedError


class RandomStrategy(Strategy):
    name = "random"

    def choose(self, ctx):
        n, s = ctx.slates.shape
        col = ctx.rng.integers(0, s, size=n)
        return bandit.SlateChoice(ctx.slates[np.arange(n), col], np.zeros(n, bool))


class FixedArmStrategy(Strategy):
    """Always shows one arm (test stub)."""

    name = "fixed"

    def __init__(self, target_id: int):
        self.target_id = target_id

    def choose(self, ctx):
        pos = np.flatnonzero(ctx.live == self.target_id)
        if not pos.size:
            raise UsageError(f"target {self.target_id} is not live")
        n = len(ctx.pubs)
        return bandit.SlateChoice(np.full(n, pos[0]), np.zeros(n, bool))


class OracleStrategy(Strategy):
    """Greedy on the true daily click probability."""

    name = "oracle"

    def choose(self, ctx):
        p = ctx.market.true_p(ctx.live, ctx.day)
        vals = p[ctx.slates, ctx.pubs[:, None]]
        ids = ctx.live[ctx.slates]
        return bandit.select_slates(ctx.slates, ids, vals, vals, np.zeros_like(vals, bool), 0.0, ctx.rng)


class ModelStrategy(Strategy):
    """Epsilon split between greedy exploitation and UCB exploration, scored
    from cached per-(target, publisher) model predictions."""

    name = "model"

    def __init__(self, cfg: bandit.StrategyConfig):
        self.cfg = cfg
        self.cache: dict[str, np.ndarray] | None = None

    def choose(self, ctx):
        if self.cache is None:
            raise UsageError("ModelStrategy has no predictions; call refresh first")
        rows = ctx.live
        pubs = ctx.pubs[:, None]
        mean = self.cache["mean"][rows][ctx.slates, pubs]
        if self.cfg.a > 0:
            std = self.cache["sigma"][rows][ctx.slates, pubs]
            ucb = mean + self.cfg.a * std
        else:
            ucb = mean
        explorable = (ctx.market.lifetime[rows] < self.cfg.explore_impression_threshold)[ctx.slates]
        ids = rows[ctx.slates]
        return bandit.select_slates(ctx.slates, ids, mean, ucb, explorable, self.cfg.epsilon, ctx.rng)


def run_day(market: Marketplace, strategy: Strategy, day: int, rng: np.random.Generator,
            apply_turnover: bool = True) -> DayLog:
    """Allocate one day of traffic, draw clicks, update lifetimes, turn over."""
    sc = market.scenario
    live = market.live()
    n_pub = sc.n_publishers
    n = sc.impressions_per_day
    pubs = rng.choice(n_pub, size=n, p=market.traffic)
    slates = rng.integers(0, len(live), size=(n, sc.slate_size))
    choice = strategy.choose(DayContext(market, day, live, slates, pubs, rng))
    counts = np.bincount(choice.chosen * n_pub + pubs, minlength=len(live) * n_pub).reshape(len(live), n_pub)
    shown_arm, shown_pub = np.nonzero(counts)
    r = counts[shown_arm, shown_pub]
    p = market.true_p(live[shown_arm], day)[np.arange(len(shown_arm)), shown_pub]
    clicks = rng.binomial(r, p)
    tids = live[shown_arm]
    revenue = clicks * market.cpc[tids]

    before = market.lifetime[live].copy()
    market.lifetime[live] += counts.sum(axis=1)
    crossed = live[(before < sc.throughput_threshold) & (market.lifetime[live] >= sc.throughput_threshold)]
    log_ = DayLog(day, tids, shown_pub, r, clicks, revenue,
                  explore_impressions=int(choice.explored.sum()),
                  target_throughput=len(crossed),
                  advertiser_throughput=len(np.unique(market.advertiser[crossed])))
    if apply_turnover:
        log_.retired, log_.new_targets = market.turnover(day)
    return log_


def legacy_day(market: Marketplace, day: int, rng: np.random.Generator, apply_turnover: bool = True) -> DayLog:
    """Historical logging policy: exposure set by group and arm popularity,
    independent of any model.  Groups with zero exposure are never shown."""
    sc = market.scenario
    live = market.live()
    exposure = market.group_exposure[market.group[live]]
    shown = (rng.random((len(live), sc.n_publishers)) < sc.legacy_show_prob) & (exposure[:, None] > 0)
    arm, pub = np.nonzero(shown)
    med = exposure[arm] * np.exp(market.popularity[live[arm]] + rng.normal(0.0, sc.legacy_r_sd, size=len(arm)))
    r = np.maximum(1, np.rint(med)).astype(np.int64)
    p = market.true_p(live[arm], day)[np.arange(len(arm)), pub]
    clicks = rng.binomial(r, p)
    tids = live[arm]
    before = market.lifetime.copy()
    np.add.at(market.lifetime, tids, r)
    crossed = np.flatnonzero((before < sc.throughput_threshold) & (market.lifetime >= sc.throughput_threshold))
    log_ = DayLog(day, tids, pub, r, clicks, clicks * market.cpc[tids],
                  target_throughput=len(crossed),
                  advertiser_throughput=len(np.unique(market.advertiser[crossed])))
    if apply_turnover:
        log_.retired, log_.new_targets = market.turnover(day)
    return log_


def legacy_history(market: Marketplace, days: int, start_day: int = 0, seed: int | None = None) -> list[DayLog]:
    rng = np.random.default_rng([market.scenario.seed if seed is None else seed, 3])
    return [legacy_day(market, start_day + d, rng) for d in range(days)]


# --------------------------------------------------------------------------
# Record store used for (re)training inside the loop
# --------------------------------------------------------------------------

class RecordStore:
    """Aggregated (target, publisher, day, r, clicks) rows from day logs."""

    def __init__(self):
        self._parts: list[tuple] = []

    def add(self, dl: DayLog):
        keep = dl.impressions >= 1
        self._parts.append((dl.target_ids[keep], dl.context_ids[keep], np.full(keep.sum(), dl.day),
                            dl.impressions[keep], dl.clicks[keep]))

    def arrays(self, since_day: int | None = None):
        if not self._parts:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z, z, z
        cols = [np.concatenate(c) for c in zip(*self._parts)]
        if since_day is not None:
            m = cols[2] >= since_day
            cols = [c[m] for c in cols]
        return tuple(cols)

    def __len__(self):
        return int(sum(len(p[0]) for p in self._parts))


def training_set(market: Marketplace, cfg: ModelConfig, tids, pubs, r, clicks) -> TrainingSet:
    uniq, inv = np.unique(tids, return_inverse=True)
    tb = market.target_batch(uniq, cfg).take(inv)
    cb = market.context_batch(cfg).take(pubs)
    base = market.baselines[pubs]
    y = empirical_log_ctr(r=r, clicks=clicks, calibration_baseline=base)
    return TrainingSet(FeatureBatch(tb, cb), np.atleast_1d(y), np.asarray(r), base)


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    days: int = 90
    retrain_every: int = 3
    window_days: int = 30
    warmup_days: int = 14
    initial_epochs: int = 8
    retrain_steps: int = 300
    val_fraction: float = 0.1
    model_seed: int = 0
    sim_seed: int = 0
    mc_passes: int | None = None

    def validate(self):
        if self.days < 0 or self.retrain_every < 1 or self.window_days < 1 or self.warmup_days < 0:
            raise ConfigError("invalid experiment schedule")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        return self


@dataclass
class ExperimentResult:
    model_kind: str
    label: str
    seed: int
    series: dict          # metric name -> list of per-day values
    days: list

    def metric(self, name: str) -> np.ndarray:
        return np.asarray(self.series[name], dtype=float)

    def rows(self):
        for i, day in enumerate(self.days):
            for name in sorted(self.series):
                yield day, self.label, name, self.series[name][i], self.seed


def refresh_predictions(model: DDNModel, market: Marketplace, strategy: ModelStrategy,
                        idx: np.ndarray, passes: int | None = None):
    """(Re)compute cached scores for the arms in ``idx``."""
    cfg = model.config
    n_pub = market.scenario.n_publishers
    if strategy.cache is None or len(strategy.cache["mean"]) < len(market):
        grow = len(market) if strategy.cache is None else len(market) - len(strategy.cache["mean"])
        new = {k: np.zeros((grow, n_pub)) for k in ("mean", "sigma")}
        strategy.cache = new if strategy.cache is None else {
            k: np.concatenate([strategy.cache[k], new[k]]) for k in new
        }
    if not len(idx):
        return
    if strategy.cfg.a > 0 and "model" in strategy.cfg.sigma_sources:
        pred = model.predict_grid(market.target_batch(idx, cfg), market.context_batch(cfg), passes)
    else:
        pred = model.predict_grid(market.target_batch(idx, cfg), market.context_batch(cfg), 1)
    strategy.cache["mean"][idx] = pred["mean"]
    sig2 = np.zeros_like(pred["mean"])
    for src in strategy.cfg.sigma_sources:
        if src == "data":
            sig2 += pred["data_std"] ** 2
        elif src == "model":
            sig2 += pred["model_std"] ** 2
        else:
            r_hint = np.maximum(1, market.lifetime[idx] // n_pub)[:, None]
            sig2 += sigma_eps(pred["mean"], r_hint, market.baselines[None, :]) ** 2
    strategy.cache["sigma"][idx] = np.sqrt(sig2)


def strategy_for(model_kind: str, cfg: bandit.StrategyConfig) -> bandit.StrategyConfig:
    """REG has no uncertainty head: it explores greedily (a = 0)."""
    if model_kind == "REG":
        return replace(cfg, a=0.0)
    return cfg


def run_experiment(scenario: SimScenario, model_kind: str, strategy: bandit.StrategyConfig | Strategy,
                   exp: ExperimentConfig, model_config: ModelConfig | None = None,
                   label: str | None = None) -> ExperimentResult:
    """Alternate simulated days and periodic retraining; return daily metrics.

    Metrics: rpm (1000 * revenue / impressions), target_throughput,
    advertiser_throughput, val_mse (clean labels, held-out targets),
    explore_share and never_shown (fraction of live arms with no impressions).
    """
    exp.validate()
    if model_kind not in ("REG", "MDN", "DDN"):
        raise ConfigError(f"unknown model kind {model_kind!r}")
    scenario = replace(scenario, seed=exp.sim_seed)
    market = generate_scenario(scenario)
    if model_config is None:
        model_config = scenario.model_config(k=1 if model_kind == "REG" else 3)
    mcfg = replace(model_config, seed=exp.model_seed)
    passes = exp.mc_passes or mcfg.mc_passes
    label = label or model_kind
    series = {k: [] for k in ("rpm", "target_throughput", "advertiser_throughput", "val_mse",
                              "explore_share", "never_shown")}
    if exp.days == 0:
        return ExperimentResult(model_kind, label, exp.sim_seed, series, [])

    store = RecordStore()
    for dl in legacy_history(market, exp.warmup_days, start_day=-exp.warmup_days):
        store.add(dl)

    if isinstance(strategy, Strategy):
        policy = strategy
    else:
        policy = ModelStrategy(strategy_for(model_kind, strategy))
    model = DDNModel(mcfg) if isinstance(policy, ModelStrategy) else None
    day_rng = np.random.default_rng([exp.sim_seed, 4])

    def fit(first: bool, day: int):
        tids, pubs, dd, r, clicks = store.arrays(since_day=day - exp.window_days)
        keep = ~split_targets(tids, exp.val_fraction, exp.sim_seed)
        if not keep.any():
            return
        data = training_set(market, mcfg, tids[keep], pubs[keep], r[keep], clicks[keep])
        if first:
            model.fit(data, model_kind, epochs=exp.initial_epochs)
        else:
            model.fit(data, model_kind, epochs=10**6, max_steps=exp.retrain_steps)

    def val_mse() -> float:
        live = market.live()
        held = live[split_targets(live, exp.val_fraction, exp.sim_seed)]
        if not len(held):
            return float("nan")
        pred = model.predict_grid(market.target_batch(held, mcfg), market.context_batch(mcfg), 1)["mean"]
        return float(np.mean((pred - market.clean_label(held)) ** 2))

    current_mse = float("nan")
    if model is not None:
        fit(True, 0)
        refresh_predictions(model, market, policy, market.live(), passes)
        current_mse = val_mse()

    for day in range(exp.days):
        if model is not None and day > 0 and day % exp.retrain_every == 0:
            fit(False, day)
            refresh_predictions(model, market, policy, market.live(), passes)
            current_mse = val_mse()
        live_before = market.live()
        never = float(np.mean(market.lifetime[live_before] == 0))
        dl = run_day(market, policy, day, day_rng)
        store.add(dl)
        if model is not None and dl.new_targets:
            refresh_predictions(model, market, policy, np.asarray(dl.new_targets), passes)
        series["rpm"].append(dl.rpm)
        series["target_throughput"].append(dl.target_throughput)
        series["advertiser_throughput"].append(dl.advertiser_throughput)
        series["val_mse"].append(current_mse)
        series["explore_share"].append(dl.explore_impressions / max(1, dl.total_impressions))
        series["never_shown"].append(never)
        log.debug("%s seed=%d day=%d rpm=%.3f thr=%d", label, exp.sim_seed, day, dl.rpm, dl.target_throughput)
    return ExperimentResult(model_kind, label, exp.sim_seed, series, list(range(exp.days)))


def offline_pool(scenario: SimScenario, days: int = 30, cfg: ModelConfig | None = None):
    """Legacy-policy history as an encoded evaluation set with clean labels.

    Returns (market, EvalSet, days_per_row)."""
    from .evaluation import EvalSet

    market = generate_scenario(scenario)
    store = RecordStore()
    for dl in legacy_history(market, days, start_day=-days):
        store.add(dl)
    tids, pubs, dd, r, clicks = store.arrays()
    cfg = cfg or scenario.model_config()
    ts = training_set(market, cfg, tids, pubs, r, clicks)
    clean = market.clean_label(tids)[np.arange(len(tids)), pubs]
    return market, EvalSet(ts.features, ts.r, ts.baseline, tids, ts.y, clean), dd


def grid_eval_set(market: Marketplace, idx, cfg: ModelConfig, r_hint: int = 1):
    """Every (target, publisher) pair for targets ``idx``, clean labels attached."""
    from .evaluation import EvalSet

    idx = np.asarray(idx, dtype=np.int64)
    n_pub = market.scenario.n_publishers
    tids = np.repeat(idx, n_pub)
    pubs = np.tile(np.arange(n_pub), len(idx))
    uniq, inv = np.unique(tids, return_inverse=True)
    feats = FeatureBatch(market.target_batch(uniq, cfg).take(inv), market.context_batch(cfg).take(pubs))
    clean = market.clean_label(idx).reshape(-1)
    r = np.full(len(tids), r_hint, dtype=np.int64)
    base = market.baselines[pubs]
    return EvalSet(feats, r, base, tids, clean.copy(), clean)


def injected_records(market: Marketplace, target_id: int, cfg: ModelConfig, days: int = 10,
                     r_per_day: int = 2000, seed: int = 0) -> TrainingSet:
    """Simulated logs for one target shown ``r_per_day`` times on every
    publisher for ``days`` days (as if an explorer had picked it)."""
    rng = np.random.default_rng([seed, target_id, 5])
    n_pub = market.scenario.n_publishers
    tids = np.full(days * n_pub, target_id)
    pubs = np.tile(np.arange(n_pub), days)
    p = np.concatenate([market.true_p([target_id], -days + d)[0] for d in range(days)])
    r = np.full(len(tids), r_per_day, dtype=np.int64)
    clicks = rng.binomial(r, p)
    return training_set(market, cfg, tids, pubs, r, clicks)


def unexplored_targets(market: Marketplace) -> np.ndarray:
    """Live targets of groups the legacy policy never shows, in id order."""
    live = market.live()
    return live[market.group_exposure[market.group[live]] == 0]
