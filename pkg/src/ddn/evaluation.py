"""Offline analyses: uncertainty vs impressions, model uncertainty vs
feature-space density, uncertainty reduction after retraining, clean-label
MSE, and the closed-loop strategy sweep table.

CSV columns
-----------
fig3.csv    model_kind, seed, bucket, r_lo, r_hi, r_median, count, mean_data_std, std_error
fig5.csv    seed, bucket, pdf_lo, pdf_hi, log_pdf_median, count, mean_model_std, std_error
fig6.csv    seed, target_id, model_std_before, model_std_after
table2.csv  seed, pool, model_kind, mse   (one row per checkpoint and pool)
table2_paired.csv  seed, pool, mse_mdn, mse_ddn, ddn_gain
table4.csv  model_kind, a, seed, rpm, target_throughput, advertiser_throughput
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .density import mixture_mean, mixture_std
from .errors import ConfigError, UsageError
from .network import DDNModel, FeatureBatch, ModelConfig, TrainingSet


@dataclass
class EvalSet:
    """Encoded rows plus what the reports need besides features."""

    features: FeatureBatch
    r: np.ndarray
    baseline: np.ndarray
    target_ids: np.ndarray
    y: np.ndarray
    clean_y: np.ndarray | None = None

    def __len__(self):
        return len(self.r)

    def take(self, idx) -> "EvalSet":
        return EvalSet(self.features.take(idx), self.r[idx], self.baseline[idx], self.target_ids[idx],
                       self.y[idx], None if self.clean_y is None else self.clean_y[idx])

    def training_set(self) -> TrainingSet:
        return TrainingSet(self.features, self.y, self.r, self.baseline)

    @classmethod
    def from_samples(cls, samples, cfg: ModelConfig) -> "EvalSet":
        ts = TrainingSet.from_samples(samples, cfg)
        clean = [s.clean_y for s in samples]
        clean_y = None if any(c is None for c in clean) else np.asarray(clean, dtype=float)
        return cls(ts.features, ts.r, ts.baseline, np.array([s.target_id for s in samples], dtype=np.int64),
                   ts.y, clean_y)


# --------------------------------------------------------------------------
# Buckets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BucketReport:
    lo: float
    hi: float
    median_key: float
    count: int
    mean: float
    std_error: float


def bucketize(keys: np.ndarray, values: np.ndarray, edges: np.ndarray) -> list[BucketReport]:
    """Partition rows by ``edges`` on ``keys`` (first bucket closed on both
    ends, the rest half-open on the left); empty buckets are omitted."""
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    edges = np.asarray(edges, dtype=float)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("bucket edges must be strictly increasing with at least two entries")
    which = np.clip(np.searchsorted(edges, keys, side="left") - 1, 0, len(edges) - 2)
    out = []
    for b in range(len(edges) - 1):
        m = which == b
        n = int(m.sum())
        if not n:
            continue
        v = values[m]
        se = float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        out.append(BucketReport(float(edges[b]), float(edges[b + 1]), float(np.median(keys[m])), n,
                                float(v.mean()), se))
    return out


def _cover(keys, n_buckets, log_spaced):
    lo, hi = float(np.min(keys)), float(np.max(keys))
    if hi <= lo:
        hi = lo + 1.0
    if log_spaced:
        return np.geomspace(lo, hi, n_buckets + 1)
    return np.linspace(lo, hi, n_buckets + 1)


def merge_pairwise(buckets: Sequence[BucketReport]) -> list[BucketReport]:
    """Merge neighbouring buckets; means are count-weighted."""
    out = []
    for i in range(0, len(buckets), 2):
        grp = buckets[i : i + 2]
        n = sum(b.count for b in grp)
        mean = sum(b.count * b.mean for b in grp) / n
        out.append(BucketReport(grp[0].lo, grp[-1].hi, float("nan"), n, mean, float("nan")))
    return out


def bucket_spearman(buckets: Sequence[BucketReport]) -> tuple[float, float]:
    """Spearman rho (and p-value) between bucket median key and bucket mean."""
    if len(buckets) < 3:
        return float("nan"), float("nan")
    res = stats.spearmanr([b.median_key for b in buckets], [b.mean for b in buckets])
    return float(res.statistic), float(res.pvalue)


def kendall_tau(x, y) -> float:
    return float(stats.kendalltau(x, y).statistic)


# --------------------------------------------------------------------------
# Kernel density over descriptors
# --------------------------------------------------------------------------

@dataclass
class KdeModel:
    bandwidth: float
    reference: np.ndarray

    def __post_init__(self):
        self.reference = np.atleast_2d(np.asarray(self.reference, dtype=float))
        if self.bandwidth <= 0:
            raise ConfigError("KDE bandwidth must be positive")


def scott_bandwidth(points: np.ndarray) -> float:
    """Scott's factor n^(-1/(d+4)) times the mean per-dimension std."""
    points = np.atleast_2d(points)
    n, d = points.shape
    spread = float(np.mean(points.std(axis=0, ddof=1))) if n > 1 else 1.0
    return max(spread, 1e-12) * n ** (-1.0 / (d + 4))


def fit_kde(points: np.ndarray, bandwidth: float | None = None) -> KdeModel:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise UsageError("KDE needs at least one reference point")
    return KdeModel(scott_bandwidth(points) if bandwidth is None else bandwidth, points)


def kde_log_density(model: KdeModel, x: np.ndarray) -> np.ndarray:
    """log of the isotropic Gaussian-kernel average density at each row of x."""
    ref = model.reference
    if ref.shape[0] == 0:
        raise UsageError("KDE has an empty reference set")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = ref.shape
    chunk = max(1, 2_000_000 // n)
    h2 = model.bandwidth**2
    norm = -0.5 * d * np.log(2 * np.pi * h2) - np.log(n)
    rsq = np.sum(ref**2, axis=1)
    out = np.empty(len(x))
    for lo in range(0, len(x), chunk):
        xs = x[lo : lo + chunk]
        d2 = np.maximum(np.sum(xs**2, axis=1)[:, None] + rsq[None, :] - 2.0 * xs @ ref.T, 0.0)
        out[lo : lo + chunk] = logsumexp(-0.5 * d2 / h2, axis=1) + norm
    return out


def kde_density(model: KdeModel, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    dens = np.exp(kde_log_density(model, x.reshape(1, -1) if x.ndim == 1 else x))
    return float(dens[0]) if x.ndim == 1 else dens


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def uncertainty_vs_r_report(model: DDNModel, data: EvalSet, n_buckets: int = 10) -> list[BucketReport]:
    """Mean predicted data std per log-spaced impression-count bucket."""
    gmm = model.predict(data.features)
    r = data.r.astype(float)
    return bucketize(r, mixture_std(gmm), _cover(r, n_buckets, log_spaced=True))


def model_uncertainty_vs_pdf_report(model: DDNModel, kde: KdeModel, data: EvalSet, n_buckets: int = 10,
                                    passes: int | None = None, seed: int | None = None) -> list[BucketReport]:
    """Mean MC-dropout std per equal-count bucket of target log-density.

    Keys are log densities, so bucket order equals PDF order."""
    unc = model.predict_uncertainty(data.features, passes=passes, seed=seed)
    logpdf = kde_log_density(kde, model.descriptors(data.features.targets))
    edges = np.quantile(logpdf, np.linspace(0, 1, n_buckets + 1))
    edges = np.unique(edges)
    if len(edges) < 2:
        edges = np.array([edges[0], edges[0] + 1.0])
    return bucketize(logpdf, unc.model_std, edges)


def mse_eval(model: DDNModel, features: FeatureBatch, clean_y) -> float:
    """MSE of the predicted mixture mean against noise-free labels."""
    clean_y = np.asarray(clean_y, dtype=float)
    if len(clean_y) == 0:
        raise UsageError("mse_eval needs a non-empty set")
    pred = mixture_mean(model.predict(features))
    return float(np.mean((pred - clean_y) ** 2))


@dataclass
class RetrainDelta:
    before: np.ndarray
    after: np.ndarray

    @property
    def mean_shift(self) -> float:
        return float(self.after.mean() - self.before.mean())


def retrain_delta_report(train: Callable[[TrainingSet], DDNModel], base: TrainingSet,
                         injected: TrainingSet | None, cluster: FeatureBatch,
                         passes: int | None = None, seed: int = 0) -> RetrainDelta:
    """Model std over ``cluster`` for a model trained on ``base`` versus one
    trained (same seed) on ``base`` plus ``injected``."""
    before_model = train(base)
    before = before_model.predict_uncertainty(cluster, passes=passes, seed=seed).model_std
    if injected is None or len(injected) == 0:
        after_model = train(base)
    else:
        after_model = train(concat_sets(base, injected))
    after = after_model.predict_uncertainty(cluster, passes=passes, seed=seed).model_std
    return RetrainDelta(before, after)


def concat_sets(a: TrainingSet, b: TrainingSet) -> TrainingSet:
    import scipy.sparse as sp

    from .network import ContextBatch, TargetBatch

    ta, tb = a.features.targets, b.features.targets
    ca, cb = a.features.contexts, b.features.contexts
    feats = FeatureBatch(
        TargetBatch(sp.vstack([ta.pool, tb.pool]).tocsr(), np.concatenate([ta.cats, tb.cats]),
                    np.concatenate([ta.reals, tb.reals])),
        ContextBatch(np.concatenate([ca.cats, cb.cats]), np.concatenate([ca.reals, cb.reals])),
    )
    return TrainingSet(feats, np.concatenate([a.y, b.y]), np.concatenate([a.r, b.r]),
                       np.concatenate([a.baseline, b.baseline]))


# --------------------------------------------------------------------------
# CSV writers
# --------------------------------------------------------------------------

def _write(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_fig3(path, entries) -> Path:
    """entries: iterable of (model_kind, seed, buckets)."""
    rows = [(kind, seed, i, b.lo, b.hi, b.median_key, b.count, b.mean, b.std_error)
            for kind, seed, bks in entries for i, b in enumerate(bks)]
    return _write(path, ["model_kind", "seed", "bucket", "r_lo", "r_hi", "r_median", "count",
                         "mean_data_std", "std_error"], rows)


def write_fig5(path, entries) -> Path:
    """entries: iterable of (seed, buckets) with log-density keys."""
    rows = [(seed, i, float(np.exp(b.lo)), float(np.exp(b.hi)), b.median_key, b.count, b.mean, b.std_error)
            for seed, bks in entries for i, b in enumerate(bks)]
    return _write(path, ["seed", "bucket", "pdf_lo", "pdf_hi", "log_pdf_median", "count",
                         "mean_model_std", "std_error"], rows)


def write_fig6(path, entries) -> Path:
    """entries: iterable of (seed, target_ids, RetrainDelta)."""
    rows = [(seed, int(t), b, a) for seed, ids, d in entries for t, b, a in zip(ids, d.before, d.after)]
    return _write(path, ["seed", "target_id", "model_std_before", "model_std_after"], rows)


def write_table2(path, rows) -> Path:
    """rows: (seed, pool, mse_mdn, mse_ddn); gain is the relative MSE reduction."""
    out = [(s, pool, m, d, (m - d) / m if m else float("nan")) for s, pool, m, d in rows]
    return _write(path, ["seed", "pool", "mse_mdn", "mse_ddn", "ddn_gain"], out)


def write_table4(path, rows) -> Path:
    """rows: (model_kind, a, seed, rpm, target_throughput, advertiser_throughput)."""
    return _write(path, ["model_kind", "a", "seed", "rpm", "target_throughput", "advertiser_throughput"], rows)


def write_metrics(path, results) -> Path:
    """Daily metrics of closed-loop runs: day, model_kind, metric, value, seed."""
    rows = [row for res in results for row in res.rows()]
    return _write(path, ["day", "model_kind", "metric", "value", "seed"], rows)
