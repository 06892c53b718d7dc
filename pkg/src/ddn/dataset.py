"""Training samples, pool construction, target-level splits and persistence.

Dataset files are JSON Lines.  Line 1 is a header
``{"schema": "ddn-samples", "version": 1}``; every following line is one
sample with the keys

    target_id, context_id, day, r, clicks, y, calibration_baseline,
    clean_y (null when unknown), token_ids, categorical_ids, content_reals,
    context_ids, context_reals

A manifest ``<name>.manifest.json`` sits next to the file and records the
record count, vocabulary sizes, split seed, day range and schema version.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .network import ContextFeatures, TargetFeatures
from .noise import empirical_log_ctr

log = logging.getLogger(__name__)

SCHEMA = "ddn-samples"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Sample:
    target_id: int
    context_id: int
    target: TargetFeatures
    context: ContextFeatures
    r: int
    clicks: int
    y: float
    calibration_baseline: float
    day: int
    clean_y: float | None = None

    def __post_init__(self):
        if self.r < 1:
            raise DataError(f"sample for target {self.target_id}: r must be >= 1")
        if not 0 <= self.clicks <= self.r:
            raise DataError(f"sample for target {self.target_id}: clicks exceed impressions")

    @classmethod
    def from_counts(cls, target_id, context_id, target, context, r, clicks, baseline, day, clean_y=None):
        y = empirical_log_ctr(r=r, clicks=clicks, calibration_baseline=baseline)
        return cls(int(target_id), int(context_id), target, context, int(r), int(clicks), float(y),
                   float(baseline), int(day), None if clean_y is None else float(clean_y))


@dataclass
class DatasetManifest:
    record_count: int
    vocab_sizes: dict
    split_seed: int | None
    day_range: tuple
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "record_count": self.record_count,
            "vocab_sizes": self.vocab_sizes,
            "split_seed": self.split_seed,
            "day_range": list(self.day_range),
            "schema_version": self.schema_version,
        }


@dataclass
class Catalog:
    """Feature lookup for the ids that appear in day logs."""

    targets: Mapping[int, TargetFeatures]
    contexts: Mapping[int, ContextFeatures]
    baselines: Mapping[int, float]
    clean_labels: Mapping[tuple, float] | None = None


def build_pool(day_logs: Iterable, catalog: Catalog) -> list[Sample]:
    """One Sample per (target, context, day) record with r >= 1.

    Records with zero impressions are dropped and counted in the log.
    """
    pool, dropped = [], 0
    for dl in day_logs:
        for tid, cid, r, clicks in zip(dl.target_ids, dl.context_ids, dl.impressions, dl.clicks):
            if r < 1:
                dropped += 1
                continue
            tid, cid = int(tid), int(cid)
            if tid not in catalog.targets:
                raise DataError(f"day {dl.day}: unknown target id {tid}")
            if cid not in catalog.contexts:
                raise DataError(f"day {dl.day}: unknown context id {cid}")
            clean = None if catalog.clean_labels is None else catalog.clean_labels.get((tid, cid))
            pool.append(Sample.from_counts(tid, cid, catalog.targets[tid], catalog.contexts[cid],
                                           r, clicks, catalog.baselines[cid], dl.day, clean))
    if dropped:
        log.info("build_pool: dropped %d records with zero impressions", dropped)
    return pool


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def hash_uniform(seed: int, *keys) -> np.ndarray:
    """Deterministic uniforms in [0, 1) from integer keys (vectorised)."""
    with np.errstate(over="ignore"):
        h = _splitmix64(np.asarray(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        for k in keys:
            h = _splitmix64(h ^ np.asarray(k).astype(np.int64).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def split_targets(target_ids: Sequence[int], fraction: float, seed: int) -> np.ndarray:
    """Boolean mask: True where the target goes to validation."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    return hash_uniform(seed, np.asarray(target_ids, dtype=np.int64)) < fraction


def split(pool: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Split by target id hash so no target lands on both sides."""
    if not pool:
        raise ConfigError("cannot split an empty pool")
    to_val = split_targets([s.target_id for s in pool], fraction, seed)
    train = [s for s, v in zip(pool, to_val) if not v]
    val = [s for s, v in zip(pool, to_val) if v]
    if not train or not val:
        raise ConfigError(f"validation fraction {fraction} leaves one side of the split empty")
    return train, val


def _record(s: Sample) -> dict:
    return {
        "target_id": s.target_id,
        "context_id": s.context_id,
        "day": s.day,
        "r": s.r,
        "clicks": s.clicks,
        "y": s.y,
        "calibration_baseline": s.calibration_baseline,
        "clean_y": s.clean_y,
        "token_ids": list(s.target.token_ids),
        "categorical_ids": list(s.target.categorical_ids),
        "content_reals": list(s.target.content_reals),
        "context_ids": list(s.context.context_ids),
        "context_reals": list(s.context.context_reals),
    }


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_pool(pool: Sequence[Sample], path, vocab_sizes: dict | None = None, split_seed: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION}) + "\n")
        for s in pool:
            fh.write(json.dumps(_record(s)) + "\n")
    days = [s.day for s in pool]
    manifest = DatasetManifest(
        record_count=len(pool),
        vocab_sizes=vocab_sizes or {},
        split_seed=split_seed,
        day_range=(min(days), max(days)) if days else (),
    )
    manifest_path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_pool(path) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    pool = []
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline() or "{}")
        if header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported dataset header {header}")
        for lineno, line in enumerate(fh, start=2):
            try:
                d = json.loads(line)
                pool.append(Sample(
                    target_id=d["target_id"],
                    context_id=d["context_id"],
                    target=TargetFeatures(tuple(d["token_ids"]), tuple(d["categorical_ids"]),
                                          tuple(d["content_reals"])),
                    context=ContextFeatures(tuple(d["context_ids"]), tuple(d["context_reals"])),
                    r=d["r"],
                    clicks=d["clicks"],
                    y=d["y"],
                    calibration_baseline=d["calibration_baseline"],
                    day=d["day"],
                    clean_y=d.get("clean_y"),
                ))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("record_count") != len(pool):
            raise DataError(f"{path}: manifest says {manifest.get('record_count')} records, file has {len(pool)}")
    return pool


def recompute_labels(pool: Sequence[Sample]) -> np.ndarray:
    return empirical_log_ctr(
        r=[s.r for s in pool],
        clicks=[s.clicks for s in pool],
        calibration_baseline=[s.calibration_baseline for s in pool],
    )
