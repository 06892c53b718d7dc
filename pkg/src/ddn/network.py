"""Hybrid target/context network with a Gaussian-mixture head.

Target subnet: mean-pooled title-token embeddings, categorical embeddings
and real-valued content features, followed by two dense+ReLU layers.
Context subnet: same shape over context categoricals/reals.  The two
descriptors are fused as ``t ++ c ++ t*c`` and passed through one dense+ReLU
layer into the mixture head.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import density, nn
from .density import GmmParams
from .errors import ConfigError, DataError, NumericalError, UsageError
from .noise import sigma_eps as noise_sigma_eps

log = logging.getLogger(__name__)

LOSS_KINDS = ("REG", "MDN", "DDN")
CHECKPOINT_MAGIC = b"DDNCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TargetFeatures:
    token_ids: tuple
    categorical_ids: tuple = ()
    content_reals: tuple = ()


@dataclass(frozen=True)
class ContextFeatures:
    context_ids: tuple = ()
    context_reals: tuple = ()


@dataclass
class ModelConfig:
    token_vocab: int = 1024
    target_cat_sizes: tuple = (16,)
    n_target_reals: int = 0
    context_cat_sizes: tuple = (8,)
    n_context_reals: int = 0
    token_dim: int = 16
    cat_dim: int = 8
    target_hidden: tuple = (64, 32)
    context_hidden: tuple = (64, 32)
    fusion_hidden: int = 32
    k: int = 3
    dropout: float = 0.25
    mc_passes: int = 30
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    # where the DDN noise level takes its mean: current model output or the row label
    noise_mu_source: str = "model"

    def __post_init__(self):
        self.target_cat_sizes = tuple(int(s) for s in self.target_cat_sizes)
        self.context_cat_sizes = tuple(int(s) for s in self.context_cat_sizes)
        self.target_hidden = tuple(int(s) for s in self.target_hidden)
        self.context_hidden = tuple(int(s) for s in self.context_hidden)

    def validate(self) -> "ModelConfig":
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not self.target_hidden or not self.context_hidden:
            raise ConfigError("each subnet needs at least one hidden layer")
        if self.target_hidden[-1] != self.context_hidden[-1]:
            raise ConfigError(
                "target and context descriptors must have the same dimension, got "
                f"{self.target_hidden[-1]} and {self.context_hidden[-1]}"
            )
        if min(self.target_hidden + self.context_hidden + (self.fusion_hidden,)) < 1:
            raise ConfigError("layer sizes must be positive")
        if self.token_vocab < 1 or any(s < 1 for s in self.target_cat_sizes + self.context_cat_sizes):
            raise ConfigError("vocabulary sizes must be positive")
        if self.mc_passes < 1:
            raise ConfigError("mc_passes must be >= 1")
        if self.noise_mu_source not in ("model", "empirical"):
            raise ConfigError("noise_mu_source must be 'model' or 'empirical'")
        if self.batch_size < 1 or self.lr < 0:
            raise ConfigError("batch_size must be positive and lr non-negative")
        return self

    @property
    def descriptor_dim(self) -> int:
        return self.target_hidden[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# Batched feature encoding
# --------------------------------------------------------------------------

def _int_matrix(rows, width, name):
    arr = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{name}: expected {width} ids, got {len(r)} in row {i}")
        arr[i] = r
    return arr


def _real_matrix(rows, width, name):
    arr = np.zeros((len(rows), width), dtype=float)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{name}: expected {width} values, got {len(r)} in row {i}")
        arr[i] = r
    return arr


def _check_ids(ids: np.ndarray, sizes: Sequence[int], name: str):
    for j, size in enumerate(sizes):
        col = ids[:, j]
        bad = (col < 0) | (col >= size)
        if np.any(bad):
            raise DataError(f"{name}[{j}]: index {int(col[bad][0])} out of range [0, {size})")


@dataclass
class TargetBatch:
    pool: sp.csr_matrix
    cats: np.ndarray
    reals: np.ndarray

    def __len__(self):
        return self.pool.shape[0]

    def take(self, idx) -> "TargetBatch":
        return TargetBatch(self.pool[idx], self.cats[idx], self.reals[idx])

    @classmethod
    def encode(cls, targets: Sequence[TargetFeatures], cfg: ModelConfig) -> "TargetBatch":
        indptr = [0]
        indices, data = [], []
        for i, t in enumerate(targets):
            toks = np.asarray(t.token_ids, dtype=np.int64)
            if toks.size == 0:
                raise DataError(f"target {i}: token list is empty")
            if np.any((toks < 0) | (toks >= cfg.token_vocab)):
                bad = toks[(toks < 0) | (toks >= cfg.token_vocab)][0]
                raise DataError(f"token: index {int(bad)} out of range [0, {cfg.token_vocab})")
            indices.extend(toks.tolist())
            data.extend([1.0 / toks.size] * toks.size)
            indptr.append(len(indices))
        pool = sp.csr_matrix(
            (np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
            shape=(len(targets), cfg.token_vocab),
        )
        pool.sum_duplicates()
        cats = _int_matrix([t.categorical_ids for t in targets], len(cfg.target_cat_sizes), "target categorical")
        _check_ids(cats, cfg.target_cat_sizes, "target categorical")
        reals = _real_matrix([t.content_reals for t in targets], cfg.n_target_reals, "content_reals")
        return cls(pool, cats, reals)


@dataclass
class ContextBatch:
    cats: np.ndarray
    reals: np.ndarray

    def __len__(self):
        return self.cats.shape[0]

    def take(self, idx) -> "ContextBatch":
        return ContextBatch(self.cats[idx], self.reals[idx])

    @classmethod
    def encode(cls, contexts: Sequence[ContextFeatures], cfg: ModelConfig) -> "ContextBatch":
        cats = _int_matrix([c.context_ids for c in contexts], len(cfg.context_cat_sizes), "context categorical")
        _check_ids(cats, cfg.context_cat_sizes, "context categorical")
        reals = _real_matrix([c.context_reals for c in contexts], cfg.n_context_reals, "context_reals")
        return cls(cats, reals)


@dataclass
class FeatureBatch:
    targets: TargetBatch
    contexts: ContextBatch

    def __post_init__(self):
        if len(self.targets) != len(self.contexts):
            raise ConfigError("target and context batches differ in length")

    def __len__(self):
        return len(self.targets)

    def take(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.targets.take(idx), self.contexts.take(idx))

    @classmethod
    def encode(cls, targets, contexts, cfg: ModelConfig) -> "FeatureBatch":
        return cls(TargetBatch.encode(targets, cfg), ContextBatch.encode(contexts, cfg))


@dataclass
class TrainingSet:
    """Encoded features plus the per-row quantities the losses need."""

    features: FeatureBatch
    y: np.ndarray
    r: np.ndarray
    baseline: np.ndarray

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "TrainingSet":
        return TrainingSet(self.features.take(idx), self.y[idx], self.r[idx], self.baseline[idx])

    @classmethod
    def from_samples(cls, samples, cfg: ModelConfig) -> "TrainingSet":
        feats = FeatureBatch.encode([s.target for s in samples], [s.context for s in samples], cfg)
        return cls(
            feats,
            np.array([s.y for s in samples], dtype=float),
            np.array([s.r for s in samples], dtype=np.int64),
            np.array([s.calibration_baseline for s in samples], dtype=float),
        )


# --------------------------------------------------------------------------
# Predictions
# --------------------------------------------------------------------------

@dataclass
class UncertaintyReport:
    mean: float
    data_std: float
    model_std: float
    measurement_std: float
    gmm: GmmParams
    model_std_valid: bool = True


@dataclass
class UncertaintyBatch:
    mean: np.ndarray
    data_std: np.ndarray
    model_std: np.ndarray
    measurement_std: np.ndarray
    gmm: GmmParams
    pass_means: np.ndarray = field(repr=False)
    model_std_valid: bool = True

    def __len__(self):
        return len(self.mean)

    def report(self, i: int) -> UncertaintyReport:
        return UncertaintyReport(
            float(self.mean[i]),
            float(self.data_std[i]),
            float(self.model_std[i]),
            float(self.measurement_std[i]),
            self.gmm.row(i),
            self.model_std_valid,
        )


def mc_dropout_std(pass_values: np.ndarray, axis: int = 0) -> np.ndarray:
    """sqrt(mean(y^2) - mean(y)^2) over the stochastic passes (population form).

    Evaluated on values shifted by the first pass, which leaves the result
    unchanged and makes identical passes give exactly zero.
    """
    y = np.asarray(pass_values, dtype=float)
    d = y - np.take(y, [0], axis=axis)
    var = np.mean(d * d, axis=axis) - np.mean(d, axis=axis) ** 2
    return np.sqrt(np.maximum(var, 0.0))


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class DDNModel:
    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        cfg = config
        init_rng, self.rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
        self.token_emb = nn.Embedding(cfg.token_vocab, cfg.token_dim, init_rng, "token")
        self.target_cat_emb = [
            nn.Embedding(n, cfg.cat_dim, init_rng, f"target_cat{j}") for j, n in enumerate(cfg.target_cat_sizes)
        ]
        self.context_cat_emb = [
            nn.Embedding(n, cfg.cat_dim, init_rng, f"context_cat{j}") for j, n in enumerate(cfg.context_cat_sizes)
        ]
        t_in = cfg.token_dim + cfg.cat_dim * len(cfg.target_cat_sizes) + cfg.n_target_reals
        c_in = cfg.cat_dim * len(cfg.context_cat_sizes) + cfg.n_context_reals
        if c_in < 1:
            raise ConfigError("context subnet has no inputs")
        self.target_layers = self._stack(t_in, cfg.target_hidden, init_rng, "target")
        self.context_layers = self._stack(c_in, cfg.context_hidden, init_rng, "context")
        d = cfg.descriptor_dim
        self.fusion = nn.Dense(3 * d, cfg.fusion_hidden, init_rng, "fusion")
        self.head = nn.Dense(cfg.fusion_hidden, 3 * cfg.k, init_rng, "head")
        self.optimizer = nn.Adam(self.parameters(), lr=cfg.lr)

    @staticmethod
    def _stack(in_dim, sizes, rng, name):
        layers = []
        for i, size in enumerate(sizes):
            layers.append(nn.Dense(in_dim, size, rng, f"{name}.{i}"))
            in_dim = size
        return layers

    def parameters(self) -> list[nn.Parameter]:
        params = self.token_emb.parameters()
        for e in self.target_cat_emb + self.context_cat_emb:
            params += e.parameters()
        for layer in self.target_layers + self.context_layers + [self.fusion, self.head]:
            params += layer.parameters()
        return params

    # -- forward pieces ---------------------------------------------------

    def _mlp(self, x, layers, mode, rng, trace):
        for layer in layers:
            x = nn.dropout(layer(x, "relu"), self.config.dropout, mode, rng, trace)
        return x

    def target_descriptor(self, tb: TargetBatch, mode="off", rng=None, trace=None) -> nn.Tensor:
        parts = [self.token_emb.pooled(tb.pool)]
        parts += [emb(tb.cats[:, j]) for j, emb in enumerate(self.target_cat_emb)]
        if tb.reals.shape[1]:
            parts.append(nn.constant(tb.reals))
        return self._mlp(nn.concat(parts, axis=1), self.target_layers, mode, rng, trace)

    def context_descriptor(self, cb: ContextBatch, mode="off", rng=None, trace=None) -> nn.Tensor:
        parts = [emb(cb.cats[:, j]) for j, emb in enumerate(self.context_cat_emb)]
        if cb.reals.shape[1]:
            parts.append(nn.constant(cb.reals))
        return self._mlp(nn.concat(parts, axis=1), self.context_layers, mode, rng, trace)

    def fuse_and_predict(self, t_desc: nn.Tensor, c_desc: nn.Tensor, mode="off", rng=None, trace=None) -> nn.Tensor:
        """Raw head output (alpha logits, means, sigma pre-activations)."""
        d = self.config.descriptor_dim
        if t_desc.shape[-1] != d or c_desc.shape[-1] != d:
            raise ConfigError(f"descriptors must have dimension {d}")
        if t_desc.shape != c_desc.shape:
            raise ConfigError("target and context descriptor batches differ in shape")
        fused = nn.concat([t_desc, c_desc, nn.mul(t_desc, c_desc)], axis=1)
        h = nn.dropout(self.fusion(fused, "relu"), self.config.dropout, mode, rng, trace)
        return self.head(h)

    def forward(self, batch: FeatureBatch, mode="off", rng=None, trace=None):
        """(alpha logits, mus, sigmas) graph tensors for a batch."""
        rng = self.rng if rng is None else rng
        t = self.target_descriptor(batch.targets, mode, rng, trace)
        c = self.context_descriptor(batch.contexts, mode, rng, trace)
        return density.head_tensors(self.fuse_and_predict(t, c, mode, rng, trace), self.config.k)

    # -- training ---------------------------------------------------------

    def batch_losses(self, data: TrainingSet, kind: str, mode="train", rng=None, trace=None,
                     sigma_eps=None) -> nn.Tensor:
        """Per-row losses.  For DDN, ``sigma_eps`` defaults to the noise level
        implied by the current (stop-gradient) mixture mean and each row's r."""
        if kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {kind!r}")
        logits, mus, sigmas = self.forward(data.features, mode, rng, trace)
        eps = sigma_eps
        if kind == "DDN" and eps is None and self.config.noise_mu_source == "empirical":
            eps = noise_sigma_eps(data.y, data.r, data.baseline)
        elif kind == "DDN" and eps is None:
            mu_hat = density.mixture_mean(GmmParams(_softmax_np(logits.data), mus.data, sigmas.data))
            eps = noise_sigma_eps(mu_hat, data.r, data.baseline)
        return density.batch_loss(kind, logits, mus, sigmas, data.y, eps)

    def train_step(self, data: TrainingSet, kind: str) -> float:
        """One optimizer step on ``data``; returns the pre-step mean loss."""
        if len(data) == 0:
            raise UsageError("train_step needs a non-empty batch")
        per_row = self.batch_losses(data, kind, "train")
        bad = np.flatnonzero(~np.isfinite(per_row.data))
        if bad.size:
            raise NumericalError(f"non-finite {kind} loss at sample index {int(bad[0])}")
        loss = nn.mean(per_row)
        self.optimizer.zero_grad()
        nn.backward(loss)
        self.optimizer.step()
        return float(loss.data)

    def fit(self, data: TrainingSet, kind: str, epochs: int, batch_size: int | None = None,
            max_steps: int | None = None) -> list[float]:
        """Mini-batch training; returns the mean training loss of each epoch."""
        if epochs < 0:
            raise ConfigError("epochs must be >= 0")
        bs = batch_size or self.config.batch_size
        curve, steps = [], 0
        n = len(data)
        if n == 0:
            return curve
        for _ in range(epochs):
            order = self.rng.permutation(n)
            total = 0.0
            seen = 0
            for lo in range(0, n, bs):
                idx = order[lo : lo + bs]
                total += self.train_step(data.take(idx), kind) * len(idx)
                seen += len(idx)
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            curve.append(total / seen)
            if max_steps is not None and steps >= max_steps:
                break
        return curve

    # -- inference --------------------------------------------------------

    def predict(self, batch: FeatureBatch, chunk: int = 8192) -> GmmParams:
        """Deterministic (dropout off) mixture parameters for every row."""
        outs = []
        for lo in range(0, len(batch), chunk):
            part = batch.take(slice(lo, lo + chunk))
            logits, mus, sigmas = self.forward(part, "off")
            outs.append((_softmax_np(logits.data), mus.data, sigmas.data))
        if not outs:
            k = self.config.k
            return GmmParams(np.zeros((0, k)), np.zeros((0, k)), np.zeros((0, k)))
        return GmmParams(*(np.concatenate(o) for o in zip(*outs)))

    def mc_pass_means(self, batch: FeatureBatch, passes: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((passes, len(batch)))
        for i in range(passes):
            logits, mus, _ = self.forward(batch, "mc_inference", rng)
            out[i] = np.sum(_softmax_np(logits.data) * mus.data, axis=1)
        return out

    def predict_uncertainty(
        self,
        batch: FeatureBatch,
        r_hint=None,
        baseline=None,
        passes: int | None = None,
        seed: int | None = None,
    ) -> UncertaintyBatch:
        """Mean and separated data / model / measurement stds for each row.

        Model std follows the MC-dropout estimator over ``passes`` stochastic
        forward passes of the per-pass mixture mean.  The dropout stream is
        seeded from ``seed`` (default: the model seed), so repeated calls are
        bit-identical.
        """
        passes = self.config.mc_passes if passes is None else passes
        if passes < 1:
            raise ConfigError("need at least one stochastic pass")
        gmm = self.predict(batch)
        mean = density.mixture_mean(gmm)
        data_std = density.mixture_std(gmm)
        rng = np.random.default_rng([self.config.seed if seed is None else seed, 0x4D43])
        pass_means = self.mc_pass_means(batch, passes, rng)
        model_std = mc_dropout_std(pass_means) if passes >= 2 else np.zeros(len(batch))
        if r_hint is None:
            meas = np.zeros(len(batch))
        else:
            if baseline is None:
                raise UsageError("measurement std needs the calibration baseline")
            meas = np.asarray(noise_sigma_eps(mean, r_hint, baseline), dtype=float).reshape(len(batch))
        return UncertaintyBatch(mean, data_std, model_std, meas, gmm, pass_means, passes >= 2)

    def predict_with_uncertainty(
        self,
        t: TargetFeatures,
        c: ContextFeatures,
        r_hint: int | None = None,
        passes: int | None = None,
        baseline: float | None = None,
        seed: int | None = None,
    ) -> UncertaintyReport:
        batch = FeatureBatch.encode([t], [c], self.config)
        return self.predict_uncertainty(
            batch, None if r_hint is None else [r_hint], baseline, passes, seed
        ).report(0)

    def _grid_pass(self, tb, cb, mode, rng):
        t = self.target_descriptor(tb, mode, rng).data
        c = self.context_descriptor(cb, mode, rng).data
        nt, nc = len(t), len(c)
        tt = nn.Tensor(np.repeat(t, nc, axis=0))
        cc = nn.Tensor(np.tile(c, (nt, 1)))
        raw = self.fuse_and_predict(tt, cc, mode, rng).data
        return head_params(raw, self.config.k)

    def predict_grid(self, tb: TargetBatch, cb: ContextBatch, passes: int | None = None,
                     seed: int | None = None) -> dict:
        """Uncertainty for every (target, context) pair as (n_targets, n_contexts) arrays.

        Within one stochastic pass the target and context subnet masks are
        shared across the pairs that reuse them; each pair still sees an
        independent mask draw per pass, so the MC estimator is unchanged.
        """
        passes = self.config.mc_passes if passes is None else passes
        if passes < 1:
            raise ConfigError("need at least one stochastic pass")
        nt, nc = len(tb), len(cb)
        gmm = self._grid_pass(tb, cb, "off", None)
        mean = density.mixture_mean(gmm)
        data_std = density.mixture_std(gmm)
        rng = np.random.default_rng([self.config.seed if seed is None else seed, 0x4D43])
        pm = np.empty((passes, nt * nc))
        for i in range(passes):
            pm[i] = density.mixture_mean(self._grid_pass(tb, cb, "mc_inference", rng))
        model_std = mc_dropout_std(pm) if passes >= 2 else np.zeros(nt * nc)
        return {
            "mean": mean.reshape(nt, nc),
            "data_std": data_std.reshape(nt, nc),
            "model_std": model_std.reshape(nt, nc),
        }

    def descriptors(self, tb: TargetBatch, chunk: int = 8192) -> np.ndarray:
        """Deterministic target descriptors (dropout off)."""
        out = [self.target_descriptor(tb.take(slice(lo, lo + chunk))).data for lo in range(0, len(tb), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.descriptor_dim))

    # -- persistence ------------------------------------------------------

    def copy(self) -> "DDNModel":
        other = DDNModel(replace(self.config))
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.data[...] = src.data
        other.rng = np.random.default_rng()
        other.rng.bit_generator.state = self.rng.bit_generator.state
        return other

    def save(self, path, metadata: dict | None = None) -> Path:
        return save_checkpoint(self, path, metadata)


def head_params(raw: np.ndarray, k: int) -> GmmParams:
    return density.head_forward(raw, k)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Checkpoint format
#
#   bytes 0-7    b"DDNCKPT\n"
#   bytes 8-15   header length H, unsigned 64-bit little-endian
#   next H bytes UTF-8 JSON header (sorted keys):
#                  format_version, config, metadata,
#                  params: [{name, shape, offset, count}]  (offset in floats)
#   remainder    all parameter values, float64 little-endian, C order,
#                concatenated in header order
# --------------------------------------------------------------------------

def save_checkpoint(model: DDNModel, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for p in model.parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": p.name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "params": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, len(CHECKPOINT_MAGIC) + 8 + hlen


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[DDNModel, dict]:
    """Rebuild a model from disk; returns (model, metadata).

    If ``expected_config`` is given, any difference in architecture is an
    error.
    """
    header, start = read_checkpoint_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expected_config is not None:
        want, got = expected_config.to_dict(), cfg.to_dict()
        diff = sorted(k for k in want if k not in ("seed", "lr", "batch_size", "mc_passes") and want[k] != got.get(k))
        if diff:
            raise ConfigError(f"checkpoint config mismatch in {diff}")
    model = DDNModel(cfg)
    raw = np.fromfile(path, dtype="<f8", offset=start)
    params = model.parameters()
    if len(params) != len(header["params"]):
        raise ConfigError("checkpoint parameter list does not match the architecture")
    for p, e in zip(params, header["params"]):
        if p.name != e["name"] or list(p.shape) != e["shape"]:
            raise ConfigError(f"checkpoint entry {e['name']} {e['shape']} does not match {p.name} {list(p.shape)}")
        p.data[...] = raw[e["offset"] : e["offset"] + e["count"]].reshape(p.shape)
    return model, header.get("metadata", {})
