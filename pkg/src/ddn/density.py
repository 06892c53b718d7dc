"""Gaussian-mixture output head, its moments and the three training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, UsageError

SIGMA_FLOOR = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmParams:
    alphas: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        for name in ("alphas", "mus", "sigmas"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        k = self.alphas.shape[-1]
        if k < 1 or self.mus.shape[-1] != k or self.sigmas.shape[-1] != k:
            raise ConfigError("alphas, mus and sigmas must have the same number of components")

    @property
    def k(self) -> int:
        return self.alphas.shape[-1]

    def validate(self):
        if np.any(self.alphas < 0) or np.any(np.abs(self.alphas.sum(-1) - 1.0) > 1e-9):
            raise ConfigError("mixture weights must be non-negative and sum to 1")
        if np.any(self.sigmas < SIGMA_FLOOR):
            raise ConfigError(f"component sigmas must be >= {SIGMA_FLOOR}")
        return self

    def row(self, i: int) -> "GmmParams":
        """One mixture out of a batch."""
        return GmmParams(self.alphas[i], self.mus[i], self.sigmas[i])


@dataclass(frozen=True)
class NoiseAugmentedGmm:
    base: GmmParams
    sigma_eps: float

    @property
    def effective_sigmas(self) -> np.ndarray:
        return np.sqrt(self.base.sigmas**2 + self.sigma_eps**2)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(raw, k: int) -> GmmParams:
    """Map 3k raw head outputs (alpha logits, means, sigma pre-activations)
    to mixture parameters.  Works on a single vector or a batch of rows."""
    if k < 1:
        raise ConfigError("a mixture needs at least one component")
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != 3 * k:
        raise ConfigError(f"head output has {raw.shape[-1]} values, expected {3 * k}")
    logits, mus, pre = raw[..., :k], raw[..., k : 2 * k], raw[..., 2 * k :]
    return GmmParams(_softmax(logits), mus.copy(), np.logaddexp(0.0, pre) + SIGMA_FLOOR)


def head_tensors(raw: nn.Tensor, k: int) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
    """Graph version of ``head_forward``: (alpha logits, mus, sigmas)."""
    if k < 1:
        raise ConfigError("a mixture needs at least one component")
    if raw.shape[-1] != 3 * k:
        raise ConfigError(f"head output has {raw.shape[-1]} values, expected {3 * k}")
    logits = raw[:, :k]
    mus = raw[:, k : 2 * k]
    sigmas = nn.add(nn.softplus(raw[:, 2 * k :]), SIGMA_FLOOR)
    return logits, mus, sigmas


def mixture_mean(g: GmmParams):
    return np.sum(g.alphas * g.mus, axis=-1)


def mixture_std(g: GmmParams):
    """Standard deviation of the mixture (law of total variance).

    Uses the centred form sum a_i (s_i^2 + (mu_i - m)^2), algebraically equal
    to sum a_i (s_i^2 + mu_i^2) - m^2 but without the cancellation.
    """
    m = mixture_mean(g)
    var = np.sum(g.alphas * (g.sigmas**2 + (g.mus - m[..., None]) ** 2), axis=-1)
    if np.any(var < -1e-12):
        raise ArithmeticError(f"negative mixture variance {np.min(var)}")
    return np.sqrt(np.maximum(var, 0.0))


def mixture_pdf(g: GmmParams, y):
    """Density of a single mixture evaluated at one or many points."""
    y = np.asarray(y, dtype=float)[..., None]
    z = (y - g.mus) / g.sigmas
    return np.sum(g.alphas * np.exp(-0.5 * z * z) / (g.sigmas * math.sqrt(2 * math.pi)), axis=-1)


def _component_logpdf(y, mus, var):
    return -HALF_LOG_2PI - 0.5 * np.log(var) - 0.5 * (y - mus) ** 2 / var


def _nll(g: GmmParams, y, sigma_eps) -> np.ndarray:
    y = np.asarray(y, dtype=float)[..., None]
    var = g.sigmas**2 + np.asarray(sigma_eps, dtype=float)[..., None] ** 2
    with np.errstate(divide="ignore"):
        la = np.log(g.alphas)
    z = la + _component_logpdf(y, g.mus, var)
    m = z.max(axis=-1, keepdims=True)
    return -(m[..., 0] + np.log(np.exp(z - m).sum(axis=-1)))


def mdn_nll(g: GmmParams, y):
    """-log sum_i alpha_i N(y; mu_i, sigma_i^2), stable for far-away y."""
    return _nll(g, y, 0.0)


def ddn_nll(g: GmmParams, y, sigma_eps):
    """Mixture NLL with every component variance widened by sigma_eps^2."""
    if np.any(np.asarray(sigma_eps) < 0):
        raise ConfigError("sigma_eps must be non-negative")
    return _nll(g, y, sigma_eps)


def reg_mse(prediction, y):
    return (np.asarray(prediction, dtype=float) - np.asarray(y, dtype=float)) ** 2


def gmm_nll(
    logits: nn.Tensor, mus: nn.Tensor, sigmas: nn.Tensor, y: np.ndarray, sigma_eps=None
) -> nn.Tensor:
    """Per-row mixture NLL as a graph node.

    ``sigma_eps`` (one value per row, or None) widens each component and is
    treated as a constant: no gradient flows into it.
    """
    y = np.asarray(y, dtype=float)[:, None]
    eps2 = 0.0 if sigma_eps is None else np.asarray(sigma_eps, dtype=float)[:, None] ** 2
    if np.any(np.asarray(eps2) < 0):
        raise ConfigError("sigma_eps must be non-negative")
    s = sigmas.data
    var = s * s + eps2
    z0 = logits.data - logits.data.max(axis=1, keepdims=True)
    log_alpha = z0 - np.log(np.exp(z0).sum(axis=1, keepdims=True))
    alpha = np.exp(log_alpha)
    resid = y - mus.data
    comp = log_alpha - HALF_LOG_2PI - 0.5 * np.log(var) - 0.5 * resid**2 / var
    m = comp.max(axis=1, keepdims=True)
    e = np.exp(comp - m)
    tot = e.sum(axis=1, keepdims=True)
    loss = -(m + np.log(tot))[:, 0]
    resp = e / tot

    def grad_fn(g):
        g = g[:, None]
        d_logits = g * (alpha - resp)
        d_mus = -g * resp * resid / var
        d_sigmas = g * resp * (s / var) * (1.0 - resid**2 / var)
        return d_logits, d_mus, d_sigmas

    return nn.Tensor(loss, (logits, mus, sigmas), grad_fn)


def mixture_mean_tensor(logits: nn.Tensor, mus: nn.Tensor) -> nn.Tensor:
    return nn.sum(nn.mul(nn.softmax(logits, axis=1), mus), axis=1)


def batch_loss(kind: str, logits, mus, sigmas, y, sigma_eps=None) -> nn.Tensor:
    """Per-row loss for a model kind: REG (MSE on mixture mean), MDN or DDN."""
    if kind == "REG":
        return nn.square(nn.sub(mixture_mean_tensor(logits, mus), np.asarray(y, dtype=float)))
    if kind == "MDN":
        return gmm_nll(logits, mus, sigmas, y)
    if kind == "DDN":
        if sigma_eps is None:
            raise UsageError("DDN loss needs per-sample sigma_eps")
        return gmm_nll(logits, mus, sigmas, y, sigma_eps)
    raise ConfigError(f"unknown loss kind {kind!r}")
