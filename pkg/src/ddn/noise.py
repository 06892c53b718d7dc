"""Binomial measurement noise of observed CTR on the log-calibrated scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

P_CLAMP = (1e-6, 1.0 - 1e-6)


@dataclass(frozen=True)
class ImpressionRecord:
    r: int
    clicks: int

    def __post_init__(self):
        if self.r < 1:
            raise DataError(f"impression count must be >= 1, got {self.r}")
        if not 0 <= self.clicks <= self.r:
            raise DataError(f"clicks must be in [0, r={self.r}], got {self.clicks}")


def _check_baseline(baseline):
    b = np.asarray(baseline, dtype=float)
    if np.any((b <= 0) | (b >= 1)):
        raise ConfigError("calibration baseline must lie strictly between 0 and 1")
    return b


def sigma_eps(mu, r, calibration_baseline):
    """Delta-method std of log(clicks/r) for clicks ~ Binomial(r, p).

    ``p = baseline * exp(mu)``, clamped away from 0 and 1, so the result
    depends only on the predicted mean and the impression count; the
    realised clicks never enter.  Vectorised over all arguments.
    """
    mu = np.asarray(mu, dtype=float)
    r = np.asarray(r)
    if not np.all(np.isfinite(mu)):
        raise DataError("sigma_eps: mean log-CTR must be finite")
    if np.any(r < 1):
        raise DataError("sigma_eps: impression count r must be >= 1")
    b = _check_baseline(calibration_baseline)
    with np.errstate(over="ignore"):
        p = np.clip(b * np.exp(mu), *P_CLAMP)
    out = np.sqrt((1.0 - p) / (p * r))
    return float(out) if out.ndim == 0 else out


def empirical_log_ctr(rec: ImpressionRecord | None = None, calibration_baseline=None, *, r=None, clicks=None):
    """log of the Jeffreys-smoothed CTR (clicks+0.5)/(r+1) over the baseline.

    Accepts an ``ImpressionRecord`` or vectorised ``r=``/``clicks=`` arrays.
    """
    if rec is not None:
        r, clicks = rec.r, rec.clicks
    r = np.asarray(r, dtype=float)
    clicks = np.asarray(clicks, dtype=float)
    if np.any(r < 1) or np.any(clicks < 0) or np.any(clicks > r):
        raise DataError("need 0 <= clicks <= r and r >= 1")
    b = _check_baseline(calibration_baseline)
    out = np.log((clicks + 0.5) / (r + 1.0) / b)
    return float(out) if out.ndim == 0 else out
