"""Concordance correlation, RMSE, the CCC training loss and spectral smoothness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_DENOMINATOR = 1e-12


@dataclass(frozen=True)
class CccParts:
    mu_y: float
    mu_yhat: float
    var_y: float
    var_yhat: float
    cov: float
    ccc: float


def _pair(y, yhat, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {y.size}")
    return y, yhat


def ccc(y, yhat) -> CccParts:
    """Concordance correlation coefficient with population moments.

    Returns 0 when the denominator vanishes (both inputs constant with the
    same mean).
    """
    y, yhat = _pair(y, yhat, 2)
    mu_y, mu_yhat = y.mean(), yhat.mean()
    dy, dyhat = y - mu_y, yhat - mu_yhat
    var_y, var_yhat = np.mean(dy * dy), np.mean(dyhat * dyhat)
    cov = np.mean(dy * dyhat)
    denom = var_y + var_yhat + (mu_y - mu_yhat) ** 2
    value = 0.0 if denom <= DEGENERATE_DENOMINATOR else float(np.clip(2 * cov / denom, -1.0, 1.0))
    return CccParts(float(mu_y), float(mu_yhat), float(var_y), float(var_yhat), float(cov), value)


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat, 1)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def ccc_loss_grad(y, yhat) -> tuple[float, np.ndarray]:
    """Loss ``-CCC(y, yhat)`` and its exact gradient with respect to ``yhat``.

    The gradient is returned in float64 with the shape of ``yhat``.  A
    degenerate denominator gives loss 0 and a zero gradient.
    """
    shape = np.shape(yhat)
    y, yhat = _pair(y, yhat, 2)
    n = y.size
    mu_y, mu_yhat = y.mean(), yhat.mean()
    dy, dyhat = y - mu_y, yhat - mu_yhat
    denom = np.mean(dy * dy) + np.mean(dyhat * dyhat) + (mu_y - mu_yhat) ** 2
    if denom <= DEGENERATE_DENOMINATOR:
        return 0.0, np.zeros(shape)
    value = 2 * np.mean(dy * dyhat) / denom
    d_denom = (2.0 / n) * (dyhat + (mu_yhat - mu_y))
    d_ccc = ((2.0 / n) * dy - value * d_denom) / denom
    return -float(value), (-d_ccc).reshape(shape)


def lowband_power_fraction(seq, cutoff_hz: float, frame_rate_hz: float) -> float:
    """Share of the (mean-removed) DFT power at positive frequencies <= ``cutoff_hz``.

    A constant signal has no power anywhere and is reported as 1.0.
    """
    x = np.asarray(seq, dtype=np.float64).ravel()
    if x.size < 4:
        raise ValueError(f"need at least 4 samples, got {x.size}")
    if not 0 < cutoff_hz < frame_rate_hz / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {frame_rate_hz / 2}) Hz")
    if np.ptp(x) == 0:
        return 1.0
    power = np.abs(np.fft.rfft(x - x.mean())) ** 2
    freqs = np.fft.rfftfreq(x.size, d=1.0 / frame_rate_hz)
    positive = freqs > 0
    total = power[positive].sum()
    if total <= 0:
        return 1.0
    return float(power[positive & (freqs <= cutoff_hz)].sum() / total)


def first_difference_rms(seq) -> float:
    x = np.asarray(seq, dtype=np.float64).ravel()
    if x.size < 2:
        return 0.0
    return float(np.sqrt(np.mean(np.diff(x) ** 2)))
