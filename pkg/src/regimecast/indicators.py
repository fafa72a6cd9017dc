"""Conventional technical indicators evaluated at a single bar.

Each function reads only data at or before ``i``, so a value never
changes when later bars are appended.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientHistoryError


@dataclass(frozen=True)
class IndicatorParams:
    rsi_period: int = 14
    ultosc_periods: tuple = (7, 14, 28)
    ultosc_weights: tuple = (4, 2, 1)
    ma_fast: int = 7
    ma_slow: int = 25
    zscore_window: int = 59
    pct_window: int = 59

    def lookback(self):
        """Number of bars (ending at ``i`` inclusive) each indicator needs."""
        return {
            "rsi": self.rsi_period + 1,
            "ultosc": max(self.ultosc_periods) + 1,
            "close_pct_change": self.pct_window,
            "close_zscore": self.zscore_window,
            "volume_zscore": self.zscore_window,
            "ma_ratio": self.ma_slow,
        }


def _need(name, bars, i):
    if i + 1 < bars:
        raise InsufficientHistoryError(name, bars, i + 1)


def rsi(close, i, period=14):
    """Wilder RSI at bar ``i``.

    Averages are seeded with the plain mean of the first ``period``
    changes, then smoothed recursively. Zero average loss gives 100; a
    flat series (no gains, no losses) gives 50.
    """
    _need("rsi", period + 1, i)
    diff = np.diff(np.asarray(close[: i + 1], dtype=np.float64))
    gain = np.where(diff > 0, diff, 0.0)
    loss = np.where(diff < 0, -diff, 0.0)
    avg_gain = float(np.mean(gain[:period]))
    avg_loss = float(np.mean(loss[:period]))
    for g, l in zip(gain[period:].tolist(), loss[period:].tolist()):
        avg_gain = (avg_gain * (period - 1) + g) / period
        avg_loss = (avg_loss * (period - 1) + l) / period
    if avg_loss == 0.0:
        return 50.0 if avg_gain == 0.0 else 100.0
    return 100.0 - 100.0 / (1.0 + avg_gain / avg_loss)


def ultimate_oscillator(high, low, close, i, periods=(7, 14, 28), weights=(4, 2, 1)):
    """Williams' Ultimate Oscillator at bar ``i``. A window with zero true
    range contributes an average of 0.5, so a flat market reads 50."""
    longest = max(periods)
    _need("ultosc", longest + 1, i)
    sl = slice(i - longest + 1, i + 1)
    prev_close = np.asarray(close[i - longest: i], dtype=np.float64)
    h = np.asarray(high[sl], dtype=np.float64)
    l = np.asarray(low[sl], dtype=np.float64)
    c = np.asarray(close[sl], dtype=np.float64)
    true_low = np.minimum(l, prev_close)
    bp = c - true_low
    tr = np.maximum(h, prev_close) - true_low
    total = 0.0
    for p, w in zip(periods, weights):
        tr_sum = float(np.sum(tr[-p:]))
        avg = 0.5 if tr_sum == 0.0 else float(np.sum(bp[-p:])) / tr_sum
        total += w * avg
    return 100.0 * total / sum(weights)


def rolling_zscore(x, i, window=59, name="zscore"):
    """Z-score of ``x[i]`` within the trailing ``window`` values
    (population std); zero variance gives 0."""
    _need(name, window, i)
    w = np.asarray(x[i - window + 1: i + 1], dtype=np.float64)
    sd = float(np.std(w))
    if sd == 0.0:
        return 0.0
    return (float(w[-1]) - float(np.mean(w))) / sd


def pct_change(close, i, window=59):
    _need("close_pct_change", window, i)
    return float(close[i]) / float(close[i - window + 1]) - 1.0


def ma_ratio(close, i, fast=7, slow=25):
    _need("ma_ratio", max(fast, slow), i)
    f = float(np.mean(np.asarray(close[i - fast + 1: i + 1], dtype=np.float64)))
    s = float(np.mean(np.asarray(close[i - slow + 1: i + 1], dtype=np.float64)))
    return f / s
