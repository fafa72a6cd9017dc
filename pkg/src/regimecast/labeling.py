"""Buy/Sell/Hold labels from a symmetric quantile threshold on log returns."""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from ._io import format_header, parse_header
from .errors import InsufficientDataError, ParseError
from .market_data import ReturnSeries

logger = logging.getLogger(__name__)

DEFAULT_Q = 0.04


class Decision(str, enum.Enum):
    BUY = "Buy"
    SELL = "Sell"
    HOLD = "Hold"

    def __str__(self):
        return self.value


# integer codes used by the numeric code paths (classifiers, metrics)
CLASSES = (Decision.BUY, Decision.SELL, Decision.HOLD)
CODE = {d: i for i, d in enumerate(CLASSES)}
BUY, SELL, HOLD = 0, 1, 2


def encode(decisions) -> np.ndarray:
    return np.array([CODE[Decision(d)] for d in decisions], dtype=np.int8)


def decode(codes) -> list:
    return [CLASSES[int(c)] for c in codes]


@dataclass(frozen=True)
class ThresholdPair:
    lower: float
    upper: float
    quantile_q: float

    def __post_init__(self):
        if not (self.lower <= 0 and self.upper == -self.lower):
            raise ValueError(f"invalid thresholds ({self.lower}, {self.upper})")


@dataclass
class DecisionSeries:
    market_id: str
    codes: np.ndarray      # int8, see CLASSES
    timestamps: np.ndarray

    def __len__(self):
        return len(self.codes)

    @property
    def decisions(self):
        return decode(self.codes)


def quantile_linear(values, q):
    """Empirical quantile interpolating linearly between order statistics
    at position ``(n - 1) * q`` (R type 7, numpy ``method="linear"``)."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


def compute_thresholds(returns, q=DEFAULT_Q) -> ThresholdPair:
    """Lower threshold is the ``q``-quantile of the returns, clamped to be
    non-positive; the upper threshold is its absolute value."""
    r = returns.returns if isinstance(returns, ReturnSeries) else np.asarray(returns, float)
    if r.size == 0:
        raise InsufficientDataError("cannot compute thresholds of an empty return series")
    if not 0 < q < 0.5:
        raise ValueError("q must lie in (0, 0.5)")
    lower = quantile_linear(r, q)
    if lower > 0:
        warnings.warn(f"{q}-quantile of returns is positive ({lower:g}); clamped to 0",
                      RuntimeWarning, stacklevel=2)
        lower = 0.0
    lower = lower + 0.0  # normalize -0.0
    return ThresholdPair(lower, -lower + 0.0, q)


def label_codes(r, thresholds: ThresholdPair) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    codes = np.full(r.shape, HOLD, dtype=np.int8)
    codes[r < thresholds.lower] = SELL
    codes[r > thresholds.upper] = BUY
    return codes


def label_series(returns: ReturnSeries, thresholds: ThresholdPair) -> DecisionSeries:
    """Ties with either threshold are labeled Hold."""
    return DecisionSeries(returns.market_id, label_codes(returns.returns, thresholds),
                          returns.timestamps.copy())


def write_decisions_csv(series: DecisionSeries, path, meta=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta is not None:
            fh.write(format_header(meta))
        fh.write("timestamp,decision\n")
        for ts, c in zip(series.timestamps, series.codes):
            fh.write(f"{int(ts)},{CLASSES[c].value}\n")


def read_decisions_csv(path, market_id):
    """Returns ``(DecisionSeries, meta)``."""
    meta, ts, codes = {}, [], []
    with open(path, encoding="utf-8") as fh:
        header_seen = False
        for lineno, line in enumerate(fh, 1):
            if not header_seen and line.startswith("#"):
                meta.update(parse_header(line) or {})
                continue
            if not header_seen:
                if line.strip() != "timestamp,decision":
                    raise ParseError("expected header timestamp,decision", lineno)
                header_seen = True
                continue
            if not line.strip():
                continue
            try:
                t, d = line.rstrip("\n").split(",")
                ts.append(int(t))
                codes.append(CODE[Decision(d)])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return (DecisionSeries(market_id, np.array(codes, dtype=np.int8),
                           np.array(ts, dtype=np.int64)), meta)
