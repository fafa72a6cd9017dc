"""Hourly feature extraction.

Each market is cut into non-overlapping 60-minute blocks. Minutes 1..59
of a block produce a feature vector; the move into minute 60 is the
prediction target.

Two feature families are available: the peak-curvature ("proposed")
family and a conventional indicator ("common") family.
"""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import indicators
from ._io import format_header, parse_header
from .errors import DomainError, InsufficientDataError, ParseError, ValidationError
from .labeling import CLASSES, CODE, HOLD, Decision, DecisionSeries
from .market_data import CandleSeries, log_returns

BLOCK = 60
WINDOW = BLOCK - 1

# index sets (1-based, inclusive) and divisor for the estimated % change
ESTPC_MODES = {
    "54..59/6": (54, 59, 6),
    "53..59/7": (53, 59, 7),
    "53..59/6": (53, 59, 6),
}
DEFAULT_ESTPC_MODE = "54..59/6"


@dataclass
class WindowBlock:
    market_id: str
    block_index: int
    start: int              # candle index of minute 1
    closes: np.ndarray      # minutes 1..59
    volumes: np.ndarray
    decisions: np.ndarray   # labels of the moves into minutes 1..59
    target_decision: int    # label of the move into minute 60
    target_return: float    # log return into minute 60

    @property
    def end(self):
        """Candle index of minute 59."""
        return self.start + WINDOW - 1


@dataclass
class PeakSet:
    indices: np.ndarray
    heights: np.ndarray
    curvatures: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class ProposedFeatures:
    buy_prop: float
    sell_prop: float
    close_price: float
    lm_intercept: float
    lm_slope: float
    peaks_avg_curvature: float
    peaks_avg_magnitude: float
    est_pct_change: float

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)


@dataclass(frozen=True)
class CommonFeatures:
    rsi: float
    ultosc: float
    close_pct_change: float
    close_zscore: float
    volume_zscore: float
    ma_ratio: float

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)


FAMILIES = {
    "proposed": tuple(f.name for f in fields(ProposedFeatures)),
    "common": tuple(f.name for f in fields(CommonFeatures)),
}


@dataclass
class HourlyObservation:
    block_index: int
    features: np.ndarray
    target_decision: int
    target_return: float


@dataclass
class FeatureTable:
    """One row per hourly block, in temporal order."""

    market_id: str
    family: str
    block_index: np.ndarray
    X: np.ndarray
    y: np.ndarray
    target_return: np.ndarray

    @property
    def names(self):
        return FAMILIES[self.family]

    def __len__(self):
        return len(self.block_index)

    def __getitem__(self, i):
        return HourlyObservation(int(self.block_index[i]), self.X[i], int(self.y[i]),
                                 float(self.target_return[i]))

    def take(self, idx) -> "FeatureTable":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureTable(self.market_id, self.family, self.block_index[idx],
                            self.X[idx], self.y[idx], self.target_return[idx])


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------

def make_blocks(series: CandleSeries, decisions: DecisionSeries) -> list:
    """Cut ``series`` into ``len(series) // 60`` consecutive blocks.

    In-window labels are those of the moves ending at minutes 1..59, so a
    block never sees the close of its own 60th minute. The move into the
    very first minute of the series is unobserved and counts as Hold.
    """
    n = len(series)
    if n < BLOCK:
        raise InsufficientDataError(f"need at least {BLOCK} minutes, got {n}")
    if len(decisions) != n - 1 or not np.array_equal(decisions.timestamps,
                                                      series.timestamp[:-1]):
        raise ValidationError("decisions are not aligned with the candle series")
    returns = log_returns(series).returns
    codes = decisions.codes
    blocks = []
    for b in range(n // BLOCK):
        s = b * BLOCK
        inwin = np.empty(WINDOW, dtype=np.int8)
        if s == 0:
            inwin[0] = HOLD
            inwin[1:] = codes[0:WINDOW - 1]
        else:
            inwin[:] = codes[s - 1:s + WINDOW - 1]
        blocks.append(WindowBlock(
            market_id=series.market_id,
            block_index=b,
            start=s,
            closes=series.close[s:s + WINDOW].copy(),
            volumes=series.volume[s:s + WINDOW].copy(),
            decisions=inwin,
            target_decision=int(codes[s + WINDOW - 1]),
            target_return=float(returns[s + WINDOW - 1]),
        ))
    return blocks


# --------------------------------------------------------------------------
# proposed (peak-curvature) family
# --------------------------------------------------------------------------

def detect_peaks(closes) -> PeakSet:
    """Interior local maxima of ``closes``.

    A flat run counts once, at its first index, when both neighbours of
    the run are strictly lower. Endpoints are never peaks.
    """
    y = np.asarray(closes, dtype=np.float64)
    n = len(y)
    idx = []
    i = 1
    while i < n - 1:
        if y[i - 1] < y[i]:
            j = i
            while j + 1 < n and y[j + 1] == y[i]:
                j += 1
            if j + 1 < n and y[j + 1] < y[i]:
                idx.append(i)
            i = j + 1
        else:
            i += 1
    idx = np.array(idx, dtype=np.int64)
    curv = np.array([peak_curvature(y, k) for k in idx], dtype=np.float64)
    return PeakSet(idx, y[idx] if idx.size else np.empty(0), curv)


def peak_curvature(closes, k):
    """Second-order difference ``y[k+1] - 2 y[k] + y[k-1]``."""
    if not 1 <= k <= len(closes) - 2:
        raise IndexError(f"curvature undefined at boundary index {k}")
    return float(closes[k + 1]) - 2.0 * float(closes[k]) + float(closes[k - 1])


def fit_peak_line(peaks: PeakSet, fallback=None):
    """Least-squares line of peak height on peak curvature.

    Returns ``(intercept, slope)``. With fewer than two peaks or no
    spread in curvature the slope is 0 and the intercept is the mean
    peak height, or ``fallback`` (the window mean) when there are no
    peaks at all.
    """
    c = np.asarray(peaks.curvatures, dtype=np.float64)
    h = np.asarray(peaks.heights, dtype=np.float64)
    if h.size == 0:
        return (float(fallback) if fallback is not None else 0.0), 0.0
    if h.size < 2 or np.ptp(c) == 0:
        return float(np.mean(h)), 0.0
    cc = c - c.mean()
    slope = float(np.dot(cc, h - h.mean()) / np.dot(cc, cc))
    intercept = float(h.mean() - slope * c.mean())
    return intercept, slope


def estimated_pct_change(closes, mode=DEFAULT_ESTPC_MODE):
    """Mean of the closing stretch of the window over the mean of the
    whole window, minus one. ``mode`` picks the stretch and divisor."""
    y = np.asarray(closes, dtype=np.float64)
    if len(y) != WINDOW:
        raise ValueError(f"expected {WINDOW} closes, got {len(y)}")
    if np.any(y <= 0):
        raise DomainError("closes must be positive")
    lo, hi, div = ESTPC_MODES[mode]
    tail = float(np.sum(y[lo - 1:hi])) / div
    return tail / float(np.mean(y)) - 1.0


def proposed_features(block: WindowBlock, estpc_mode=DEFAULT_ESTPC_MODE) -> ProposedFeatures:
    y = block.closes
    peaks = detect_peaks(y)
    window_mean = float(np.mean(y))
    intercept, slope = fit_peak_line(peaks, fallback=window_mean)
    if len(peaks):
        avg_curv = float(np.mean(peaks.curvatures))
        avg_mag = float(np.mean(peaks.heights))
    else:
        avg_curv, avg_mag = 0.0, window_mean
    d = np.asarray(block.decisions)
    return ProposedFeatures(
        buy_prop=int(np.count_nonzero(d == CODE[Decision.BUY])) / WINDOW,
        sell_prop=int(np.count_nonzero(d == CODE[Decision.SELL])) / WINDOW,
        close_price=float(y[-1]),
        lm_intercept=intercept,
        lm_slope=slope,
        peaks_avg_curvature=avg_curv,
        peaks_avg_magnitude=avg_mag,
        est_pct_change=estimated_pct_change(y, estpc_mode),
    )


# --------------------------------------------------------------------------
# common (indicator) family
# --------------------------------------------------------------------------

def common_features(block: WindowBlock, history: CandleSeries,
                    params: indicators.IndicatorParams = indicators.IndicatorParams()
                    ) -> CommonFeatures:
    """Indicator values as of the block's minute 59. ``history`` must
    contain the block; only candles up to minute 59 are read."""
    i = block.end
    if i >= len(history):
        raise InsufficientDataError("history does not reach the block's minute 59")
    c, h, l, v = history.close, history.high, history.low, history.volume
    return CommonFeatures(
        rsi=indicators.rsi(c, i, params.rsi_period),
        ultosc=indicators.ultimate_oscillator(h, l, c, i, params.ultosc_periods,
                                              params.ultosc_weights),
        close_pct_change=indicators.pct_change(c, i, params.pct_window),
        close_zscore=indicators.rolling_zscore(c, i, params.zscore_window, "close_zscore"),
        volume_zscore=indicators.rolling_zscore(v, i, params.zscore_window, "volume_zscore"),
        ma_ratio=indicators.ma_ratio(c, i, params.ma_fast, params.ma_slow),
    )


def build_dataset(series: CandleSeries, decisions: DecisionSeries, family="proposed",
                  estpc_mode=DEFAULT_ESTPC_MODE,
                  params: indicators.IndicatorParams = indicators.IndicatorParams()
                  ) -> FeatureTable:
    if family not in FAMILIES:
        raise ValueError(f"unknown feature family {family!r}")
    blocks = make_blocks(series, decisions)
    rows = []
    for blk in blocks:
        if family == "proposed":
            rows.append(proposed_features(blk, estpc_mode).as_array())
        else:
            rows.append(common_features(blk, series, params).as_array())
    X = np.vstack(rows)
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite feature value")
    return FeatureTable(
        market_id=series.market_id,
        family=family,
        block_index=np.array([b.block_index for b in blocks], dtype=np.int64),
        X=X,
        y=np.array([b.target_decision for b in blocks], dtype=np.int8),
        target_return=np.array([b.target_return for b in blocks], dtype=np.float64),
    )


# --------------------------------------------------------------------------
# feature CSV
# --------------------------------------------------------------------------

def write_features_csv(table: FeatureTable, path, meta=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        meta = dict(meta or {})
        meta.update(market=table.market_id, family=table.family)
        fh.write(format_header(meta))
        fh.write(",".join(table.names + ("target_decision", "target_return",
                                         "block_index")) + "\n")
        for i in range(len(table)):
            vals = ",".join(repr(float(x)) for x in table.X[i])
            fh.write(f"{vals},{CLASSES[table.y[i]].value},"
                     f"{float(table.target_return[i])!r},{int(table.block_index[i])}\n")


def read_features_csv(path):
    """Returns ``(FeatureTable, meta)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        meta = parse_header(first)
        if meta is None:
            raise ParseError("missing metadata line", 1)
        reader = csv.reader(fh)
        header = next(reader)
        family = meta["family"]
        expected = list(FAMILIES[family]) + ["target_decision", "target_return",
                                             "block_index"]
        if header != expected:
            raise ParseError("unexpected feature columns", 2)
        X, y, r, bi = [], [], [], []
        for lineno, row in enumerate(reader, 3):
            try:
                X.append([float(v) for v in row[:-3]])
                y.append(CODE[Decision(row[-3])])
                r.append(float(row[-2]))
                bi.append(int(row[-1]))
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), lineno) from None
    d = len(FAMILIES[family])
    table = FeatureTable(meta["market"], family, np.array(bi, dtype=np.int64),
                         np.array(X, dtype=np.float64).reshape(-1, d),
                         np.array(y, dtype=np.int8), np.array(r, dtype=np.float64))
    return table, meta
