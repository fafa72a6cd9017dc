"""Minute-candle ingestion (CSV and OKX REST) and log returns."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ._io import format_header, parse_header
from .errors import (
    GapError,
    InsufficientDataError,
    ParseError,
    RateLimitError,
    RegimecastError,
    ValidationError,
)

logger = logging.getLogger(__name__)

MINUTE_MS = 60_000
CSV_COLUMNS = ("timestamp", "open", "high", "low", "close", "volume")
OKX_BASE_URL_ENV = "REGIMECAST_OKX_BASE_URL"
OKX_DEFAULT_BASE_URL = "https://www.okx.com"
OKX_PAGE_LIMIT = 100


@dataclass(frozen=True)
class Candle:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass
class CandleSeries:
    """Time-ordered, gap-free minute candles for one market.

    Columns are stored as numpy arrays; construction validates every
    invariant so that any instance in circulation is well formed.
    ``filled`` marks rows synthesized by forward gap filling.
    """

    market_id: str
    timestamp: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    interval: int = MINUTE_MS
    filled: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        for name in ("open", "high", "low", "close", "volume"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.timestamp)
        if any(len(getattr(self, c)) != n for c in CSV_COLUMNS[1:]):
            raise ValidationError("candle columns have unequal lengths")
        if self.filled is None:
            self.filled = np.zeros(n, dtype=bool)
        else:
            self.filled = np.asarray(self.filled, dtype=bool)
        _validate(self)

    def __len__(self):
        return len(self.timestamp)

    def __getitem__(self, i) -> Candle:
        return Candle(int(self.timestamp[i]), float(self.open[i]), float(self.high[i]),
                      float(self.low[i]), float(self.close[i]), float(self.volume[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_candles(cls, market_id, candles, interval=MINUTE_MS, **kw):
        candles = list(candles)
        cols = {c: [getattr(k, c) for k in candles] for c in CSV_COLUMNS}
        return cls(market_id, interval=interval, **cols, **kw)

    def head(self, n) -> "CandleSeries":
        """The first ``n`` candles, as a new series."""
        return CandleSeries(
            self.market_id, self.timestamp[:n], self.open[:n], self.high[:n],
            self.low[:n], self.close[:n], self.volume[:n], self.interval,
            self.filled[:n], dict(self.meta),
        )

    def equals(self, other) -> bool:
        return (
            self.market_id == other.market_id
            and self.interval == other.interval
            and all(np.array_equal(getattr(self, c), getattr(other, c))
                    for c in CSV_COLUMNS + ("filled",))
        )


@dataclass
class ReturnSeries:
    """Per-minute log returns; ``returns[i] = ln(close[i+1] / close[i])``
    stamped with ``timestamps[i]``."""

    market_id: str
    returns: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.returns)


def _validate(s: CandleSeries):
    ts = s.timestamp
    if len(ts) == 0:
        return
    diffs = np.diff(ts)
    dup = np.flatnonzero(diffs == 0)
    if dup.size:
        raise ValidationError(f"duplicate timestamp {int(ts[dup[0]])}")
    if np.any(diffs < 0):
        raise ValidationError("timestamps are not increasing")
    for name in ("open", "high", "low", "close", "volume"):
        bad = np.flatnonzero(~np.isfinite(getattr(s, name)))
        if bad.size:
            raise ValidationError(f"non-finite {name} at timestamp {int(ts[bad[0]])}")
    bad = np.flatnonzero(s.close <= 0)
    if bad.size:
        raise ValidationError(f"non-positive close at timestamp {int(ts[bad[0]])}")
    bad = np.flatnonzero(s.volume < 0)
    if bad.size:
        raise ValidationError(f"negative volume at timestamp {int(ts[bad[0]])}")
    body_lo = np.minimum(s.open, s.close)
    body_hi = np.maximum(s.open, s.close)
    bad = np.flatnonzero((s.low > body_lo) | (s.high < body_hi))
    if bad.size:
        i = bad[0]
        raise ValidationError(
            f"OHLC inconsistency at timestamp {int(ts[i])}: "
            f"open={s.open[i]} high={s.high[i]} low={s.low[i]} close={s.close[i]}"
        )
    gaps = np.flatnonzero(diffs != s.interval)
    if gaps.size:
        raise GapError(_missing_between(ts, s.interval))


def _missing_between(ts, interval):
    missing = []
    for a, b in zip(ts[:-1], ts[1:]):
        if b - a != interval:
            missing.extend(range(int(a) + interval, int(b), interval))
    return missing


def fill_gaps_forward(rows, interval=MINUTE_MS):
    """Insert flat zero-volume candles at the previous close for every
    missing interval. ``rows`` are sorted ``(ts, o, h, l, c, v)`` tuples.
    Returns ``(rows, filled_flags)``."""
    out, flags = [], []
    for row in rows:
        if out:
            prev_ts, prev_close = out[-1][0], out[-1][4]
            t = prev_ts + interval
            while t < row[0]:
                out.append((t, prev_close, prev_close, prev_close, prev_close, 0.0))
                flags.append(True)
                t += interval
        out.append(tuple(row))
        flags.append(False)
    return out, flags


def _build(market_id, rows, fill_gaps=None, meta=None):
    rows = sorted(rows, key=lambda r: r[0])
    flags = None
    if fill_gaps == "forward":
        # a duplicate would be hidden by the filler's arithmetic; check first
        for a, b in zip(rows[:-1], rows[1:]):
            if a[0] == b[0]:
                raise ValidationError(f"duplicate timestamp {a[0]}")
        rows, flags = fill_gaps_forward(rows)
    elif fill_gaps not in (None, "none"):
        raise ValueError(f"unknown gap fill mode {fill_gaps!r}")
    cols = list(zip(*rows)) if rows else [[]] * 6
    meta = dict(meta or {})
    if flags is not None and any(flags):
        meta["gap_filled"] = int(sum(flags))
    return CandleSeries(market_id, *cols, filled=flags, meta=meta)


def parse_candles_csv(path, market_id, fill_gaps=None) -> CandleSeries:
    """Read a ``timestamp,open,high,low,close,volume`` CSV.

    Leading ``#`` lines are treated as metadata. Rows are sorted by
    timestamp before validation.
    """
    rows, meta = [], {}
    with open(path, encoding="utf-8", newline="") as fh:
        lineno = 0
        header = None
        for raw in fh:
            lineno += 1
            if header is None and raw.startswith("#"):
                meta.update(parse_header(raw) or {})
                continue
            if header is None:
                header = tuple(h.strip() for h in next(csv.reader([raw])))
                if header != CSV_COLUMNS:
                    raise ParseError(f"expected header {','.join(CSV_COLUMNS)}", lineno)
                continue
            if not raw.strip():
                continue
            fields = next(csv.reader([raw]))
            if len(fields) != 6:
                raise ParseError(f"expected 6 fields, got {len(fields)}", lineno)
            try:
                ts = int(fields[0])
                vals = [float(f) for f in fields[1:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", lineno) from None
            rows.append((ts, *vals))
    if header is None:
        raise ParseError("missing header row", 1)
    return _build(market_id, rows, fill_gaps, meta)


def write_candles_csv(series: CandleSeries, path, meta=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta is not None:
            fh.write(format_header(meta))
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for i in range(len(series)):
            fh.write(
                f"{int(series.timestamp[i])},{float(series.open[i])!r},"
                f"{float(series.high[i])!r},{float(series.low[i])!r},"
                f"{float(series.close[i])!r},{float(series.volume[i])!r}\n"
            )


def log_returns(series: CandleSeries) -> ReturnSeries:
    if len(series) < 2:
        raise InsufficientDataError("log returns need at least 2 candles")
    r = np.log(series.close[1:] / series.close[:-1])
    return ReturnSeries(series.market_id, r, series.timestamp[:-1].copy())


def write_returns_csv(returns: ReturnSeries, path, meta=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta is not None:
            fh.write(format_header(meta))
        fh.write("timestamp,return\n")
        for ts, r in zip(returns.timestamps, returns.returns):
            fh.write(f"{int(ts)},{float(r)!r}\n")


def read_returns_csv(path, market_id) -> ReturnSeries:
    """Read a ``timestamp,return`` CSV as written by :func:`write_returns_csv`."""
    ts, vals = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        header = None
        for lineno, raw in enumerate(fh, 1):
            if header is None and raw.startswith("#"):
                continue
            if header is None:
                header = raw.strip()
                if header != "timestamp,return":
                    raise ParseError("expected header timestamp,return", lineno)
                continue
            if not raw.strip():
                continue
            try:
                t, v = raw.strip().split(",")
                ts.append(int(t))
                vals.append(float(v))
            except ValueError as exc:
                raise ParseError(f"bad row ({exc})", lineno) from None
    if header is None:
        raise ParseError("missing header row", 1)
    r = np.array(vals, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValidationError("returns must be finite")
    return ReturnSeries(market_id, r, np.array(ts, dtype=np.int64))


# --------------------------------------------------------------------------
# OKX public REST client
# --------------------------------------------------------------------------

def okx_base_url():
    return os.environ.get(OKX_BASE_URL_ENV, OKX_DEFAULT_BASE_URL).rstrip("/")


def fetch_candles_okx(instrument, start, end, *, market_id=None, session=None,
                      base_url=None, max_attempts=5, backoff=0.5, sleep=time.sleep):
    """Download 1-minute candles covering ``[start, end)`` (epoch ms).

    Pages backwards from ``end`` through the public history endpoint,
    ``OKX_PAGE_LIMIT`` rows at a time. A 429 response is retried with
    exponential backoff, at most ``max_attempts`` times per page, before
    :class:`RateLimitError` is raised. Missing minutes raise
    :class:`GapError`.
    """
    if not start < end:
        raise ValueError("start must precede end")
    if session is None:
        import requests
        session = requests.Session()
    url = (base_url or okx_base_url()) + "/api/v5/market/history-candles"

    rows = {}
    cursor = end
    while True:
        params = {"instId": instrument, "bar": "1m", "after": str(cursor),
                  "limit": str(OKX_PAGE_LIMIT)}
        page = _get_page(session, url, params, max_attempts, backoff, sleep)
        if not page:
            break
        page_ts = []
        for item in page:
            ts = int(item[0])
            page_ts.append(ts)
            if start <= ts < end:
                rows[ts] = (ts, *(float(x) for x in item[1:6]))
        oldest = min(page_ts)
        if oldest <= start or oldest >= cursor:
            break
        cursor = oldest
    return _build(market_id or instrument, list(rows.values()),
                  meta={"source": "okx", "instrument": instrument})


def _get_page(session, url, params, max_attempts, backoff, sleep):
    for attempt in range(max_attempts):
        resp = session.get(url, params=params, timeout=30)
        if resp.status_code == 429:
            if attempt + 1 < max_attempts:
                delay = backoff * 2 ** attempt
                logger.warning("rate limited by %s, retrying in %.2fs", url, delay)
                sleep(delay)
            continue
        resp.raise_for_status()
        body = resp.json()
        if str(body.get("code", "0")) != "0":
            raise RegimecastError(f"OKX error {body.get('code')}: {body.get('msg')}")
        return body.get("data", [])
    raise RateLimitError(f"still rate limited after {max_attempts} attempts")
