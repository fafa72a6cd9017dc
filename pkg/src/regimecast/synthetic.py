"""Deterministic synthetic minute markets.

The bundled dataset (three markets, three days) is produced by
:func:`bundled_markets` and shipped under ``regimecast/data``; it exists
so the full pipeline can be exercised without exchange data.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .market_data import MINUTE_MS, CandleSeries, parse_candles_csv, write_candles_csv


@dataclass(frozen=True)
class MarketParams:
    start_price: float
    tick: float
    base_vol: float          # per-minute log-return sd in the calm regime
    base_volume: float


# regime: (volatility multiplier, drift per minute in units of base_vol, volume multiplier)
REGIMES = ((1.0, 0.0, 1.0), (2.5, 0.0, 2.0), (1.5, 0.15, 1.4), (1.5, -0.15, 1.4))
_STAY = 0.85

BUNDLED = {
    "BTC": MarketParams(30_000.0, 0.1, 8e-4, 12.0),
    "PEPE": MarketParams(1.2e-6, 1e-10, 2e-3, 4e9),
    "NDQ": MarketParams(15_000.0, 0.25, 4e-4, 300.0),
}
BUNDLED_SEEDS = {"BTC": 11, "PEPE": 22, "NDQ": 33}
BUNDLED_DAYS = 3
BUNDLED_START_MS = 1_700_006_400_000   # 2023-11-15 00:00 UTC


def _round_tick(x, tick):
    decimals = -np.log10(tick)
    if decimals == round(decimals):
        return np.round(x, int(round(decimals)))
    return np.round(x / tick) * tick


def generate_market(market_id, params: MarketParams, n_minutes, seed,
                    start_ms=BUNDLED_START_MS) -> CandleSeries:
    """Random walk in log price whose volatility, drift and volume switch
    between hourly regimes following a sticky Markov chain."""
    rng = np.random.default_rng(seed)
    n_hours = -(-n_minutes // 60)
    regime = np.empty(n_hours, dtype=np.int64)
    regime[0] = 0
    for h in range(1, n_hours):
        regime[h] = regime[h - 1] if rng.random() < _STAY else rng.integers(len(REGIMES))
    per_min = np.repeat(regime, 60)[:n_minutes]
    table = np.array(REGIMES)
    vol = params.base_vol * table[per_min, 0]
    drift = params.base_vol * table[per_min, 1]
    r = drift + vol * rng.standard_normal(n_minutes)
    close = params.start_price * np.exp(np.cumsum(r))
    open_ = np.concatenate([[params.start_price], close[:-1]])
    wick = vol * np.abs(rng.standard_normal((2, n_minutes))) * 0.5
    high = np.maximum(open_, close) * np.exp(wick[0])
    low = np.minimum(open_, close) * np.exp(-wick[1])
    open_, close, high, low = (_round_tick(a, params.tick) for a in (open_, close, high, low))
    close = np.maximum(close, params.tick)
    open_ = np.maximum(open_, params.tick)
    high = np.maximum(high, np.maximum(open_, close))
    low = np.minimum(np.maximum(low, params.tick), np.minimum(open_, close))
    volume = np.round(params.base_volume * table[per_min, 2]
                      * rng.lognormal(0.0, 0.5, n_minutes), 4)
    ts = start_ms + MINUTE_MS * np.arange(n_minutes, dtype=np.int64)
    return CandleSeries(market_id, ts, open_, high, low, close, volume)


def bundled_markets(days=BUNDLED_DAYS):
    return {m: generate_market(m, p, days * 1440, BUNDLED_SEEDS[m])
            for m, p in BUNDLED.items()}


def bundled_path(market_id) -> Path:
    return Path(str(resources.files("regimecast") / "data" / f"synthetic_{market_id}.csv"))


def load_bundled(market_id) -> CandleSeries:
    return parse_candles_csv(bundled_path(market_id), market_id)


def write_bundled(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, s in bundled_markets().items():
        write_candles_csv(s, directory / f"synthetic_{m}.csv")


if __name__ == "__main__":
    write_bundled(Path(__file__).parent / "data")
