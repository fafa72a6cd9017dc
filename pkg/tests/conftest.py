import numpy as np
import pytest

from regimecast.market_data import CandleSeries

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []

T0 = 1_700_000_000_000
MINUTE = 60_000


def series_from_closes(closes, market_id="TEST", volumes=None, t0=T0, spread=0.0):
    """Candle series whose bodies are flat at ``closes``; ``spread`` widens
    high/low symmetrically."""
    c = np.asarray(closes, dtype=np.float64)
    v = np.ones_like(c) if volumes is None else np.asarray(volumes, dtype=np.float64)
    ts = t0 + MINUTE * np.arange(len(c), dtype=np.int64)
    return CandleSeries(market_id, ts, c, c + spread, c - spread, c, v)


def random_walk(n, seed=0, start=100.0, vol=1e-3):
    rng = np.random.default_rng(seed)
    return start * np.exp(np.cumsum(rng.normal(0.0, vol, n)))


@pytest.fixture
def walk_series():
    return series_from_closes(random_walk(600, seed=3), volumes=np.arange(1, 601))


def knn_oracle(X, y, q, k):
    """Exhaustive search: sort by (distance, index), vote, break vote ties
    by the nearest member among the tied classes."""
    dist = []
    for i, row in enumerate(X):
        s = 0.0
        for a, b in zip(row, q):
            s += (a - b) * (a - b)
        dist.append((s, i))
    nearest = [i for _, i in sorted(dist)[:k]]
    counts = {}
    for i in nearest:
        counts[int(y[i])] = counts.get(int(y[i]), 0) + 1
    top = max(counts.values())
    return next(int(y[i]) for i in nearest if counts[int(y[i])] == top)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
