import numpy as np
import pytest
from datetime import date, timedelta

from ensemble_forecast.market_data import OhlcvSeries


def weekdays(n, start=date(2021, 1, 4)):
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def random_series(rng, n=200, symbol="RND"):
    """Random-walk OHLCV bars that satisfy every bar invariant."""
    close = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.02, n)))
    open_ = close * np.exp(rng.normal(0, 0.01, n))
    high = np.maximum(open_, close) * (1 + rng.uniform(0, 0.02, n))
    low = np.minimum(open_, close) * (1 - rng.uniform(0, 0.02, n))
    volume = rng.integers(1_000, 100_000, n).astype(float)
    return OhlcvSeries.from_arrays(weekdays(n), open_, high, low, close, volume, symbol=symbol)


def series_from_closes(closes, volumes=None):
    closes = np.asarray(closes, dtype=float)
    volumes = np.full(len(closes), 100.0) if volumes is None else np.asarray(volumes, float)
    return OhlcvSeries.from_arrays(weekdays(len(closes)), closes, closes, closes, closes, volumes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
