"""Technical indicators and the aligned feature matrix.

Every indicator returns an :class:`IndicatorColumn` of the same length as its
input. Warm-up positions hold NaN (exported as an empty CSV cell / JSON null),
never a placeholder number.

Conventions where the textbook formulas leave a hole:

* EMAs are seeded with the first observation, so they have no warm-up.
* RSI smooths gains/losses with that same EMA (not Wilder smoothing).
  Both averages zero gives 50; zero average loss alone gives 100.
* A flat stochastic window gives %K = 50; a zero CCI mean deviation gives 0.
* Rolling volatility uses the population divisor n.
* OBV starts at 0 and is unchanged on equal closes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .market_data import OhlcvSeries


@dataclass(frozen=True, eq=False)
class IndicatorColumn:
    name: str
    values: np.ndarray
    warmup_len: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        head, tail = values[: self.warmup_len], values[self.warmup_len :]
        if not np.isnan(head).all() or not np.isfinite(tail).all():
            raise ValueError(f"{self.name}: warm-up mask inconsistent with values")

    def __len__(self) -> int:
        return len(self.values)

    def as_optional(self) -> list[Optional[float]]:
        return [None if i < self.warmup_len else float(v) for i, v in enumerate(self.values)]


def _column(name: str, values: np.ndarray, warmup: int) -> IndicatorColumn:
    values = np.asarray(values, dtype=np.float64).copy()
    values[:warmup] = np.nan
    return IndicatorColumn(name, values, warmup)


def _padded(name: str, tail: np.ndarray, n: int) -> IndicatorColumn:
    warmup = n - len(tail)
    return _column(name, np.concatenate([np.full(warmup, np.nan), tail]), warmup)


def _as_array(values) -> np.ndarray:
    if isinstance(values, IndicatorColumn):
        return values.values
    return np.asarray(values, dtype=np.float64)


def _ema_pair(x: np.ndarray, period: int) -> tuple[np.ndarray, np.ndarray]:
    """EMA carried as an unevaluated sum hi + lo (compensated accumulation).

    Keeping the low part lets a difference of two EMAs of price-sized inputs
    (the MACD line) cancel before rounding instead of after.
    """
    hi_out = np.array(x, dtype=np.float64)
    lo_out = np.zeros(len(x))
    if period == 1 or len(x) == 0:
        return hi_out, lo_out
    alpha = 2.0 / (period + 1)
    hi, lo = float(x[0]), 0.0
    # hi + alpha*(x - hi) keeps constant inputs exactly constant
    for t in range(1, len(x)):
        step = alpha * ((x[t] - hi) - lo)
        s = hi + step
        b = s - hi
        err = (hi - (s - b)) + (step - b)
        lo += err
        hi = s + lo
        lo -= hi - s
        hi_out[t], lo_out[t] = hi, lo
    return hi_out, lo_out


def _ema_raw(x: np.ndarray, period: int) -> np.ndarray:
    hi, lo = _ema_pair(x, period)
    return hi + lo


# ---------------------------------------------------------------- price based


def log_returns(closes: Sequence[float]) -> IndicatorColumn:
    p = _as_array(closes)
    if len(p) < 2:
        raise DataError("log returns need at least 2 closes")
    if np.any(p <= 0):
        raise DataError("log returns need strictly positive prices")
    return _padded("logret", np.log(p[1:] / p[:-1]), len(p))


def price_range(bars: OhlcvSeries) -> IndicatorColumn:
    h, l, c = bars.highs, bars.lows, bars.closes
    if np.any(c <= 0):
        raise DataError("price range needs strictly positive closes")
    return IndicatorColumn("range", (h - l) / c, 0)


def sma(values, period: int, name: Optional[str] = None) -> IndicatorColumn:
    """Trailing simple moving average; the first ``period - 1`` entries are warm-up."""
    x = _as_array(values)
    if period < 1:
        raise ValueError("period must be >= 1")
    if len(x) < period:
        raise DataError(f"sma period {period} exceeds series length {len(x)}")
    means = sliding_window_view(x, period).mean(axis=1)
    return _padded(name or f"sma_{period}", means, len(x))


def ema(values, period: int, name: Optional[str] = None) -> IndicatorColumn:
    x = _as_array(values)
    if period < 1:
        raise ValueError("period must be >= 1")
    if len(x) == 0:
        raise DataError("ema of an empty series")
    return IndicatorColumn(name or f"ema_{period}", _ema_raw(x, period), 0)


def roc(closes, period: int = 10) -> IndicatorColumn:
    p = _as_array(closes)
    if len(p) <= period:
        raise DataError(f"roc period {period} needs more than {period} closes")
    if np.any(p <= 0):
        raise DataError("roc needs strictly positive prices")
    return _padded(f"roc_{period}", 100.0 * (p[period:] - p[:-period]) / p[:-period], len(p))


# ------------------------------------------------------------------- momentum


def rsi(closes, period: int = 14) -> IndicatorColumn:
    p = _as_array(closes)
    if len(p) <= period:
        raise DataError(f"rsi period {period} needs more than {period} closes")
    delta = np.diff(p)
    up = _ema_raw(np.maximum(delta, 0.0), period)
    down = _ema_raw(np.maximum(-delta, 0.0), period)
    out = np.empty_like(up)
    both_zero = (up == 0) & (down == 0)
    no_loss = (down == 0) & ~both_zero
    regular = down > 0
    out[both_zero] = 50.0
    out[no_loss] = 100.0
    rs = up[regular] / down[regular]
    out[regular] = 100.0 - 100.0 / (1.0 + rs)
    return _padded(f"rsi_{period}", out, len(p))


def macd(
    closes, fast: int = 12, slow: int = 26, signal: int = 9
) -> tuple[IndicatorColumn, IndicatorColumn, IndicatorColumn]:
    """MACD line, signal line and histogram (line minus signal)."""
    p = _as_array(closes)
    if len(p) == 0:
        raise DataError("macd of an empty series")
    fh, fl = _ema_pair(p, fast)
    sh, sl = _ema_pair(p, slow)
    line = (fh - sh) + (fl - sl)
    sig = _ema_raw(line, signal)
    return (
        IndicatorColumn("macd", line, 0),
        IndicatorColumn("macd_signal", sig, 0),
        IndicatorColumn("macd_hist", line - sig, 0),
    )


def stochastic(bars: OhlcvSeries, k_period: int = 14, d_period: int = 3):
    """%K over a trailing ``k_period`` window and %D = SMA(%K, ``d_period``)."""
    n = len(bars)
    if n < k_period:
        raise DataError(f"stochastic needs at least {k_period} bars")
    hh = sliding_window_view(bars.highs, k_period).max(axis=1)
    ll = sliding_window_view(bars.lows, k_period).min(axis=1)
    c = bars.closes[k_period - 1 :]
    span = hh - ll
    flat = span == 0
    k = np.full(len(c), 50.0)
    k[~flat] = 100.0 * (c[~flat] - ll[~flat]) / span[~flat]
    k_col = _padded("stoch_k", k, n)
    d = sliding_window_view(k, d_period).mean(axis=1) if len(k) >= d_period else np.empty(0)
    return k_col, _padded("stoch_d", d, n)


# ----------------------------------------------------------------- volatility


def true_range(bars: OhlcvSeries) -> np.ndarray:
    """True range for bars 1..n-1 (bar 0 has no previous close)."""
    h, l, c = bars.highs[1:], bars.lows[1:], bars.closes[:-1]
    return np.maximum.reduce([np.abs(h - l), np.abs(h - c), np.abs(l - c)])


def atr(bars: OhlcvSeries, period: int = 14) -> IndicatorColumn:
    if len(bars) < 2:
        raise DataError("atr needs at least 2 bars")
    return _padded(f"atr_{period}", _ema_raw(true_range(bars), period), len(bars))


def _population_std(windows: np.ndarray) -> np.ndarray:
    mu = windows.mean(axis=1, keepdims=True)
    return np.sqrt(((windows - mu) ** 2).mean(axis=1))


def rolling_volatility(returns: IndicatorColumn, window: int = 20) -> IndicatorColumn:
    """Population standard deviation of the trailing ``window`` returns."""
    if window < 2:
        raise ValueError("volatility window must be >= 2")
    r = returns.values[returns.warmup_len :]
    if len(r) < window:
        raise DataError(f"volatility window {window} exceeds {len(r)} available returns")
    return _padded(f"vol_{window}", _population_std(sliding_window_view(r, window)), len(returns))


def bollinger(closes, period: int = 20, width: float = 2.0):
    """Middle (SMA), upper and lower bands at ``width`` population sigmas."""
    p = _as_array(closes)
    if width <= 0:
        raise ValueError("band width must be positive")
    if len(p) < period:
        raise DataError(f"bollinger needs at least {period} closes")
    windows = sliding_window_view(p, period)
    mid = windows.mean(axis=1)
    sd = _population_std(windows)
    n = len(p)
    return (
        _padded("bb_mid", mid, n),
        _padded("bb_up", mid + width * sd, n),
        _padded("bb_low", mid - width * sd, n),
    )


# --------------------------------------------------------------------- volume


def force_index(bars: OhlcvSeries) -> IndicatorColumn:
    if len(bars) < 2:
        raise DataError("force index needs at least 2 bars")
    c, v = bars.closes, bars.volumes
    return _padded("force", (c[1:] - c[:-1]) * v[1:], len(bars))


def obv(bars: OhlcvSeries) -> IndicatorColumn:
    if len(bars) < 1:
        raise DataError("obv needs at least 1 bar")
    c, v = bars.closes, bars.volumes
    step = np.sign(np.diff(c)) * v[1:]
    return IndicatorColumn("obv", np.concatenate([[0.0], np.cumsum(step)]), 0)


def cci(bars: OhlcvSeries, period: int = 20, scale: float = 0.015) -> IndicatorColumn:
    if len(bars) < period:
        raise DataError(f"cci needs at least {period} bars")
    tp = (bars.highs + bars.lows + bars.closes) / 3.0
    windows = sliding_window_view(tp, period)
    mean = windows.mean(axis=1)
    md = np.abs(windows - mean[:, None]).mean(axis=1)
    dev = tp[period - 1 :] - mean
    out = np.zeros(len(md))
    nz = md != 0
    out[nz] = dev[nz] / (scale * md[nz])
    return _padded(f"cci_{period}", out, len(bars))


# ------------------------------------------------------------- feature matrix

EXTRA_INDICATORS = ("logret", "range", "force", "obv")


@dataclass(frozen=True)
class IndicatorConfig:
    """Indicator parameters. ``None`` (or an empty list) disables that indicator."""

    sma_periods: tuple[int, ...] = (5, 10, 20, 50)
    ema_periods: tuple[int, ...] = (5, 10, 20, 50)
    roc_period: Optional[int] = 10
    rsi_period: Optional[int] = 14
    macd: Optional[tuple[int, int, int]] = (12, 26, 9)
    stoch: Optional[tuple[int, int]] = (14, 3)
    atr_period: Optional[int] = 14
    vol_window: Optional[int] = 20
    bollinger: Optional[tuple[int, float]] = (20, 2.0)
    cci: Optional[tuple[int, float]] = (20, 0.015)
    extras: tuple[str, ...] = EXTRA_INDICATORS

    def __post_init__(self):
        ints = list(self.sma_periods) + list(self.ema_periods)
        ints += [p for p in (self.roc_period, self.rsi_period, self.atr_period) if p is not None]
        ints += list(self.macd or ()) + list(self.stoch or ())
        for pair in (self.bollinger, self.cci):
            if pair is not None:
                ints.append(pair[0])
        if any(int(p) != p or p < 1 for p in ints):
            raise ValueError("all indicator periods must be integers >= 1")
        if self.vol_window is not None and self.vol_window < 2:
            raise ValueError("vol_window must be >= 2")
        if self.bollinger is not None and self.bollinger[1] <= 0:
            raise ValueError("bollinger multiplier must be positive")
        unknown = set(self.extras) - set(EXTRA_INDICATORS)
        if unknown:
            raise ValueError(f"unknown extra indicators: {sorted(unknown)}")

    @classmethod
    def close_only(cls) -> "IndicatorConfig":
        return cls((), (), None, None, None, None, None, None, None, None, ())

    @classmethod
    def from_dict(cls, data: dict) -> "IndicatorConfig":
        kwargs = {}
        for key, value in data.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown indicator option {key!r}")
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    columns: tuple[IndicatorColumn, ...]
    dates: tuple[date, ...]
    effective_start: int = field(init=False)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")
        if any(len(c) != len(self.dates) for c in self.columns):
            raise ValueError("columns and dates must share one length")
        start = max((c.warmup_len for c in self.columns), default=0)
        object.__setattr__(self, "effective_start", start)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __getitem__(self, name: str) -> IndicatorColumn:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_array(self) -> np.ndarray:
        """``(rows, features)`` float64 array; warm-up cells are NaN."""
        return np.column_stack([c.values for c in self.columns])

    # ------------------------------------------------------------ persistence

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date"] + self.names)
            for i, d in enumerate(self.dates):
                row = [d.isoformat()]
                for c in self.columns:
                    row.append("" if i < c.warmup_len else repr(float(c.values[i])))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureMatrix":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"features file not found: {path}")
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty features file") from None
            if not header or header[0] != "date":
                raise DataError(f"{path}: first column must be 'date'")
            rows = [r for r in reader if r]
        if not rows:
            raise DataError(f"{path}: no rows")
        dates = tuple(date.fromisoformat(r[0]) for r in rows)
        columns = []
        for j, name in enumerate(header[1:], start=1):
            cells = [r[j] for r in rows]
            values = np.array([float(x) if x else np.nan for x in cells])
            warmup = next((i for i, x in enumerate(cells) if x), len(cells))
            try:
                columns.append(IndicatorColumn(name, values, warmup))
            except ValueError as exc:
                raise DataError(f"{path}: {exc}") from None
        return cls(tuple(columns), dates)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dates": [d.isoformat() for d in self.dates],
                "columns": {c.name: c.as_optional() for c in self.columns},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FeatureMatrix":
        data = json.loads(text)
        dates = tuple(date.fromisoformat(d) for d in data["dates"])
        columns = []
        for name, cells in data["columns"].items():
            values = np.array([np.nan if x is None else x for x in cells], dtype=np.float64)
            warmup = next((i for i, x in enumerate(cells) if x is not None), len(cells))
            columns.append(IndicatorColumn(name, values, warmup))
        return cls(tuple(columns), dates)


def required_length(config: IndicatorConfig) -> int:
    """Minimum number of bars ``build_feature_matrix`` accepts for ``config``."""
    needs = [1]
    needs += list(config.sma_periods)
    if config.roc_period is not None:
        needs.append(config.roc_period + 1)
    if config.rsi_period is not None:
        needs.append(config.rsi_period + 1)
    if config.stoch is not None:
        needs.append(config.stoch[0] + config.stoch[1] - 1)
    if config.atr_period is not None or {"logret", "force"} & set(config.extras):
        needs.append(2)
    if config.vol_window is not None:
        needs.append(config.vol_window + 1)
    if config.bollinger is not None:
        needs.append(config.bollinger[0])
    if config.cci is not None:
        needs.append(config.cci[0])
    return max(needs)


def build_feature_matrix(
    series: OhlcvSeries, config: IndicatorConfig = IndicatorConfig()
) -> FeatureMatrix:
    """Compute every configured indicator plus the raw close.

    Column order: close, logret, range, sma_*, ema_*, roc, rsi, macd,
    macd_signal, macd_hist, stoch_k, stoch_d, atr, vol, bb_mid, bb_up, bb_low,
    force, obv, cci. Disabled indicators are skipped; the order of the rest
    does not change.
    """
    need = required_length(config)
    if len(series) < need:
        raise DataError(f"series has {len(series)} bars; configured indicators need {need}")
    closes = series.closes
    if np.isnan(closes).any():
        raise DataError("series has missing closes; clean it first")
    cols: list[IndicatorColumn] = [IndicatorColumn("close", closes, 0)]
    returns = log_returns(closes) if len(closes) >= 2 else None
    if "logret" in config.extras:
        cols.append(returns)
    if "range" in config.extras:
        cols.append(price_range(series))
    cols += [sma(closes, p) for p in config.sma_periods]
    cols += [ema(closes, p) for p in config.ema_periods]
    if config.roc_period is not None:
        cols.append(roc(closes, config.roc_period))
    if config.rsi_period is not None:
        cols.append(rsi(closes, config.rsi_period))
    if config.macd is not None:
        cols += macd(closes, *config.macd)
    if config.stoch is not None:
        cols += stochastic(series, *config.stoch)
    if config.atr_period is not None:
        cols.append(atr(series, config.atr_period))
    if config.vol_window is not None:
        cols.append(rolling_volatility(returns, config.vol_window))
    if config.bollinger is not None:
        cols += bollinger(closes, *config.bollinger)
    if "force" in config.extras:
        cols.append(force_index(series))
    if "obv" in config.extras:
        cols.append(obv(series))
    if config.cci is not None:
        cols.append(cci(series, *config.cci))
    return FeatureMatrix(tuple(cols), tuple(series.dates))
