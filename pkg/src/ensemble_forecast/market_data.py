"""OHLCV ingestion, repair and calendar alignment.

The cleaning pipeline runs in a fixed order: fill missing cells, treat close
outliers, drop weekend bars. Every step returns a new series together with a
:class:`CleaningReport`; nothing is mutated in place.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .errors import DataError, NumericFault

log = logging.getLogger(__name__)

PRICE_FIELDS = ("open", "high", "low", "close")
FIELDS = PRICE_FIELDS + ("volume",)
CSV_HEADER = ("Date", "Open", "High", "Low", "Close", "Volume")

FillMethod = Literal["linear", "forward_fill"]


@dataclass(frozen=True)
class OhlcvBar:
    date: date
    open: Optional[float]
    high: Optional[float]
    low: Optional[float]
    close: Optional[float]
    volume: Optional[float]

    def missing_fields(self) -> list[str]:
        return [f for f in FIELDS if getattr(self, f) is None]

    def violations(self) -> list[str]:
        """Return human-readable invariant violations (empty when the bar is valid)."""
        problems = [f"{f} missing" for f in self.missing_fields()]
        if problems:
            return problems
        o, h, l, c, v = self.open, self.high, self.low, self.close, self.volume
        for name, value in zip(FIELDS, (o, h, l, c, v)):
            if not math.isfinite(value):
                problems.append(f"{name} not finite")
        if problems:
            return problems
        if min(o, h, l, c) <= 0:
            problems.append("non-positive price")
        if v < 0:
            problems.append("negative volume")
        if not (l <= o <= h):
            problems.append("open outside [low, high]")
        if not (l <= c <= h):
            problems.append("close outside [low, high]")
        return problems


@dataclass(frozen=True)
class OhlcvSeries:
    bars: tuple[OhlcvBar, ...]
    symbol: str = ""

    def __len__(self) -> int:
        return len(self.bars)

    @property
    def dates(self) -> list[date]:
        return [b.date for b in self.bars]

    def column(self, name: str) -> np.ndarray:
        """Field values as float64; missing cells become NaN."""
        return np.array(
            [np.nan if getattr(b, name) is None else getattr(b, name) for b in self.bars],
            dtype=np.float64,
        )

    @property
    def opens(self) -> np.ndarray:
        return self.column("open")

    @property
    def highs(self) -> np.ndarray:
        return self.column("high")

    @property
    def lows(self) -> np.ndarray:
        return self.column("low")

    @property
    def closes(self) -> np.ndarray:
        return self.column("close")

    @property
    def volumes(self) -> np.ndarray:
        return self.column("volume")

    @classmethod
    def from_arrays(
        cls,
        dates: Sequence[date],
        open: Sequence[float],
        high: Sequence[float],
        low: Sequence[float],
        close: Sequence[float],
        volume: Sequence[float],
        symbol: str = "",
    ) -> "OhlcvSeries":
        def cell(x) -> Optional[float]:
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)

        bars = tuple(
            OhlcvBar(d, cell(o), cell(h), cell(l), cell(c), cell(v))
            for d, o, h, l, c, v in zip(dates, open, high, low, close, volume, strict=True)
        )
        return cls(bars, symbol)


@dataclass
class CleaningReport:
    missing_filled: int = 0
    outliers_treated: int = 0
    rows_dropped: int = 0
    method_notes: list[str] = field(default_factory=list)

    def merge(self, other: "CleaningReport") -> "CleaningReport":
        return CleaningReport(
            self.missing_filled + other.missing_filled,
            self.outliers_treated + other.outliers_treated,
            self.rows_dropped + other.rows_dropped,
            self.method_notes + other.method_notes,
        )

    @property
    def is_zero(self) -> bool:
        return self.missing_filled == 0 and self.outliers_treated == 0 and self.rows_dropped == 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# --------------------------------------------------------------------- parsing


def _parse_date(text: str) -> Optional[date]:
    text = text.strip()
    if not text:
        return None
    try:
        return date.fromisoformat(text[:10])
    except ValueError:
        try:
            return datetime.fromisoformat(text).date()
        except ValueError:
            return None


def _parse_number(text: Optional[str]) -> Optional[float]:
    if text is None:
        return None
    try:
        value = float(text.strip())
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def parse_ohlcv_csv(path: str | Path, symbol: Optional[str] = None) -> OhlcvSeries:
    """Read a Yahoo-style OHLCV CSV.

    Column names are matched case-insensitively and extra columns are ignored.
    Unparseable numeric cells become missing values; rows with an unparseable
    date cannot be placed on the time axis and are skipped. Later duplicates of
    a date are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: zero parseable rows") from None
        index = {name.strip().lower(): i for i, name in enumerate(header)}
        missing = [col for col in CSV_HEADER if col.lower() not in index]
        if missing:
            raise DataError(f"{path}: missing mandatory column(s): {', '.join(missing)}")
        cols = [index[c.lower()] for c in CSV_HEADER]

        by_date: dict[date, OhlcvBar] = {}
        skipped = 0
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = [row[i] if i < len(row) else None for i in cols]
            d = _parse_date(cells[0] or "")
            if d is None:
                skipped += 1
                continue
            if d in by_date:
                log.warning("%s: duplicate date %s dropped", path, d)
                continue
            by_date[d] = OhlcvBar(d, *(_parse_number(c) for c in cells[1:]))
    if not by_date:
        raise DataError(f"{path}: zero parseable rows")
    if skipped:
        log.warning("%s: %d row(s) with unparseable dates skipped", path, skipped)
    bars = tuple(by_date[d] for d in sorted(by_date))
    return OhlcvSeries(bars, symbol if symbol is not None else path.stem)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_ohlcv_csv(series: OhlcvSeries, path: str | Path) -> None:
    """Write ``series`` in the same schema :func:`parse_ohlcv_csv` reads (round-trip exact)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for b in series.bars:
            writer.writerow([b.date.isoformat()] + [_fmt(getattr(b, f)) for f in FIELDS])


# -------------------------------------------------------------------- cleaning


def _contain_prices(bar: OhlcvBar) -> OhlcvBar:
    """Widen high/low so they contain open and close."""
    high = max(bar.high, bar.open, bar.close)
    low = min(bar.low, bar.open, bar.close)
    if high == bar.high and low == bar.low:
        return bar
    return replace(bar, high=high, low=low)


def fill_missing(
    series: OhlcvSeries, method: FillMethod = "linear"
) -> tuple[OhlcvSeries, CleaningReport]:
    """Fill every missing cell.

    Prices are filled by linear interpolation over bar positions (flat beyond
    the ends) or by carrying the last value forward. Missing volume is always
    set to 0. Bars that received a filled price get high/low widened, if
    needed, to contain open and close.
    """
    if method not in ("linear", "forward_fill"):
        raise ValueError(f"unknown fill method {method!r}")
    if len(series) == 0:
        raise DataError("cannot fill an empty series")

    n = len(series)
    columns = {f: series.column(f) for f in FIELDS}
    filled_rows = np.zeros(n, dtype=bool)
    count = 0
    for name in PRICE_FIELDS:
        values = columns[name]
        gaps = np.isnan(values)
        if not gaps.any():
            continue
        if gaps.all():
            raise DataError(f"column {name!r} is entirely missing")
        if method == "forward_fill":
            if gaps[0]:
                raise DataError(f"leading missing {name} cannot be forward-filled")
            idx = np.where(gaps, 0, np.arange(n))
            np.maximum.accumulate(idx, out=idx)
            values = values[idx]
        else:
            pos = np.arange(n)
            values = values.copy()
            values[gaps] = np.interp(pos[gaps], pos[~gaps], values[~gaps])
        columns[name] = values
        filled_rows |= gaps
        count += int(gaps.sum())

    vol_gaps = np.isnan(columns["volume"])
    if vol_gaps.any():
        columns["volume"] = np.where(vol_gaps, 0.0, columns["volume"])
        count += int(vol_gaps.sum())

    if count == 0:
        return series, CleaningReport(method_notes=[f"fill_missing({method}): nothing to fill"])

    bars = []
    for i, bar in enumerate(series.bars):
        new = OhlcvBar(bar.date, *(float(columns[f][i]) for f in FIELDS))
        bars.append(_contain_prices(new) if filled_rows[i] else new)
    report = CleaningReport(
        missing_filled=count,
        method_notes=[f"fill_missing({method}): {count} cell(s) filled; missing volume set to 0"],
    )
    return OhlcvSeries(tuple(bars), series.symbol), report


def _rolling_median(values: np.ndarray, i: int, half_width: int = 2) -> float:
    lo, hi = max(0, i - half_width), min(len(values), i + half_width + 1)
    return float(np.median(values[lo:hi]))


def treat_outliers(
    series: OhlcvSeries, z_threshold: float = 3.0, max_passes: int = 50
) -> tuple[OhlcvSeries, CleaningReport]:
    """Replace outlying closes by the median of a centred 5-bar window.

    A close is flagged when ``|z| >= z_threshold`` with z taken against the
    mean and population standard deviation of all closes. Passes repeat until
    no flagged close changes, so the result is a fixed point and a second call
    reports zero treatments.
    """
    if z_threshold <= 0:
        raise ValueError("z_threshold must be positive")
    if len(series) < 3:
        raise DataError("outlier treatment needs at least 3 bars")
    closes = series.closes
    if np.isnan(closes).any():
        raise DataError("fill missing values before outlier treatment")

    treated: set[int] = set()
    for _ in range(max_passes):
        mu = closes.mean()
        sd = closes.std()
        if sd == 0:
            if np.any(closes != mu):
                raise NumericFault("zero standard deviation with non-constant closes")
            break
        z = np.abs(closes - mu) / sd
        changed = False
        new = closes.copy()
        for i in np.flatnonzero(z >= z_threshold):
            med = _rolling_median(closes, int(i))
            if med != closes[i]:
                new[i] = med
                treated.add(int(i))
                changed = True
        closes = new
        if not changed:
            break
    else:
        log.warning("outlier treatment did not reach a fixed point in %d passes", max_passes)

    if not treated:
        return series, CleaningReport(method_notes=[f"treat_outliers(z>={z_threshold}): none"])
    bars = list(series.bars)
    for i in sorted(treated):
        bars[i] = _contain_prices(replace(bars[i], close=float(closes[i])))
    report = CleaningReport(
        outliers_treated=len(treated),
        method_notes=[f"treat_outliers(z>={z_threshold}): {len(treated)} close(s) replaced by 5-bar median"],
    )
    return OhlcvSeries(tuple(bars), series.symbol), report


def align_calendar(series: OhlcvSeries) -> tuple[OhlcvSeries, CleaningReport]:
    """Drop bars dated on a Saturday or Sunday. Holiday gaps are left alone."""
    kept = tuple(b for b in series.bars if b.date.weekday() < 5)
    dropped = len(series) - len(kept)
    report = CleaningReport(
        rows_dropped=dropped, method_notes=[f"align_calendar: {dropped} weekend bar(s) removed"]
    )
    if dropped == 0:
        return series, report
    return OhlcvSeries(kept, series.symbol), report


def validate_series(series: OhlcvSeries) -> None:
    """Raise :class:`DataError` unless the series and all its bars satisfy their invariants."""
    if len(series) == 0:
        raise DataError("series is empty")
    problems = []
    for prev, bar in zip(series.bars, series.bars[1:]):
        if bar.date <= prev.date:
            problems.append(f"{bar.date}: dates not strictly increasing")
    for bar in series.bars:
        problems.extend(f"{bar.date}: {p}" for p in bar.violations())
    if problems:
        shown = "; ".join(problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise DataError(f"invalid OHLCV data: {shown}{more}")


def clean_series(
    series: OhlcvSeries,
    method: FillMethod = "linear",
    z_threshold: float = 3.0,
    max_passes: int = 10,
) -> tuple[OhlcvSeries, CleaningReport]:
    """fill -> outliers -> calendar, then validate every bar.

    Dropping weekend bars changes the close statistics, so the pass is repeated
    until it changes nothing; cleaning a cleaned series is then a no-op.
    """
    steps = (
        lambda s: fill_missing(s, method),
        lambda s: treat_outliers(s, z_threshold) if len(s) >= 3 else (s, CleaningReport()),
        align_calendar,
    )
    report = CleaningReport()
    for _ in range(max_passes):
        pass_report = CleaningReport()
        for step in steps:
            series, r = step(series)
            pass_report = pass_report.merge(r)
        report = report.merge(pass_report)
        if pass_report.is_zero:
            break
    validate_series(series)
    return series, report


def synthetic_sine_series(
    n: int = 1000,
    start: date = date(2020, 1, 1),
    level: float = 100.0,
    amplitude: float = 10.0,
    period: float = 50.0,
    symbol: str = "SINE",
) -> OhlcvSeries:
    """Noiseless weekday-dated series with ``close(t) = level + amplitude*sin(2*pi*t/period)``."""
    dates = []
    d = start
    while len(dates) < n:
        if d.weekday() < 5:
            dates.append(d)
        d += timedelta(days=1)
    t = np.arange(n)
    close = level + amplitude * np.sin(2 * np.pi * t / period)
    open_ = np.concatenate([[close[0]], close[:-1]])
    high = np.maximum(open_, close) * 1.005
    low = np.minimum(open_, close) * 0.995
    volume = np.full(n, 1e6)
    return OhlcvSeries.from_arrays(dates, open_, high, low, close, volume, symbol=symbol)


def bars_from_rows(rows: Iterable[tuple]) -> OhlcvSeries:
    """Build a series from ``(date, o, h, l, c, v)`` tuples; convenient in tests."""
    rows = list(rows)
    return OhlcvSeries(tuple(OhlcvBar(*r) for r in rows))
