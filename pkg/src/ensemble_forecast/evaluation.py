"""Forecast metrics, classical baselines, and the test-range evaluation of a trained bundle."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import DataError, NumericFault, SchemaError

if TYPE_CHECKING:
    from .indicators import FeatureMatrix
    from .trainer import DatasetSplit, ModelBundle


@dataclass(frozen=True)
class PredictionSeries:
    actual: np.ndarray
    predicted: np.ndarray
    dates: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.actual, dtype=np.float64)
        p = np.asarray(self.predicted, dtype=np.float64)
        object.__setattr__(self, "actual", a)
        object.__setattr__(self, "predicted", p)
        if a.shape != p.shape or a.ndim != 1:
            raise ValueError(f"actual {a.shape} and predicted {p.shape} must be equal-length 1-D")
        if self.dates and len(self.dates) != len(a):
            raise ValueError("dates length differs from the series")
        if not (np.isfinite(a).all() and np.isfinite(p).all()):
            raise NumericFault("prediction series contains non-finite values")

    def __len__(self) -> int:
        return len(self.actual)


def directional_accuracy(s: PredictionSeries) -> float:
    """Share of steps where sign(pred_t - y_{t-1}) equals sign(y_t - y_{t-1})."""
    if len(s) < 2:
        raise DataError("directional accuracy needs at least 2 points")
    prev = s.actual[:-1]
    hits = np.sign(s.predicted[1:] - prev) == np.sign(s.actual[1:] - prev)
    return float(hits.mean())


def rmse(s: PredictionSeries) -> float:
    if len(s) < 1:
        raise DataError("rmse needs at least 1 point")
    r = s.actual - s.predicted
    return math.sqrt(math.fsum(r * r) / len(r))


def r2(s: PredictionSeries) -> float:
    if len(s) < 2:
        raise DataError("r2 needs at least 2 points")
    mean = math.fsum(s.actual) / len(s)
    ss_tot = math.fsum((s.actual - mean) ** 2)
    if ss_tot == 0.0:
        raise DataError("r2 is undefined when all actual values are equal")
    return 1.0 - math.fsum((s.actual - s.predicted) ** 2) / ss_tot


def mape(s: PredictionSeries) -> float:
    """Mean absolute percentage error, in percent."""
    if len(s) < 1:
        raise DataError("mape needs at least 1 point")
    if np.any(s.actual == 0):
        raise DataError("mape is undefined when an actual value is zero")
    # scale before dividing: one rounding fewer, so decimal inputs stay exact more often
    return math.fsum(np.abs(100.0 * (s.actual - s.predicted) / s.actual)) / len(s)


@dataclass(frozen=True)
class EvalReport:
    directional_accuracy: float
    rmse: float
    r2: float
    mape: float
    n: int
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_series(s: PredictionSeries, label: str = "") -> EvalReport:
    return EvalReport(directional_accuracy(s), rmse(s), r2(s), mape(s), len(s), label)


# ------------------------------------------------------------------ baselines
#
# Every baseline predicts closes[t] from closes[:t] for each requested target
# index t, so it can be scored on exactly the rows the models are scored on.


def _targets(closes: np.ndarray, indices: Sequence[int], need: int, name: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < need or idx.max() >= len(closes)):
        raise DataError(f"{name} baseline needs {need} bars of history before every target")
    return idx


def baseline_last_value(closes: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    closes = np.asarray(closes, float)
    idx = _targets(closes, indices, 1, "last-value")
    return closes[idx - 1]


def baseline_sma(closes: np.ndarray, period: int, indices: Sequence[int]) -> np.ndarray:
    if period < 1:
        raise ValueError("period must be >= 1")
    closes = np.asarray(closes, float)
    idx = _targets(closes, indices, period, f"SMA({period})")
    if period == 1:
        return closes[idx - 1]
    return np.array([math.fsum(closes[t - period : t]) / period for t in idx])


def baseline_ema(closes: np.ndarray, period: int, indices: Sequence[int]) -> np.ndarray:
    """EMA seeded with the first close, read at t-1."""
    if period < 1:
        raise ValueError("period must be >= 1")
    closes = np.asarray(closes, float)
    idx = _targets(closes, indices, 1, f"EMA({period})")
    alpha = 2.0 / (period + 1)
    ema = np.empty(len(closes))
    acc = closes[0]
    for t, x in enumerate(closes):
        acc = acc + alpha * (x - acc) if t else x
        ema[t] = acc
    return ema[idx - 1]


@dataclass(frozen=True)
class ArFit:
    p: int
    d: int
    coefficients: np.ndarray
    rank: int


def _difference(x: np.ndarray, d: int) -> np.ndarray:
    for _ in range(d):
        x = np.diff(x)
    return x


def fit_ar(closes: np.ndarray, p: int, d: int, train_end: int, train_start: int = 0) -> ArFit:
    """Least-squares AR(p) without intercept on the d-times differenced series.

    Only differences computable from ``closes[train_start:train_end]`` enter the fit.
    """
    if p < 0 or d < 0:
        raise ValueError("p and d must be non-negative")
    z = _difference(np.asarray(closes[train_start:train_end], float), d)
    if p == 0:
        return ArFit(0, d, np.zeros(0), 0)
    if len(z) < 10 * p:
        raise DataError(f"ARI({p},{d}) needs at least {10 * p} differenced training points, got {len(z)}")
    X = np.column_stack([z[p - k - 1 : len(z) - k - 1] for k in range(p)])  # lag 1..p
    y = z[p:]
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank == 0 and np.any(y != 0):
        raise NumericFault(f"ARI({p},{d}) normal equations are singular")
    return ArFit(p, d, coef, int(rank))


def baseline_ar(
    closes: np.ndarray, p: int, d: int, indices: Sequence[int], train_end: int, train_start: int = 0
) -> tuple[np.ndarray, ArFit]:
    """One-step ARI(p, d) forecasts at each target index, coefficients frozen after fitting."""
    closes = np.asarray(closes, float)
    fit = fit_ar(closes, p, d, train_end, train_start)
    idx = _targets(closes, indices, p + d, f"ARI({p},{d})")
    z = _difference(closes, d)  # z[j] belongs to time j + d
    binom = [math.comb(d, k) * (-1) ** k for k in range(d + 1)]
    out = np.empty(len(idx))
    for n, t in enumerate(idx):
        lags = z[t - d - p : t - d][::-1] if p else np.zeros(0)
        dz_hat = float(fit.coefficients @ lags) if p else 0.0
        out[n] = dz_hat - sum(binom[k] * closes[t - k] for k in range(1, d + 1))
    return out, fit


# ------------------------------------------------------------------ bundle evaluation

EVALUANDS = ("ensemble", "vae", "transformer", "lstm", "sma", "ema", "last_value", "ari")


@dataclass(frozen=True)
class BaselineConfig:
    sma_period: int = 20
    ema_period: int = 20
    ar_p: int = 5
    ar_d: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown baseline settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EvaluationResult:
    reports: dict[str, EvalReport]
    dates: list[date]
    actual: np.ndarray
    predictions: dict[str, np.ndarray]
    weights: dict[str, float]
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def report_json(self) -> str:
        doc = {
            "evaluands": {k: self.reports[k].to_dict() for k in self.reports},
            "ensemble_weights": self.weights,
            "baselines": asdict(self.baselines),
            "test_targets": {"n": len(self.dates), "first": self.dates[0].isoformat(), "last": self.dates[-1].isoformat()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.report_json())
        cols = list(self.predictions)
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "actual", *cols])
            for i, d in enumerate(self.dates):
                w.writerow([d.isoformat(), repr(float(self.actual[i]))] + [repr(float(self.predictions[c][i])) for c in cols])
        with open(out / "scatter.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["actual", "predicted"])
            for a, p in zip(self.actual, self.predictions["ensemble"]):
                w.writerow([repr(float(a)), repr(float(p))])


def read_predictions_csv(path: str | Path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header) if i > 0}
    return cols.pop("actual"), cols


def evaluate_bundle(
    bundle: "ModelBundle",
    matrix: "FeatureMatrix",
    split: "DatasetSplit",
    baselines: BaselineConfig | None = None,
    weights: Optional[dict[str, float]] = None,
) -> EvaluationResult:
    """Score the ensemble, each member and the four baselines on the test targets.

    ``weights`` overrides the bundle's frozen ensemble weights.
    """
    from .ensemble import EnsembleWeights, combine
    from .trainer import make_windows

    baselines = baselines or BaselineConfig()
    if list(bundle.feature_names) != list(matrix.names):
        missing = sorted(set(bundle.feature_names) - set(matrix.names))
        extra = sorted(set(matrix.names) - set(bundle.feature_names))
        raise SchemaError(f"feature schema mismatch: bundle lacks {extra}, matrix lacks {missing}")
    seq = bundle.sequence_length
    X, _, target_rows = make_windows(matrix, bundle.scaler, split.test, seq)
    closes = matrix["close"].values
    actual = closes[target_rows]
    members = bundle.predict_members(X)
    w = EnsembleWeights.from_dict(weights) if weights else bundle.weights
    preds: dict[str, np.ndarray] = {"ensemble": combine([members[m] for m in ("vae", "transformer", "lstm")], w)}
    preds.update(members)
    preds["sma"] = baseline_sma(closes, baselines.sma_period, target_rows)
    preds["ema"] = baseline_ema(closes, baselines.ema_period, target_rows)
    preds["last_value"] = baseline_last_value(closes, target_rows)
    preds["ari"], _ = baseline_ar(
        closes, baselines.ar_p, baselines.ar_d, target_rows, split.train.stop, split.train.start
    )
    labels = {
        "ensemble": "weighted ensemble",
        "vae": "VAE",
        "transformer": "transformer",
        "lstm": "bidirectional LSTM",
        "sma": f"SMA({baselines.sma_period}) baseline",
        "ema": f"EMA({baselines.ema_period}) baseline",
        "last_value": "last-value baseline",
        "ari": f"ARI({baselines.ar_p},{baselines.ar_d}) baseline",
    }
    reports = {k: evaluate_series(PredictionSeries(actual, preds[k]), labels[k]) for k in EVALUANDS}
    dates = [matrix.dates[t] for t in target_rows]
    return EvaluationResult(reports, dates, actual, preds, w.to_dict(), baselines)
