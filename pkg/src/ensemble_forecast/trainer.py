"""Windowed datasets, leakage-free scaling, early-stopped training and the ensemble coordinator."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .ensemble import MEMBERS, EnsembleWeights, PerformanceWindow, init_weights, record_validation, update_weights
from .errors import DataError, NumericFault, SchemaError
from .indicators import FeatureMatrix
from .models import MODEL_NAMES, Forecaster, WindowBatch, build_model, config_fields, model_from_hyperparameters
from .tensor_core import Adam, RngStream, backward, finite_checks, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "ensemble-bundle"
BUNDLE_VERSION = 1


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class DatasetSplit:
    """Absolute, contiguous row ranges into a feature matrix."""

    train: range
    validation: range
    test: range
    proportions: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def __post_init__(self):
        a, b, c = self.train, self.validation, self.test
        if not (a.stop == b.start and b.stop == c.start):
            raise ValueError("split ranges must be contiguous and chronological")
        if min(len(a), len(b), len(c)) < 1:
            raise ValueError("every split range must be non-empty")

    def to_dict(self) -> dict:
        return {
            "train": [self.train.start, self.train.stop],
            "validation": [self.validation.start, self.validation.stop],
            "test": [self.test.start, self.test.stop],
            "proportions": list(self.proportions),
        }


def make_splits(
    matrix: FeatureMatrix,
    proportions: Sequence[float] = (0.70, 0.15, 0.15),
    sequence_length: int = 60,
) -> DatasetSplit:
    """Chronological split of the post-warm-up rows, floor-rounded, remainder to test."""
    if len(proportions) != 3 or any(p <= 0 for p in proportions):
        raise ValueError(f"need three positive proportions, got {proportions}")
    fracs = [Fraction(str(p)) for p in proportions]
    if sum(fracs) != 1:
        raise ValueError(f"proportions must sum to 1, got {proportions}")
    start = matrix.effective_start
    n = len(matrix) - start
    if n < sequence_length + 3:
        raise DataError(f"{n} post-warm-up rows; need at least {sequence_length + 3} for sequence length {sequence_length}")
    n_train = math.floor(n * fracs[0])
    n_val = math.floor(n * fracs[1])
    t0 = start + n_train
    v0 = t0 + n_val
    return DatasetSplit(range(start, t0), range(t0, v0), range(v0, len(matrix)), tuple(float(p) for p in proportions))


# ------------------------------------------------------------------ scaling


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature min-max map into [-1, 1] fitted on training rows. Out-of-range values are not clipped."""

    names: tuple[str, ...]
    center: np.ndarray
    half_range: np.ndarray
    target: str = "close"

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_range, dtype=np.float64)
        if c.shape != (len(self.names),) or h.shape != c.shape:
            raise ValueError("scaler parameters must have one entry per feature")
        if self.target not in self.names:
            raise SchemaError(f"target column {self.target!r} is not a feature")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_range", h)

    @property
    def _target_idx(self) -> int:
        return self.names.index(self.target)

    def scale(self, values: np.ndarray) -> np.ndarray:
        """Scale ``(..., features)``. Constant training columns map to 0."""
        safe = np.where(self.half_range > 0, self.half_range, 1.0)
        out = (np.asarray(values, dtype=np.float64) - self.center) / safe
        return np.where(self.half_range > 0, out, 0.0)

    def unscale(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * self.half_range + self.center

    def scale_target(self, prices: np.ndarray) -> np.ndarray:
        j = self._target_idx
        return (np.asarray(prices, dtype=np.float64) - self.center[j]) / self.half_range[j]

    def unscale_target(self, scaled: np.ndarray) -> np.ndarray:
        j = self._target_idx
        return np.asarray(scaled, dtype=np.float64) * self.half_range[j] + self.center[j]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "center": [float(v) for v in self.center],
            "half_range": [float(v) for v in self.half_range],
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        try:
            return cls(tuple(d["names"]), np.array(d["center"], float), np.array(d["half_range"], float), d.get("target", "close"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed scaler parameters: {exc}") from None


def fit_scaler(matrix: FeatureMatrix, split: DatasetSplit, target: str = "close") -> FeatureScaler:
    rows = matrix.to_array()[split.train.start : split.train.stop]
    if rows.shape[0] == 0:
        raise DataError("cannot fit the scaler on an empty training range")
    if not np.isfinite(rows).all():
        raise DataError("training range overlaps indicator warm-up rows")
    lo, hi = rows.min(axis=0), rows.max(axis=0)
    half = (hi - lo) / 2.0
    for name, h in zip(matrix.names, half):
        if h == 0:
            log.warning("feature %s is constant on the training range; it scales to 0", name)
    if target in matrix.names and half[matrix.names.index(target)] == 0:
        raise DataError(f"target column {target!r} is constant on the training range")
    return FeatureScaler(tuple(matrix.names), (hi + lo) / 2.0, half, target)


# ------------------------------------------------------------------ windows


def make_windows(
    matrix: FeatureMatrix, scaler: FeatureScaler, rows: range, sequence_length: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Windows wholly inside ``rows``.

    Returns inputs ``(n, sequence_length, features)``, scaled targets ``(n, 1)``
    and the absolute target row of each window, with ``n = len(rows) - sequence_length``.
    """
    if sequence_length < 1:
        raise ValueError("sequence_length must be >= 1")
    if len(rows) < sequence_length + 1:
        raise DataError(f"range of {len(rows)} rows is shorter than sequence length {sequence_length} + 1")
    if rows.step != 1 or rows.start < matrix.effective_start or rows.stop > len(matrix):
        raise DataError(f"rows {rows} fall outside the usable rows of the matrix")
    if tuple(scaler.names) != tuple(matrix.names):
        raise SchemaError("scaler was fitted on a different feature schema")
    block = scaler.scale(matrix.to_array()[rows.start : rows.stop])
    n = len(rows) - sequence_length
    view = np.lib.stride_tricks.sliding_window_view(block, sequence_length, axis=0)[:n]
    X = np.ascontiguousarray(view.transpose(0, 2, 1))
    target_rows = np.arange(rows.start + sequence_length, rows.stop)
    y = block[sequence_length:, scaler.names.index(scaler.target)].reshape(-1, 1).copy()
    return X, y, target_rows


def latest_window(matrix: FeatureMatrix, scaler: FeatureScaler, sequence_length: int) -> np.ndarray:
    """The window ending at the final row, shape ``(1, sequence_length, features)``."""
    if len(matrix) - matrix.effective_start < sequence_length:
        raise DataError(f"need {sequence_length} post-warm-up rows for a prediction window")
    if tuple(scaler.names) != tuple(matrix.names):
        raise SchemaError("scaler was fitted on a different feature schema")
    block = scaler.scale(matrix.to_array()[len(matrix) - sequence_length :])
    return block[None, :, :]


def iter_batches(
    X: np.ndarray, y: np.ndarray, batch_size: int, rng: Optional[RngStream] = None
) -> Iterator[WindowBatch]:
    """Mini-batches, shuffled when ``rng`` is given. A trailing batch of one joins its predecessor."""
    n = X.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        yield WindowBatch(X[idx], y[idx])


# ------------------------------------------------------------------ config and log


@dataclass(frozen=True)
class TrainConfig:
    sequence_length: int = 60
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 30
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 20240607
    proportions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    reweight_every: int = 5
    window_len: int = 5
    reweighting: bool = True
    workers: int = 3
    models: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("sequence_length", "batch_size", "max_epochs", "patience", "reweight_every", "window_len", "workers"):
            if int(getattr(self, name)) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.patience > self.max_epochs:
            raise DataError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if not self.learning_rate > 0:
            raise DataError("learning_rate must be positive")
        if self.seed < 0 or self.seed >= 2**64:
            raise DataError("seed must be an unsigned 64-bit integer")
        unknown = set(self.models) - set(MODEL_NAMES)
        if unknown:
            raise DataError(f"unknown model sections: {sorted(unknown)}")
        for kind, overrides in self.models.items():
            bad = set(overrides) - config_fields(kind) or set(overrides) & {"seq_len", "n_features"}
            if bad:
                raise DataError(f"unknown or fixed {kind} settings: {sorted(bad)}")
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training settings: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"invalid training settings: {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise DataError(f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def with_max_epochs(self, max_epochs: int) -> "TrainConfig":
        """Override the epoch budget; patience shrinks with it so the config stays valid."""
        return replace(self, max_epochs=max_epochs, patience=min(self.patience, max_epochs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proportions"] = list(self.proportions)
        return d


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    model: str
    train_loss: float
    val_loss: float
    weights: tuple[float, float, float]
    seconds: float = 0.0


LOG_COLUMNS = ("epoch", "model", "train_loss", "val_loss", "w1", "w2", "w3")


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_at: dict[str, int] = field(default_factory=dict)
    best_epoch: dict[str, int] = field(default_factory=dict)

    def for_model(self, model: str) -> list[EpochRecord]:
        return [r for r in self.records if r.model == model]

    def to_csv_text(self) -> str:
        # wall-clock stays out so reruns are byte-identical
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, r.model, repr(r.train_loss), repr(r.val_loss), *(repr(x) for x in r.weights)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [
            EpochRecord(int(r["epoch"]), r["model"], float(r["train_loss"]), float(r["val_loss"]),
                        (float(r["w1"]), float(r["w2"]), float(r["w3"])))
            for r in rows
        ]
        return cls(recs)


# ------------------------------------------------------------------ single-model training


class ModelTrainer:
    """Epoch-at-a-time training with early stopping on validation loss."""

    def __init__(
        self,
        name: str,
        model: Forecaster,
        train: tuple[np.ndarray, np.ndarray],
        validation: tuple[np.ndarray, np.ndarray],
        config: TrainConfig,
        rng: RngStream,
    ):
        if train[0].shape[0] < 1 or validation[0].shape[0] < 1:
            raise DataError("training needs at least one training and one validation window")
        self.name = name
        self.model = model
        self.train = train
        self.val_batch = WindowBatch(*validation)
        self.config = config
        self.rng = rng
        self.optimizer = Adam(model.named_parameters(), lr=config.learning_rate, clip_norm=config.clip_norm)
        self.epoch = 0
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state: dict[str, np.ndarray] | None = None
        self.bad_epochs = 0
        self.stopped = False
        self.val_predictions = np.zeros(0)

    def run_epoch(self) -> tuple[float, float]:
        """One pass over shuffled training batches, then validation. Returns (train, val) loss."""
        if self.stopped:
            raise RuntimeError(f"{self.name} has already stopped")
        self.epoch += 1
        total, count = 0.0, 0
        try:
            # per-op checks off: a NaN anywhere reaches the loss or the gradient norm, both checked
            with finite_checks(False):
                for batch in iter_batches(*self.train, self.config.batch_size, self.rng):
                    self.optimizer.zero_grad()
                    loss = self.model.loss(batch, self.rng, "train")
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NumericFault("non-finite training loss")
                    backward(loss)
                    self.optimizer.step()
                    total += value * len(batch)
                    count += len(batch)
            val_loss, self.val_predictions = self.model.validate(self.val_batch)
            if not math.isfinite(val_loss):
                raise NumericFault("non-finite validation loss")
        except NumericFault as exc:
            raise NumericFault(f"{self.name}: training diverged at epoch {self.epoch}: {exc}") from exc
        self._track(val_loss)
        return total / count, val_loss

    def _track(self, val_loss: float) -> None:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.best_state = self.model.state_dict()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.config.patience or self.epoch >= self.config.max_epochs:
            self.finish()

    def finish(self) -> None:
        """Stop and restore the best-validation state, buffers included."""
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
            _, self.val_predictions = self.model.validate(self.val_batch)
        self.stopped = True


def train_model(
    model: Forecaster,
    train: tuple[np.ndarray, np.ndarray],
    validation: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    rng: RngStream,
    name: str | None = None,
) -> tuple[Forecaster, TrainingLog]:
    trainer = ModelTrainer(name or model.kind, model, train, validation, config, rng)
    history = TrainingLog()
    weights = init_weights().as_tuple()
    while not trainer.stopped:
        t0 = time.perf_counter()
        tl, vl = trainer.run_epoch()
        history.records.append(EpochRecord(trainer.epoch, trainer.name, tl, vl, weights, time.perf_counter() - t0))
    history.stopped_at[trainer.name] = trainer.epoch
    history.best_epoch[trainer.name] = trainer.best_epoch
    return model, history


# ------------------------------------------------------------------ bundle


@dataclass
class ModelBundle:
    models: dict[str, Forecaster]
    scaler: FeatureScaler
    weights: EnsembleWeights
    feature_names: tuple[str, ...]
    sequence_length: int
    config: TrainConfig
    seeds: dict[str, int]
    split: Optional[DatasetSplit] = None

    def predict_members(self, X: np.ndarray) -> dict[str, np.ndarray]:
        """Unscaled next-step prices from each member."""
        return {m: self.scaler.unscale_target(self.models[m].predict(X)) for m in MEMBERS}

    def manifest(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "feature_names": list(self.feature_names),
            "sequence_length": self.sequence_length,
            "scaler": self.scaler.to_dict(),
            "weights": self.weights.to_dict(),
            "config": self.config.to_dict(),
            "seeds": dict(self.seeds),
            "split": self.split.to_dict() if self.split else None,
            "models": {m: {"checkpoint": f"{m}.efck", "hyperparameters": self.models[m].hyperparameters()} for m in MEMBERS},
        }

    def save(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for m in MEMBERS:
            write_checkpoint(out / f"{m}.efck", self.models[m].state_dict(), {"model": m})
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, directory: str | Path) -> "ModelBundle":
        d = Path(directory)
        path = d / "manifest.json"
        if not path.is_file():
            raise DataError(f"bundle manifest not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from None
        if doc.get("format") != BUNDLE_FORMAT or doc.get("version") != BUNDLE_VERSION:
            raise SchemaError(f"{path}: not a version-{BUNDLE_VERSION} model bundle")
        models = {}
        for m in MEMBERS:
            entry = doc["models"][m]
            model = model_from_hyperparameters(m, entry["hyperparameters"])
            state, _ = read_checkpoint(d / entry["checkpoint"])
            model.load_state_dict(state)
            models[m] = model
        sp = doc.get("split")
        split = None
        if sp:
            split = DatasetSplit(range(*sp["train"]), range(*sp["validation"]), range(*sp["test"]), tuple(sp["proportions"]))
        return cls(
            models,
            FeatureScaler.from_dict(doc["scaler"]),
            EnsembleWeights.from_dict(doc["weights"]),
            tuple(doc["feature_names"]),
            int(doc["sequence_length"]),
            TrainConfig.from_dict(doc["config"]),
            {k: int(v) for k, v in doc["seeds"].items()},
            split,
        )


# ------------------------------------------------------------------ ensemble training

ModelFactory = Callable[[str, int, int, RngStream, dict], Forecaster]


def _default_factory(kind: str, seq: int, n_features: int, rng: RngStream, overrides: dict) -> Forecaster:
    return build_model(kind, seq, n_features, rng, **overrides)


def _mape(actual: np.ndarray, predicted: np.ndarray) -> float:
    return 100.0 * math.fsum(np.abs((actual - predicted) / actual)) / len(actual)


def member_seeds(seed: int) -> dict[str, dict[str, int]]:
    root = RngStream(seed)
    return {m: {"init": root.derive(f"{m}/init").seed, "train": root.derive(f"{m}/train").seed} for m in MEMBERS}


def train_ensemble(
    matrix: FeatureMatrix,
    config: TrainConfig | None = None,
    model_factory: ModelFactory | None = None,
) -> tuple[ModelBundle, TrainingLog]:
    """Train the three members in lockstep epochs and reweight them on validation MAPE.

    Members run concurrently, each on its own thread with its own seeded
    stream. After every ``reweight_every`` epochs the coordinator records
    each member's validation MAPE in unscaled prices and updates the weights.
    """
    config = config or TrainConfig()
    factory = model_factory or _default_factory
    seq = config.sequence_length
    split = make_splits(matrix, config.proportions, seq)
    scaler = fit_scaler(matrix, split)
    X_tr, y_tr, _ = make_windows(matrix, scaler, split.train, seq)
    X_va, y_va, val_rows = make_windows(matrix, scaler, split.validation, seq)
    val_prices = matrix[scaler.target].values[val_rows]
    for arr in (X_tr, y_tr, X_va, y_va):
        arr.flags.writeable = False

    seeds = member_seeds(config.seed)
    trainers = {}
    for m in MEMBERS:
        model = factory(m, seq, len(matrix.names), RngStream(seeds[m]["init"]), dict(config.models.get(m, {})))
        trainers[m] = ModelTrainer(m, model, (X_tr, y_tr), (X_va, y_va), config, RngStream(seeds[m]["train"]))

    weights = init_weights()
    window = PerformanceWindow(config.window_len)
    history = TrainingLog()
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for epoch in range(1, config.max_epochs + 1):
            active = [m for m in MEMBERS if not trainers[m].stopped]
            if not active:
                break
            t0 = time.perf_counter()
            futures = {m: pool.submit(trainers[m].run_epoch) for m in active}
            losses = {m: futures[m].result() for m in active}
            seconds = time.perf_counter() - t0
            if config.reweighting and epoch % config.reweight_every == 0:
                mapes = [_mape(val_prices, scaler.unscale_target(trainers[m].val_predictions)) for m in MEMBERS]
                record_validation(window, mapes)
                weights = update_weights(window, weights)
            for m in active:
                tl, vl = losses[m]
                history.records.append(EpochRecord(epoch, m, tl, vl, weights.as_tuple(), seconds))
                if trainers[m].stopped:
                    history.stopped_at[m] = epoch

    for m in MEMBERS:
        if not trainers[m].stopped:
            trainers[m].finish()
            history.stopped_at[m] = trainers[m].epoch
        history.best_epoch[m] = trainers[m].best_epoch

    bundle = ModelBundle(
        {m: trainers[m].model for m in MEMBERS},
        scaler,
        weights,
        tuple(matrix.names),
        seq,
        config,
        {f"{m}.{k}": v for m in MEMBERS for k, v in seeds[m].items()},
        split,
    )
    return bundle, history
