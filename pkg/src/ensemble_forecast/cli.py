"""Command-line entry point: ingest, features, train, evaluate, predict, and run (all four in one go).

Every subcommand writes only into ``--out``. Exit status is 0 on success,
1 on a usage error, 2 on a data error and 3 on a numeric fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import DataError, ForecastError, SchemaError
from .evaluation import BaselineConfig, evaluate_bundle
from .indicators import FeatureMatrix, IndicatorConfig, build_feature_matrix
from .market_data import clean_series, parse_ohlcv_csv, write_ohlcv_csv
from .trainer import ModelBundle, TrainConfig, latest_window, make_splits, train_ensemble

log = logging.getLogger("ensemble_forecast")

DEFAULT_SEED = TrainConfig().seed


class UsageError(ForecastError):
    exit_code = 1


@dataclass
class RunConfig:
    """Contents of a ``--config`` JSON file. Every section is optional."""

    cleaning: dict = field(default_factory=dict)
    indicators: IndicatorConfig = field(default_factory=IndicatorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise DataError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise DataError(f"{p}: expected a JSON object")
        unknown = set(doc) - {"cleaning", "indicators", "training", "baselines"}
        if unknown:
            raise DataError(f"{p}: unknown config sections {sorted(unknown)}")
        cleaning = dict(doc.get("cleaning", {}))
        bad = set(cleaning) - {"fill", "z_threshold"}
        if bad:
            raise DataError(f"{p}: unknown cleaning options {sorted(bad)}")
        if cleaning.get("fill", "linear") not in ("linear", "forward_fill"):
            raise DataError(f"{p}: cleaning.fill must be 'linear' or 'forward_fill'")
        z = cleaning.get("z_threshold", 3.0)
        if not isinstance(z, (int, float)) or z <= 0:
            raise DataError(f"{p}: cleaning.z_threshold must be a positive number")
        try:
            indicators = IndicatorConfig.from_dict(doc.get("indicators", {}))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{p}: indicators: {exc}") from None
        return cls(
            cleaning,
            indicators,
            TrainConfig.from_dict(doc.get("training", {})),
            BaselineConfig.from_dict(doc.get("baselines", {})),
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _existing_file(text: str) -> Path:
    p = Path(text)
    if not p.is_file():
        raise DataError(f"file not found: {p}")
    return p


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensemble-forecast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", metavar="PATH", help="JSON run config (cleaning, indicators, training, baselines)")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")

    p = sub.add_parser("ingest", help="parse and clean an OHLCV CSV")
    p.add_argument("input", help="raw OHLCV CSV")
    common(p)
    p.add_argument("--fill", choices=("linear", "forward_fill"), help="missing-value fill method")
    p.add_argument("--z-threshold", type=float, help="outlier z-score threshold")

    p = sub.add_parser("features", help="compute the indicator feature matrix from a cleaned CSV")
    p.add_argument("input", help="cleaned OHLCV CSV")
    common(p)

    p = sub.add_parser("train", help="train the three members and the ensemble weights")
    p.add_argument("features", help="features.csv")
    common(p)
    p.add_argument("--seed", type=_seed, help=f"root seed (default {DEFAULT_SEED})")
    p.add_argument("--max-epochs", type=_positive, help="epoch budget override")

    p = sub.add_parser("evaluate", help="score ensemble, members and baselines on the test range")
    p.add_argument("bundle", help="bundle directory written by train")
    p.add_argument("features", help="features.csv")
    common(p)

    p = sub.add_parser("predict", help="next-step price from the latest window")
    p.add_argument("bundle", help="bundle directory written by train")
    p.add_argument("features", help="features.csv")
    common(p)
    p.add_argument("--horizon", type=int, default=1, help="steps ahead; only 1 is supported")

    p = sub.add_parser("run", help="ingest, features, train and evaluate into one run directory")
    p.add_argument("input", help="raw OHLCV CSV")
    common(p)
    p.add_argument("--seed", type=_seed, help=f"root seed (default {DEFAULT_SEED})")
    p.add_argument("--max-epochs", type=_positive, help="epoch budget override")
    return parser


# ------------------------------------------------------------------ steps


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise DataError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _training_config(cfg: RunConfig, args) -> TrainConfig:
    tc = cfg.training
    if args.seed is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "seed": args.seed})
    if args.max_epochs is not None:
        tc = tc.with_max_epochs(args.max_epochs)
    return tc


def do_ingest(input_path: Path, out: Path, cfg: RunConfig, fill=None, z=None) -> dict:
    series = parse_ohlcv_csv(_existing_file(str(input_path)))
    method = fill or cfg.cleaning.get("fill", "linear")
    threshold = z if z is not None else cfg.cleaning.get("z_threshold", 3.0)
    cleaned, report = clean_series(series, method=method, z_threshold=threshold)
    write_ohlcv_csv(cleaned, out / "cleaned.csv")
    doc = json.loads(report.to_json())
    (out / "cleaning_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def do_features(input_path: Path, out: Path, cfg: RunConfig) -> FeatureMatrix:
    series = parse_ohlcv_csv(_existing_file(str(input_path)))
    matrix = build_feature_matrix(series, cfg.indicators)
    matrix.to_csv(out / "features.csv")
    return matrix


def do_train(matrix: FeatureMatrix, out: Path, tc: TrainConfig) -> ModelBundle:
    bundle, history = train_ensemble(matrix, tc)
    bundle.save(out / "bundle")
    history.write_csv(out / "log.csv")
    return bundle


def do_evaluate(bundle: ModelBundle, matrix: FeatureMatrix, out: Path, baselines: BaselineConfig) -> dict:
    split = make_splits(matrix, bundle.config.proportions, bundle.sequence_length)
    result = evaluate_bundle(bundle, matrix, split, baselines)
    result.write(out)
    return json.loads(result.report_json())


def do_predict(bundle: ModelBundle, matrix: FeatureMatrix, horizon: int) -> dict:
    if horizon != 1:
        raise DataError(f"only one-step forecasts are supported, got horizon {horizon}")
    if list(bundle.feature_names) != list(matrix.names):
        raise SchemaError("features do not match the bundle's feature schema")
    window = latest_window(matrix, bundle.scaler, bundle.sequence_length)
    members = {k: float(v[0]) for k, v in bundle.predict_members(window).items()}
    weights = bundle.weights.to_dict()
    contributions = {k: weights[k] * members[k] for k in members}
    return {
        "as_of": matrix.dates[-1].isoformat(),
        "horizon": 1,
        "prediction": sum(contributions[k] for k in ("vae", "transformer", "lstm")),
        "members": members,
        "contributions": contributions,
        "weights": weights,
    }


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def dispatch(args) -> None:
    cfg = RunConfig.load(args.config)
    out = _out_dir(args)
    cmd = args.command
    if cmd == "ingest":
        _emit(do_ingest(Path(args.input), out, cfg, args.fill, args.z_threshold))
    elif cmd == "features":
        m = do_features(Path(args.input), out, cfg)
        _emit({"rows": len(m), "columns": m.names, "effective_start": m.effective_start})
    elif cmd == "train":
        matrix = FeatureMatrix.from_csv(_existing_file(args.features))
        bundle = do_train(matrix, out, _training_config(cfg, args))
        _emit({"bundle": str(out / "bundle"), "weights": bundle.weights.to_dict()})
    elif cmd == "evaluate":
        bundle = ModelBundle.load(args.bundle)
        matrix = FeatureMatrix.from_csv(_existing_file(args.features))
        _emit(do_evaluate(bundle, matrix, out, cfg.baselines)["evaluands"]["ensemble"])
    elif cmd == "predict":
        if args.horizon != 1:
            raise DataError(f"only one-step forecasts are supported, got horizon {args.horizon}")
        bundle = ModelBundle.load(args.bundle)
        matrix = FeatureMatrix.from_csv(_existing_file(args.features))
        doc = do_predict(bundle, matrix, args.horizon)
        (out / "prediction.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _emit(doc)
    elif cmd == "run":
        do_ingest(Path(args.input), out, cfg)
        do_features(out / "cleaned.csv", out, cfg)
        # train and evaluate from the written features so the run matches the step-by-step path
        matrix = FeatureMatrix.from_csv(out / "features.csv")
        bundle = do_train(matrix, out, _training_config(cfg, args))
        _emit(do_evaluate(bundle, matrix, out, cfg.baselines)["evaluands"]["ensemble"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        dispatch(args)
    except ForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
