"""Acceptance suite, criteria 1-8. Each test prints one PASS/FAIL line before asserting."""

import math
import time

import numpy as np
import pytest

import oracles
from conftest import random_series, weekdays
from ensemble_forecast import tensor_core as tc
from ensemble_forecast.cli import main as cli_main
from ensemble_forecast.ensemble import EnsembleWeights, PerformanceWindow, combine, init_weights, record_validation, update_weights
from ensemble_forecast.evaluation import PredictionSeries, directional_accuracy, evaluate_bundle, mape, r2, rmse
from ensemble_forecast.indicators import FeatureMatrix, IndicatorColumn, IndicatorConfig, build_feature_matrix
from ensemble_forecast.indicators import rsi, stochastic, cci, obv
from ensemble_forecast.market_data import OhlcvSeries, synthetic_sine_series, write_ohlcv_csv
from ensemble_forecast.models import Forecaster, WindowBatch, build_model
from ensemble_forecast.tensor_core import RngStream, Tensor, gradcheck
from ensemble_forecast.trainer import TrainConfig, fit_scaler, make_splits, make_windows, train_ensemble, train_model


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


# ------------------------------------------------------------------ 1. gradients

CONFIGS = 20
TOL = 1e-4


def _p(g, *shape, lo=None):
    x = g.normal(size=shape)
    if lo is not None:  # keep clear of kinks and domain edges
        x = np.sign(x) * (lo + np.abs(x))
    return Tensor(x, requires_grad=True)


def _w(g, shape):
    return Tensor(g.normal(size=shape))


def _primitive_cases():
    """name -> builder(g) returning (fn, inputs)."""

    def unary(op, lo=None, positive=False):
        def build(g):
            shape = tuple(g.integers(1, 5, g.integers(1, 4)))
            x = _p(g, *shape, lo=lo)
            if positive:
                x = Tensor(np.abs(x.data) + 0.5, requires_grad=True)
            w = _w(g, shape)
            return (lambda: (op(x) * w).sum()), {"x": x}

        return build

    def binary(op, positive_b=False):
        def build(g):
            shape = tuple(g.integers(1, 5, g.integers(1, 4)))
            bshape = shape[int(g.integers(0, len(shape))):]  # broadcast a suffix
            a = _p(g, *shape)
            b = _p(g, *bshape)
            if positive_b:
                b = Tensor(np.abs(b.data) + 0.5, requires_grad=True)
            w = _w(g, shape)
            return (lambda: (op(a, b) * w).sum()), {"a": a, "b": b}

        return build

    def matmul_case(g):
        m, k, n = g.integers(1, 5, 3)
        lead = tuple(g.integers(1, 4, g.integers(0, 3)))
        a, b = _p(g, *lead, m, k), _p(g, k, n) if g.random() < 0.5 else _p(g, *lead, k, n)
        w = _w(g, lead + (m, n))
        return (lambda: (tc.matmul(a, b) * w).sum()), {"a": a, "b": b}

    def reduce_case(op):
        def build(g):
            shape = tuple(g.integers(1, 5, 3))
            x = _p(g, *shape)
            axis = int(g.integers(0, 3))
            w = _w(g, tuple(s for i, s in enumerate(shape) if i != axis))
            return (lambda: (op(x, axis=axis) * w).sum()), {"x": x}

        return build

    def reshape_case(g):
        x = _p(g, 2, 3, 4)
        w = _w(g, (6, 4))
        return (lambda: (tc.reshape(x, (6, 4)) * w).sum()), {"x": x}

    def transpose_case(g):
        x = _p(g, *g.integers(1, 5, 3))
        perm = tuple(g.permutation(3))
        w = _w(g, tuple(x.shape[i] for i in perm))
        return (lambda: (tc.transpose(x, perm) * w).sum()), {"x": x}

    def swap_case(g):
        x = _p(g, *g.integers(1, 5, 3))
        w = _w(g, (x.shape[0], x.shape[2], x.shape[1]))
        return (lambda: (tc.swapaxes(x, 1, 2) * w).sum()), {"x": x}

    def getitem_case(g):
        x = _p(g, 5, 4)
        idx = g.integers(0, 5, 7)  # repeated fancy indices accumulate
        w = _w(g, (7, 2))
        return (lambda: (x[idx, 1:3] * w).sum()), {"x": x}

    def concat_case(g):
        a, b = _p(g, 2, int(g.integers(1, 4))), _p(g, 2, int(g.integers(1, 4)))
        w = _w(g, (2, a.shape[1] + b.shape[1]))
        return (lambda: (tc.concat([a, b], axis=1) * w).sum()), {"a": a, "b": b}

    def stack_case(g):
        a, b = _p(g, 3, 2), _p(g, 3, 2)
        w = _w(g, (3, 2, 2))
        return (lambda: (tc.stack([a, b], axis=2) * w).sum()), {"a": a, "b": b}

    def softmax_case(g):
        x = _p(g, *g.integers(1, 5, 2))
        w = _w(g, x.shape)
        return (lambda: (tc.softmax(x, axis=-1) * w).sum()), {"x": x}

    def mse_case(g):
        a, b = _p(g, 4, 1), _p(g, 4, 1)
        return (lambda: tc.mse(a, b)), {"a": a, "b": b}

    def layer_norm_case(g):
        d = int(g.integers(2, 6))
        x, gain, bias = _p(g, 3, d), _p(g, d), _p(g, d)
        w = _w(g, (3, d))
        return (lambda: (tc.layer_norm(x, gain, bias) * w).sum()), {"x": x, "g": gain, "b": bias}

    def batch_norm_case(g):
        d = int(g.integers(1, 4))
        x, gain, bias = _p(g, int(g.integers(3, 7)), d), _p(g, d), _p(g, d)
        w = _w(g, x.shape)
        def fn():
            return (tc.batch_norm_1d(x, gain, bias, tc.BatchNormState(np.zeros(d), np.ones(d)), "train") * w).sum()

        return fn, {"x": x, "g": gain, "b": bias}

    def dropout_case(g):
        x = _p(g, 4, 5)
        w = _w(g, (4, 5))
        seed = int(g.integers(0, 2**31))
        return (lambda: (tc.dropout(x, 0.3, RngStream(seed), "train") * w).sum()), {"x": x}

    def lstm_case(g):
        B, T, D, H = (int(v) for v in g.integers(1, 4, 4))
        x = _p(g, B, T, D)
        W = [Tensor(0.6 * g.normal(size=(H, H + D)), requires_grad=True) for _ in range(4)]
        b = [Tensor(0.6 * g.normal(size=H), requires_grad=True) for _ in range(4)]
        reverse = bool(g.integers(0, 2))
        w = _w(g, (B, T, H))
        inputs = {"x": x, **{f"W{k}": t for k, t in enumerate(W)}, **{f"b{k}": t for k, t in enumerate(b)}}
        return (lambda: (tc.lstm_scan(x, W, b, reverse) * w).sum()), inputs

    return {
        "add": binary(tc.add),
        "sub": binary(tc.sub),
        "mul": binary(tc.mul),
        "div": binary(tc.div, positive_b=True),
        "neg": unary(tc.neg),
        "power": unary(lambda x: tc.power(x, 3.0)),
        "exp": unary(tc.exp),
        "log": unary(tc.log, positive=True),
        "sqrt": unary(tc.sqrt, positive=True),
        "sigmoid": unary(tc.sigmoid),
        "tanh": unary(tc.tanh),
        "relu": unary(tc.relu, lo=0.05),
        "sum": reduce_case(tc.tsum),
        "mean": reduce_case(tc.mean),
        "reshape": reshape_case,
        "transpose": transpose_case,
        "swapaxes": swap_case,
        "getitem": getitem_case,
        "concat": concat_case,
        "stack": stack_case,
        "matmul": matmul_case,
        "softmax": softmax_case,
        "mse": mse_case,
        "layer_norm": layer_norm_case,
        "batch_norm": batch_norm_case,
        "dropout": dropout_case,
        "lstm_scan": lstm_case,
    }


def _model_case(kind, g):
    T, F = int(g.integers(2, 5)), int(g.integers(1, 4))
    if kind == "vae":
        cfg = dict(hidden=int(g.integers(2, 6)), latent=int(g.integers(1, 4)), beta=float(g.uniform(0.1, 1)),
                   lambda_pred=float(g.uniform(0.5, 2)))
        B = int(g.integers(2, 5))
    elif kind == "transformer":
        heads = int(g.integers(1, 3))
        cfg = dict(d_model=heads * int(g.integers(1, 4)), n_heads=heads, n_blocks=int(g.integers(1, 3)),
                   ffn=int(g.integers(2, 6)), dropout=float(g.uniform(0, 0.3)))
        B = int(g.integers(1, 4))
    else:
        cfg = dict(hidden=int(g.integers(1, 4)), layers=int(g.integers(1, 3)), dropout=float(g.uniform(0, 0.3)))
        B = int(g.integers(4, 7))  # batch norm on the head needs a non-degenerate batch
    m = build_model(kind, T, F, RngStream(int(g.integers(0, 2**31))), **cfg)
    # zero-initialized biases can park ReLU inputs exactly on the kink
    for p in m.named_parameters().values():
        p.data = p.data + 0.1 * g.normal(size=p.shape)
    batch = WindowBatch(g.uniform(-1, 1, (B, T, F)), g.uniform(-0.9, 0.9, (B, 1)))
    seed = int(g.integers(0, 2**31))
    if kind == "vae":
        eps = g.normal(size=(B, cfg["latent"]))
        return (lambda: m.loss(batch, None, "train", eps=eps)), m.named_parameters()
    return (lambda: m.loss(batch, RngStream(seed))), m.named_parameters()


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    g = np.random.default_rng(2024)
    worst = {}
    counts = {}
    for name, build in _primitive_cases().items():
        for _ in range(CONFIGS):
            fn, inputs = build(g)
            err = gradcheck(fn, inputs).max_error
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    for kind in ("vae", "transformer", "lstm"):
        for _ in range(CONFIGS):
            fn, params = _model_case(kind, g)
            err = gradcheck(fn, params, max_coords=6, rng=g).max_error
            worst[kind + "_loss"] = max(worst.get(kind + "_loss", 0.0), err)
            counts[kind + "_loss"] = counts.get(kind + "_loss", 0) + 1
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= TOL}
    top = max(worst, key=worst.get)
    ok = not bad and elapsed < 60 and min(counts.values()) >= CONFIGS
    verdict(1, ok, f"{len(worst)} gradient targets x {CONFIGS} configs, worst {top}={worst[top]:.2e} "
                   f"(tol {TOL:g}), {elapsed:.1f}s (limit 60s){'; failing ' + str(bad) if bad else ''}")


# ------------------------------------------------------------------ 2. indicator oracles


def _oracle_columns(s):
    h, l, c, v = list(s.highs), list(s.lows), list(s.closes), list(s.volumes)
    k, d = oracles.stochastic(h, l, c)
    mid, up, low = oracles.bollinger(c)
    m, sig, hist = oracles.macd(c)
    cols = {
        "logret": oracles.logret(c),
        "range": oracles.price_range(h, l, c),
        "roc_10": oracles.roc(c, 10),
        "rsi_14": oracles.rsi(c, 14),
        "macd": m, "macd_signal": sig, "macd_hist": hist,
        "stoch_k": k, "stoch_d": d,
        "atr_14": oracles.atr(h, l, c),
        "vol_20": oracles.volatility(c),
        "bb_mid": mid, "bb_up": up, "bb_low": low,
        "force": oracles.force(c, v),
        "obv": oracles.obv(c, v),
        "cci_20": oracles.cci(h, l, c),
    }
    for n in (5, 10, 20, 50):
        cols[f"sma_{n}"] = oracles.sma(c, n)
        cols[f"ema_{n}"] = oracles.ema(c, n)
    return cols


def _bars(highs, lows, closes, volumes=None):
    n = len(closes)
    volumes = volumes or [100.0] * n
    return OhlcvSeries.from_arrays(weekdays(n), closes, highs, lows, closes, volumes)


def _boundary_conventions() -> list[str]:
    failures = []
    up = np.arange(1.0, 30.0)
    if set(rsi(up, 14).values[1:]) != {100.0}:
        failures.append("RSI 100")
    if set(rsi(up[::-1], 14).values[1:]) != {0.0}:
        failures.append("RSI 0")
    if set(rsi(np.full(20, 3.0), 14).values[1:]) != {50.0}:
        failures.append("RSI 50")
    highs = [10.0 + i for i in range(14)]
    lows = [5.0 + i for i in range(14)]
    hh, ll = max(highs), min(lows)
    for close, want in ((hh, 100.0), (ll, 0.0), ((hh + ll) / 2, 50.0)):
        k = stochastic(_bars(highs, lows, highs[:-1] + [close]))[0].values[13]
        if k != want:
            failures.append(f"%K {want}")
    flat = stochastic(_bars([3.0] * 20, [3.0] * 20, [3.0] * 20))[0].values[13:]
    if set(flat) != {50.0}:
        failures.append("%K flat 50")
    if set(cci(_bars([7.0] * 30, [7.0] * 30, [7.0] * 30)).values[19:]) != {0.0}:
        failures.append("CCI 0")
    o = obv(_bars([5.0, 6.0, 6.0, 4.0], [5.0, 6.0, 6.0, 4.0], [5.0, 6.0, 6.0, 4.0], [10.0, 20.0, 30.0, 40.0])).values
    if list(o) != [0.0, 20.0, 20.0, -20.0]:
        failures.append("OBV equal close")
    return failures


def test_criterion_2_indicator_oracles(verdict):
    t0 = time.perf_counter()
    g = np.random.default_rng(99)
    worst, worst_name = 0.0, ""
    for _ in range(1000):
        s = random_series(g, 200)
        fm = build_feature_matrix(s)
        for name, want in _oracle_columns(s).items():
            err = oracles.max_rel_err(fm[name].as_optional(), want)
            if err > worst:
                worst, worst_name = err, name
    failures = _boundary_conventions()
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and not failures and elapsed < 60
    verdict(2, ok, f"1000 random 200-bar series, worst rel err {worst:.1e} ({worst_name or 'none'}), "
                   f"boundary conventions {'all exact' if not failures else 'broken: ' + ', '.join(failures)}, "
                   f"{elapsed:.1f}s (limit 60s)")


# ------------------------------------------------------------------ 3. metric identities


def _S(a, p):
    return PredictionSeries(np.array(a, float), np.array(p, float))


def test_criterion_3_metric_identities(verdict):
    y = np.random.default_rng(5).normal(size=500)
    checks = {
        "DA perfect": directional_accuracy(_S([1, 2, 1, 3], [1, 2, 1, 3])) == 1.0,
        "DA hand": directional_accuracy(_S([1, 2, 1, 3], [1, 2.5, 0.5, 3.5])) == 1.0,
        "DA opposite": directional_accuracy(_S([1, 2, 1, 3], [1, 0, 2, 0])) == 0.0,
        "RMSE zero": rmse(_S([1, 2], [1, 2])) == 0.0,
        "RMSE hand": rmse(_S([1, 2], [2, 4])) == math.sqrt(5 / 2),
        "R2 perfect": r2(_S([1, 2, 3], [1, 2, 3])) == 1.0,
        "R2 hand": r2(_S([1, 2, 3], [2, 2, 2])) == 0.0,
        "R2 mean predictor": abs(r2(_S(y, np.full(500, y.mean())))) <= 1e-12,
        "R2 perfect random": abs(r2(_S(y, y)) - 1.0) <= 1e-12,
        "MAPE zero": mape(_S([100, 200], [100, 200])) == 0.0,
        "MAPE hand": mape(_S([100, 200], [110, 190])) == 7.5,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(3, not failed, f"{len(checks) - len(failed)}/{len(checks)} metric identities exact"
                           + (f"; failing {failed}" if failed else ""))


# ------------------------------------------------------------------ 4. ensemble algebra


def _w_of(triple):
    w = PerformanceWindow(5)
    record_validation(w, triple)
    return np.array(update_weights(w).as_tuple())


def test_criterion_4_ensemble_algebra(verdict):
    failures = []
    one = [np.array([10.0])] * 3
    if combine(one, EnsembleWeights(0.2, 0.5, 0.3))[0] != 10.0:
        failures.append("fixed point")
    if combine([np.array([1.0]), np.array([2.0]), np.array([3.0])], init_weights())[0] != 2.1:
        failures.append("hand 2.1")
    a = np.random.default_rng(0).normal(size=9)
    if not np.array_equal(combine([a, a * 2, a * 3], EnsembleWeights(1.0, 0.0, 0.0)), a):
        failures.append("vertex")
    if init_weights().as_tuple() != (0.3, 0.3, 0.4):
        failures.append("init")
    if not np.allclose(_w_of((2.0, 2.0, 2.0)), 1 / 3, atol=1e-15):
        failures.append("equal errors")
    if not np.allclose(_w_of((1.0, 1.0, 0.5)), (0.25, 0.25, 0.5), atol=1e-9):
        failures.append("inverse error example")
    if not np.allclose(_w_of((0.01, 10.0, 10.0)), (0.9, 0.05, 0.05), atol=1e-12):
        failures.append("floor example")

    g = np.random.default_rng(4)
    counts = dict(simplex=0, floor=0, symmetry=0, monotone=0)
    for _ in range(10_000):
        m = np.exp(g.uniform(-6, 7, 3))
        w = _w_of(m)
        counts["simplex"] += abs(w.sum() - 1) <= 1e-12 and (w >= 0).all()
        counts["floor"] += (w >= 0.05 - 1e-12).all()
        perm = g.permutation(3)
        counts["symmetry"] += np.allclose(_w_of(m[perm]), w[perm], rtol=0, atol=1e-12)
        k = int(g.integers(0, 3))
        better = m.copy()
        better[k] *= g.uniform(0.01, 0.99)
        counts["monotone"] += _w_of(better)[k] >= w[k] - 1e-12
    for name, c in counts.items():
        if c != 10_000:
            failures.append(f"{name} held {c}/10000")
    verdict(4, not failures, "combination examples exact; simplex, floor, symmetry, monotonicity over 10^4 triples"
                             + (f"; failing {failures}" if failures else ""))


# ------------------------------------------------------------------ 5. protocol conformance


class _ConstantValidation(Forecaster):
    kind = "stub"

    def __init__(self):
        super().__init__(None)
        self.w = tc.full_param((1,), 0.0)
        self._register({"w": self.w})

    def forward(self, inputs, rng, mode):
        return Tensor(inputs.data[:, -1, :1]) * self.w

    def validate(self, batch):
        return 1.0, np.zeros(len(batch))


def test_criterion_5_protocol(verdict):
    failures = []
    for n in (1000, 1049):  # 1000 bars, and 1000 rows after the 49-row warm-up
        m = build_feature_matrix(synthetic_sine_series(n=n), IndicatorConfig())
        rows = n - m.effective_start
        s = make_splits(m)
        sizes = (len(s.train), len(s.validation), len(s.test))
        want = (rows * 70 // 100, rows * 15 // 100, rows - rows * 70 // 100 - rows * 15 // 100)
        if sizes != want or not (s.train.stop == s.validation.start and s.validation.stop == s.test.start):
            failures.append(f"split {sizes} != {want}")
        sc = fit_scaler(m, s)
        for r in (s.train, s.validation, s.test):
            X, _, tgt = make_windows(m, sc, r, 60)
            if X.shape[0] != len(r) - 60 or tgt.max() > r.stop - 1 or tgt.min() < r.start + 60:
                failures.append(f"window count for range of {len(r)}")
        g = np.random.default_rng(n)
        cols = []
        for c in m.columns:
            v = c.values.copy()
            v[s.validation.start :] = g.uniform(-1e6, 1e6, len(v) - s.validation.start)
            cols.append(IndicatorColumn(c.name, v, c.warmup_len))
        other = fit_scaler(FeatureMatrix(tuple(cols), m.dates), s)
        if not (np.array_equal(other.center, sc.center) and np.array_equal(other.half_range, sc.half_range)):
            failures.append("scaler moved when validation/test rows changed")
    X = np.linspace(-1, 1, 60).reshape(20, 3, 1)
    _, log = train_model(_ConstantValidation(), (X, X[:, -1]), (X, X[:, -1]), TrainConfig(), RngStream(0), "stub")
    if log.stopped_at["stub"] != 31 or log.best_epoch["stub"] != 1:
        failures.append(f"constant validation stopped at {log.stopped_at['stub']}")
    verdict(5, not failures, "70/15/15 chronological splits, window count = L - 60, stop at epoch 31, "
                             "scaler blind to validation/test" + (f"; failing {failures}" if failures else ""))


# ------------------------------------------------------------------ 6 and 7. end-to-end on the sine series


@pytest.fixture(scope="session")
def sine_run():
    matrix = build_feature_matrix(synthetic_sine_series(n=1000), IndicatorConfig())
    t0 = time.perf_counter()
    bundle, log = train_ensemble(matrix, TrainConfig(max_epochs=100))
    result = evaluate_bundle(bundle, matrix, bundle.split)
    return result, log, time.perf_counter() - t0


def test_criterion_6_sine_smoke(verdict, sine_run):
    result, log, elapsed = sine_run
    ens, last = result.reports["ensemble"], result.reports["last_value"]
    ok = ens.directional_accuracy > 0.90 and ens.mape < 2.0 and ens.rmse < last.rmse and elapsed < 600
    verdict(6, ok, f"ensemble DA {ens.directional_accuracy:.4f} (> 0.90), MAPE {ens.mape:.4f}% (< 2%), "
                   f"RMSE {ens.rmse:.4f} vs last-value {last.rmse:.4f}, train+eval {elapsed:.0f}s (limit 600s), "
                   f"stopped at {log.stopped_at}")


def test_criterion_7_ordering(verdict, sine_run):
    result, _, _ = sine_run
    r = result.reports
    da = {k: r[k].directional_accuracy for k in ("vae", "transformer", "lstm", "sma", "ensemble")}
    members_ok = all(da[m] >= da["sma"] for m in ("vae", "transformer", "lstm"))
    ens_ok = da["ensemble"] >= min(da[m] for m in ("vae", "transformer", "lstm"))
    verdict(7, members_ok and ens_ok, "DA " + ", ".join(f"{k} {v:.4f}" for k, v in da.items()))


# ------------------------------------------------------------------ 8. determinism


def test_criterion_8_cli_determinism(verdict, tmp_path):
    raw = tmp_path / "sine.csv"
    write_ohlcv_csv(synthetic_sine_series(n=1000), raw)
    codes = [cli_main(["run", str(raw), "--out", str(tmp_path / d), "--seed", "17", "--max-epochs", "2"]) for d in ("a", "b")]
    same = {
        name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("report.json", "predictions.csv")
    }
    ok = codes == [0, 0] and all(same.values())
    verdict(8, ok, f"two CLI runs (exit {codes}): " + ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
