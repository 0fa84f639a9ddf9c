import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_forecast.ensemble import (
    EnsembleWeights,
    PerformanceWindow,
    combine,
    init_weights,
    record_validation,
    update_weights,
)


def window_of(*rows, k=5):
    w = PerformanceWindow(k)
    for r in rows:
        record_validation(w, r)
    return w


def test_init():
    w = init_weights()
    assert w.as_tuple() == (0.3, 0.3, 0.4)
    assert abs(sum(w.as_tuple()) - 1) < 1e-15
    assert init_weights() == w


class TestCombine:
    def test_fixed_point(self):
        out = combine([np.array([10.0]), np.array([10.0]), np.array([10.0])], EnsembleWeights(0.2, 0.5, 0.3))
        assert out[0] == pytest.approx(10.0, abs=1e-14)

    def test_hand(self):
        out = combine([np.array([1.0]), np.array([2.0]), np.array([3.0])], init_weights())
        assert out[0] == pytest.approx(2.1, abs=1e-15)

    def test_vertex(self, rng):
        a = rng.normal(size=7)
        out = combine([a, rng.normal(size=7), rng.normal(size=7)], EnsembleWeights(1.0, 0.0, 0.0))
        assert np.array_equal(out, a)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            combine([np.zeros(3), np.zeros(3), np.zeros(2)], init_weights())

    def test_convex_bounds(self, rng):
        ps = [rng.normal(size=50) for _ in range(3)]
        out = combine(ps, EnsembleWeights(0.2, 0.35, 0.45))
        stack = np.vstack(ps)
        assert (out >= stack.min(axis=0) - 1e-12).all() and (out <= stack.max(axis=0) + 1e-12).all()


def test_invalid_weights():
    with pytest.raises(ValueError):
        EnsembleWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        EnsembleWeights(-0.1, 0.6, 0.5)


class TestUpdate:
    def test_equal(self):
        w = update_weights(window_of((2.0, 2.0, 2.0)), init_weights())
        assert np.allclose(w.as_tuple(), 1 / 3, atol=1e-15)

    def test_inverse_error(self):
        w = update_weights(window_of((1.0, 1.0, 0.5)), init_weights())
        assert np.allclose(w.as_tuple(), (0.25, 0.25, 0.5), atol=1e-9)

    def test_floor_binds(self):
        w = update_weights(window_of((0.01, 10.0, 10.0)), init_weights())
        assert np.allclose(w.as_tuple(), (0.9, 0.05, 0.05), atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            update_weights(PerformanceWindow(5), init_weights())

    def test_deterministic(self):
        win = window_of((1.0, 2.0, 3.0), (2.0, 2.0, 1.0))
        assert update_weights(win) == update_weights(win)

    def test_uses_window_mean(self):
        w1 = update_weights(window_of((2.0, 1.0, 1.0), (4.0, 1.0, 1.0)))
        w2 = update_weights(window_of((3.0, 1.0, 1.0)))
        assert np.allclose(w1.as_tuple(), w2.as_tuple(), atol=1e-15)


class TestWindow:
    def test_append(self):
        assert len(window_of((1, 1, 1))) == 1

    def test_evict(self):
        w = window_of((1, 1, 1), (2, 2, 2), (3, 3, 3), k=2)
        assert len(w) == 2 and list(w.entries)[0] == (2.0, 2.0, 2.0)

    def test_mean(self):
        assert window_of((2, 2, 2), (4, 4, 4)).mean().tolist() == [3.0, 3.0, 3.0]

    def test_negative(self):
        with pytest.raises(ValueError):
            record_validation(PerformanceWindow(), (1.0, -0.1, 1.0))


mape = st.floats(1e-6, 1e3, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(mape, mape, mape)
def test_simplex_and_floor(a, b, c):
    w = np.array(update_weights(window_of((a, b, c))).as_tuple())
    assert abs(w.sum() - 1) < 1e-12 and (w >= 0.05 - 1e-12).all()


@settings(max_examples=300, deadline=None)
@given(mape, mape, mape, st.floats(1e-3, 1e3))
def test_scale_invariance(a, b, c, k):
    w1 = update_weights(window_of((a, b, c))).as_tuple()
    w2 = update_weights(window_of((a * k, b * k, c * k))).as_tuple()
    assert np.allclose(w1, w2, atol=1e-6)


@settings(max_examples=300, deadline=None)
@given(mape, mape, mape, st.floats(0.01, 0.99))
def test_monotone(a, b, c, shrink):
    before = update_weights(window_of((a, b, c))).w_vae
    after = update_weights(window_of((a * shrink, b, c))).w_vae
    assert after >= before - 1e-12
