import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetmoe.core import (DimensionError, Rng, affine, affine_rows, hash64, mix64, mix64_array, relu, sigmoid,
                         softmax)

finite = st.floats(min_value=-700, max_value=700, allow_nan=False)


def test_affine_examples():
    assert np.array_equal(affine(np.eye(2), np.array([3.0, 4.0]), np.zeros(2)), [3.0, 4.0])
    assert np.array_equal(affine(np.zeros((2, 2)), np.array([3.0, 4.0]), np.array([1.0, 2.0])), [1.0, 2.0])
    # hand multiply: [1+2, 3+4] + [0, 1]
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(affine(W, np.array([1.0, 1.0]), np.array([0.0, 1.0])), [3.0, 8.0])


def test_affine_shape_errors():
    with pytest.raises(DimensionError):
        affine(np.eye(2), np.ones(3), np.zeros(2))
    with pytest.raises(DimensionError):
        affine(np.eye(2), np.ones(2), np.zeros(3))


def test_affine_rows_is_batch_independent():
    rng = np.random.default_rng(0)
    W, X, b = rng.normal(size=(7, 33)), rng.normal(size=(50, 33)), rng.normal(size=7)
    full = affine_rows(W, X, b)
    for i in (0, 17, 49):
        assert np.array_equal(full[i], affine(W, X[i], b))
    assert np.allclose(full, X @ W.T + b, rtol=0, atol=1e-12)


def test_relu_examples():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(relu(np.zeros(2)), [0.0, 0.0])
    assert np.array_equal(relu(np.array([5.0, -5.0, 0.5])), [5.0, 0.0, 0.5])


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(50.0) - 1.0) < 1e-12
    assert sigmoid(1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert sigmoid(1.0) == pytest.approx(0.73105857863, abs=1e-11)
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0


@given(finite)
def test_sigmoid_symmetry(x):
    assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-12


def test_sigmoid_array_matches_scalar():
    xs = np.linspace(-30, 30, 101)
    assert all(sigmoid(xs)[i] == sigmoid(float(x)) for i, x in enumerate(xs))


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    p = softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0) and p[1] < 1e-300
    e = [math.exp(2.0), math.exp(0.5), math.exp(1.0)]
    expected = [v / sum(e) for v in e]
    assert np.allclose(softmax(np.array([2.0, 0.5, 1.0])), expected, atol=1e-15)
    assert np.allclose(softmax(np.array([2.0, 0.5, 1.0])), [0.6285, 0.1402, 0.2312], atol=1e-4)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(z):
    p = softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all()


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant(z, c):
    a, b = softmax(z), softmax(z + c)
    assert np.max(np.abs(a - b) / np.maximum(a, 1e-300)) < 1e-10 or np.allclose(a, b, rtol=1e-10, atol=1e-300)


def test_splitmix_reference_stream():
    # published SplitMix64 outputs for seed 0
    rng = Rng(0)
    assert [rng.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_mix64_array_matches_scalar():
    vals = [0, 1, 2**63, 2**64 - 1, 123456789]
    assert mix64_array(np.array(vals, dtype=np.uint64)).tolist() == [mix64(v) for v in vals]


def test_rng_equal_seeds_equal_streams():
    a, b = Rng(42), Rng(42)
    assert [a.next_u64() for _ in range(10_000)] == [b.next_u64() for _ in range(10_000)]
    assert Rng(1).next_u64() != Rng(2).next_u64()


def test_rng_helpers():
    rng = Rng(5)
    xs = [rng.uniform() for _ in range(2000)]
    assert 0.0 <= min(xs) and max(xs) < 1.0 and abs(np.mean(xs) - 0.5) < 0.03
    assert all(0 <= rng.below(7) < 7 for _ in range(500))
    with pytest.raises(ValueError):
        rng.below(0)
    items = list(range(20))
    rng.shuffle(items)
    assert sorted(items) == list(range(20))
    assert rng.uniform_array((2, 3), -1, 1).shape == (2, 3)


def test_hash64_stable():
    assert hash64("abc", 1) == hash64("abc", 1)
    assert hash64("abc", 1) != hash64("abc", 2)
    assert hash64("abc", 1) != hash64("abd", 1)
