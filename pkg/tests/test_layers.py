import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddclass import layers as L
from ddclass.errors import ContractError, NonFiniteGradientError, ShapeError
from ddclass.layers import AdamState, ConvSpec

from oracles import conv_direct, maxpool_direct, numeric_grad


def test_convspec_validation():
    with pytest.raises(ContractError):
        ConvSpec(2, 1, 1, kernel=2, padding="same")
    with pytest.raises(ContractError):
        ConvSpec(2, 1, 1, stride=0)
    with pytest.raises(ContractError):
        ConvSpec(4, 1, 1)


def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4)).astype(np.float32)
    spec = ConvSpec(2, 3, 3, kernel=1)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(L.conv_forward(x, spec, w, np.zeros(3, np.float32)), x)


def test_conv_all_ones_valid():
    spec = ConvSpec(2, 1, 1, padding="valid")
    out = L.conv_forward(np.ones((1, 1, 3, 3)), spec, np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9


@pytest.mark.parametrize("rank", [2, 3])
def test_conv_same_preserves_spatial(rank):
    shape = (2, 2) + (5, 6, 4)[:rank]
    spec = ConvSpec(rank, 2, 3)
    w = np.zeros(spec.weight_shape)
    assert L.conv_forward(np.zeros(shape), spec, w, np.zeros(3)).shape == (2, 3) + shape[2:]


@pytest.mark.parametrize("rank,pad", [(2, "same"), (2, "valid"), (3, "same")])
def test_conv_matches_loop_nest(rank, pad):
    rng = np.random.default_rng(rank)
    x = rng.standard_normal((2, 2) + (5, 4, 3)[:rank])
    spec = ConvSpec(rank, 2, 3, padding=pad)
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(3)
    np.testing.assert_allclose(L.conv_forward(x, spec, w, b),
                               conv_direct(x, w, b, 1 if pad == "same" else 0), atol=1e-12)


def test_conv_shape_errors():
    spec = ConvSpec(2, 2, 1)
    with pytest.raises(ShapeError):
        L.conv_forward(np.zeros((1, 3, 4, 4)), spec, np.zeros(spec.weight_shape), np.zeros(1))
    with pytest.raises(ShapeError):
        L.conv_forward(np.zeros((1, 1, 2, 2)), ConvSpec(2, 1, 1, padding="valid"),
                       np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_maxpool_examples():
    out, _ = L.maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.item() == 4
    out, _ = L.maxpool_forward(np.full((1, 2, 4, 4), 7.0))
    assert np.all(out == 7.0)
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.zeros((1, 1, 1, 4)))


def test_maxpool_matches_oracle_and_routes_to_argmax():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 4, 4))
    out, arg = L.maxpool_forward(x)
    np.testing.assert_array_equal(out, maxpool_direct(x, 2))
    g = rng.standard_normal(out.shape)
    dx = L.maxpool_backward(g, arg, x.shape)
    # each window receives exactly its gradient, placed on the max cell
    assert np.count_nonzero(dx) == g.size
    np.testing.assert_allclose(dx.sum(), g.sum())
    assert np.all((dx != 0) <= (x == np.repeat(np.repeat(np.repeat(out, 2, 2), 2, 3), 2, 4)))


def test_maxpool_ties_go_to_lowest_index():
    x = np.ones((1, 1, 2, 2))
    out, arg = L.maxpool_forward(x)
    dx = L.maxpool_backward(np.ones_like(out), arg, x.shape)
    assert dx.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_dense_examples():
    assert L.dense_forward(np.array([[1.0, 1.0]]), np.array([[1.0], [2.0]]), np.zeros(1)).item() == 3
    out = L.dense_forward(np.ones((3, 4)), np.zeros((4, 2)), np.array([1.0, -1.0]))
    np.testing.assert_array_equal(out, np.tile([1.0, -1.0], (3, 1)))
    assert L.dense_forward(np.zeros((0, 4)), np.zeros((4, 2)), np.zeros(2)).shape == (0, 2)
    with pytest.raises(ShapeError):
        L.dense_forward(np.zeros((1, 3)), np.zeros((4, 2)), np.zeros(2))


def test_relu_zero_subgradient():
    np.testing.assert_array_equal(L.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0, 0, 1])


def test_softmax_ce_examples():
    loss, p = L.softmax_cross_entropy(np.zeros((1, 10)), [3])
    np.testing.assert_allclose(p, 0.1)
    assert loss == pytest.approx(math.log(10))
    loss, p = L.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)
    loss, _ = L.softmax_cross_entropy(np.array([[math.log(3), 0.0]]), [0])
    assert loss == pytest.approx(math.log(4 / 3), abs=1e-12)
    with pytest.raises(ContractError):
        L.softmax_cross_entropy(np.zeros((1, 3)), [3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 1e2, 1e4]))
def test_softmax_rows_sum_to_one(seed, scale):
    logits = (np.random.default_rng(seed).uniform(-1, 1, (5, 7)) * scale).astype(np.float32)
    _, p = L.softmax_cross_entropy(logits, np.zeros(5, int))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)


def test_adam_examples():
    p = {"w": np.array([1.0])}
    out = L.adam_step(p, {"w": np.zeros(1)}, AdamState())
    assert out["w"].tolist() == [1.0]
    out = L.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState())
    assert out["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_identical_streams_and_determinism():
    rng = np.random.default_rng(2)
    grads = [rng.standard_normal(4) for _ in range(5)]
    sa, sb = AdamState(), AdamState()
    a = {"a": np.ones(4), "b": np.ones(4)}
    b = dict(a)
    for g in grads:
        a = L.adam_step(a, {"a": g, "b": g}, sa)
        b = L.adam_step(b, {"a": g, "b": g}, sb)
    np.testing.assert_array_equal(a["a"], a["b"])
    np.testing.assert_array_equal(a["a"], b["a"])


def test_adam_rejects_non_finite():
    state = AdamState()
    with pytest.raises(NonFiniteGradientError) as err:
        L.adam_step({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2), "b": np.array([np.nan, 0])}, state)
    assert err.value.names == ["b"] and state.t == 0 and not state.m


# kernel-level finite-difference checks (64-bit), independent of the tape

def _fd_check(f, analytic, x, tol=1e-4):
    num = numeric_grad(f, x)
    err = np.max(np.abs(analytic - num) / np.maximum(1.0, np.abs(analytic)))
    assert err <= tol, err


@pytest.mark.parametrize("rank", [2, 3])
def test_conv_backward_fd(rank):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2) + (4, 3, 3)[:rank])
    spec = ConvSpec(rank, 2, 2)
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(2)
    g = rng.standard_normal(L.conv_forward(x, spec, w, b).shape)
    dx, dw, db = L.conv_backward(g, x, spec, w)
    _fd_check(lambda v: np.sum(g * L.conv_forward(v, spec, w, b)), dx, x)
    _fd_check(lambda v: np.sum(g * L.conv_forward(x, spec, v, b)), dw, w)
    _fd_check(lambda v: np.sum(g * L.conv_forward(x, spec, w, v)), db, b)
