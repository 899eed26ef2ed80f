import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strel import tensor as tn
from strel.tensor import Parameter, Tensor

from oracles import finite_diff, loop_mean_axis1, naive_matmul


def t(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


# matmul -------------------------------------------------------------------------

def test_matmul_identity():
    out = tn.matmul(t([[1, 0], [0, 1]]), t([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert tn.matmul(t([[1, 2]]), t([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(tn.matmul(t(a), t(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(tn.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


# softmax ------------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(tn.softmax_last(t([0, 0])).data, [0.5, 0.5])
    np.testing.assert_allclose(tn.softmax_last(t([1000, 1000])).data, [0.5, 0.5])
    np.testing.assert_allclose(tn.softmax_last(t([0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    s = tn.softmax_last(t(x)).data
    assert np.all(s >= 0) and np.all(s <= 1)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


# layer norm -----------------------------------------------------------------------

def test_layer_norm_constant_slice_is_zero():
    out = tn.layer_norm(t([5, 5, 5]), t([1, 1, 1]), t([0, 0, 0]))
    np.testing.assert_array_equal(out.data, [0, 0, 0])


def test_layer_norm_two_values():
    out = tn.layer_norm(t([1, 3]), t([1, 1]), t([0, 0]), eps=1e-14)
    np.testing.assert_allclose(out.data, [-1, 1], atol=1e-12)


def test_layer_norm_zero_gain_gives_bias():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = tn.layer_norm(t(x), t([0, 0, 0]), t([1, 2, 3]))
    np.testing.assert_array_equal(out.data, np.tile([1, 2, 3], (4, 1)))


# reduce ----------------------------------------------------------------------------

def test_reduce_mean_and_max():
    assert tn.reduce(t([1, 2, 3]), (0,), "mean").item() == 2
    x = t([1, 3, 2], grad=True)
    m = tn.reduce(x, (0,), "max")
    assert m.item() == 3
    m.backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 0])


def test_reduce_max_tie_goes_to_first():
    x = t([[2, 5, 5], [7, 1, 7]], grad=True)
    tn.sum_all(tn.reduce(x, (1,), "max")).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_reduce_mean_matches_loop():
    x = np.random.default_rng(1).normal(size=(2, 3, 4))
    np.testing.assert_allclose(tn.reduce(t(x), (1,), "mean").data, loop_mean_axis1(x), atol=1e-12)


def test_reduce_empty_axis():
    with pytest.raises(tn.DegenerateInputError):
        tn.reduce(t(np.zeros((2, 0))), (1,), "mean")


# concat ------------------------------------------------------------------------------

def test_concat_examples():
    assert tn.concat([t([[1]]), t([[2]])], axis=1).data.tolist() == [[1, 2]]
    one = t([[1, 2]])
    assert tn.concat([one], axis=0) is one


def test_concat_slice_round_trip():
    rng = np.random.default_rng(2)
    parts = [rng.normal(size=(2, n, 3)) for n in (1, 4, 2)]
    cat = tn.concat([t(p) for p in parts], axis=1)
    start = 0
    for p in parts:
        np.testing.assert_array_equal(tn.slice_axis(cat, start, start + p.shape[1], axis=1).data, p)
        start += p.shape[1]


def test_concat_mismatch():
    with pytest.raises(tn.ShapeError):
        tn.concat([t(np.zeros((2, 3))), t(np.zeros((3, 3)))], axis=1)


# backward ----------------------------------------------------------------------------

def test_backward_sum_and_square():
    x = t([1.0, 2.0], grad=True)
    tn.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1])
    y = t([1.0, 2.0], grad=True)
    tn.sum_all(y * y).backward()
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_twice_accumulates():
    x = t(np.random.default_rng(4).normal(size=(3, 2)), grad=True)
    w = t(np.random.default_rng(5).normal(size=(2, 2)))
    loss = tn.sum_all(tn.gelu(tn.matmul(x, w)))
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * once, rtol=0, atol=0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        t([1.0, 2.0], grad=True).backward()


def test_backward_does_not_touch_forward_data():
    x = t(np.random.default_rng(6).normal(size=(2, 3)), grad=True)
    y = tn.softmax_last(x)
    before = y.data.copy(), x.data.copy()
    tn.sum_all(y * y).backward()
    np.testing.assert_array_equal(y.data, before[0])
    np.testing.assert_array_equal(x.data, before[1])


# finite-difference checks for every differentiable op ------------------------------

def _check(make_loss, *inputs, tol=1e-5):
    for x in inputs:
        x.grad = None
    make_loss().backward()
    for x in inputs:
        num = finite_diff(lambda: make_loss().item(), x.data)
        assert tn.rel_error(x.grad, num) < tol


@pytest.mark.parametrize("seed", range(3))
def test_gradients_elementwise_and_linear(seed):
    rng = np.random.default_rng(seed)
    a, b = t(rng.normal(size=(3, 4)), True), t(rng.normal(size=(4, 2)), True)
    w = rng.normal(size=(3, 2))
    _check(lambda: tn.sum_all(tn.matmul(a, b) * w), a, b)
    c = t(rng.normal(size=(3, 4)), True)
    _check(lambda: tn.sum_all((a - c) * (a + c) * 0.5), a, c)
    _check(lambda: tn.sum_all(tn.gelu(a) * tn.sigmoid(c)), a, c)
    _check(lambda: tn.sum_all(tn.exp(tn.scale(a, 0.3)) + tn.log(tn.exp(c))), a, c)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_normalisation_and_reductions(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(2, 3, 5)), True)
    g, b = t(rng.normal(size=5), True), t(rng.normal(size=5), True)
    w = rng.normal(size=(2, 3, 5))
    _check(lambda: tn.sum_all(tn.layer_norm(x, g, b) * w), x, g, b)
    _check(lambda: tn.sum_all(tn.softmax_last(x) * w), x)
    w2 = rng.normal(size=(2, 5))
    _check(lambda: tn.sum_all(tn.reduce(x, (1,), "mean") * w2), x)
    _check(lambda: tn.sum_all(tn.reduce(x, (1,), "max") * w2), x)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_shape_ops(seed):
    rng = np.random.default_rng(seed)
    x, y = t(rng.normal(size=(2, 3)), True), t(rng.normal(size=(2, 2)), True)
    w = rng.normal(size=(5, 2))
    _check(lambda: tn.sum_all(tn.transpose(tn.concat([x, y], axis=1), (1, 0)) * w), x, y)
    _check(lambda: tn.sum_all(tn.reshape(tn.take(x, [2, 0, 2], axis=1), (3, 2)) * w[:3]), x)
    bias = t(rng.normal(size=3), True)
    _check(lambda: tn.sum_all(tn.add_bias(x, bias) * x), x, bias)
    s = t(rng.normal(size=1), True)
    _check(lambda: tn.sum_all(tn.broadcast_to(tn.reshape(s, (1, 1)), (2, 3)) * x), s, x)
    _check(lambda: tn.sum_all(tn.stack([x, x * x], axis=0)), x)


def test_gradient_bce_is_sigmoid_minus_label():
    z = t([[-2.0, 0.0, 3.0], [0.5, -0.1, 8.0]], True)
    y = np.array([[1, 0, 1], [0, 0, 1]], dtype=float)
    tn.bce_with_logits(z, y).backward()
    sig = 1 / (1 + np.exp(-z.data))
    np.testing.assert_allclose(z.grad, (sig - y) / y.size, atol=1e-10)


def test_gradient_conv3d():
    rng = np.random.default_rng(0)
    x = t(rng.normal(size=(1, 2, 3, 4, 4)), True)
    w = t(rng.normal(size=(3, 2, 3, 3, 3)), True)
    out_w = rng.normal(size=(1, 3, 3, 2, 2))
    _check(lambda: tn.sum_all(tn.conv3d(x, w, stride=(1, 2, 2)) * out_w), x, w)


def test_conv3d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 3, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    out = tn.conv3d(t(x), t(w), stride=(1, 2, 2)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(2):
        for tt in range(3):
            for i in range(2):
                for j in range(2):
                    ref[0, o, tt, i, j] = np.sum(xp[0, :, tt:tt + 3, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


# parameters and checkpoints --------------------------------------------------------

def test_frozen_parameter_tracks_no_gradient():
    p = Parameter(np.ones(3), "a", frozen=True)
    q = Parameter(np.ones(3), "b")
    tn.sum_all(p * q).backward()
    assert p.grad is None
    np.testing.assert_array_equal(q.grad, [1, 1, 1])


def test_checkpoint_round_trip_and_order(tmp_path):
    arrays = {"z.w": np.arange(6.0).reshape(2, 3), "a.b": np.array(3.5), "m": np.zeros((0, 4))}
    path = tmp_path / "ck.bin"
    tn.save_arrays(path, arrays)
    raw = path.read_bytes()
    assert raw.startswith(b"STRELCKPT 1\n3\n")
    assert raw.index(b"a.b") < raw.index(b"m 2") < raw.index(b"z.w")
    back = tn.load_arrays(path)
    assert list(back) == ["a.b", "m", "z.w"]
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
        assert back[k].shape == v.shape


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        tn.load_arrays(path)
    path.write_bytes(b"STRELCKPT 99\n0\n")
    with pytest.raises(ValueError, match="version"):
        tn.load_arrays(path)
