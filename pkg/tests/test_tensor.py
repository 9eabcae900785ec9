"""Autodiff core: forward values vs numpy, gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privpool import tensor as T
from privpool.tensor import Tensor

rng = np.random.default_rng(0)


def rand(*shape, requires_grad=False):
    return Tensor(np.random.default_rng(hash(shape) % 2**32).normal(size=shape),
                  requires_grad=requires_grad)


# ---------------------------------------------------------------- forwards

@given(st.integers(1, 5), st.integers(1, 5))
def test_binary_ops_match_numpy(n, m):
    a = np.random.default_rng(n * 7 + m).normal(size=(n, m))
    b = np.random.default_rng(n * 11 + m).normal(size=(n, m)) + 3.0
    assert np.array_equal(T.add(Tensor(a), Tensor(b)).data, a + b)
    assert np.array_equal(T.sub(Tensor(a), Tensor(b)).data, a - b)
    assert np.array_equal(T.mul(Tensor(a), Tensor(b)).data, a * b)
    assert np.array_equal(T.div(Tensor(a), Tensor(b)).data, a / b)


def test_broadcasting_matches_numpy():
    a = rand(4, 1, 3)
    b = rand(2, 3)
    assert np.array_equal(T.add(a, b).data, a.data + b.data)
    assert T.mul(a, 2.0).data.shape == (4, 1, 3)


def test_unary_ops_match_numpy():
    a = rand(3, 4)
    assert np.array_equal(T.relu(a).data, np.maximum(a.data, 0.0))
    assert np.allclose(T.sigmoid(a).data, 1.0 / (1.0 + np.exp(-a.data)))
    assert np.array_equal(T.exp(a).data, np.exp(a.data))
    assert np.array_equal(T.neg(a).data, -a.data)
    pos = Tensor(np.abs(a.data) + 0.5)
    assert np.array_equal(T.log(pos).data, np.log(pos.data))
    assert np.array_equal(T.sqrt(pos).data, np.sqrt(pos.data))
    assert np.array_equal(T.clip(a, -0.5, 0.5).data,
                          np.clip(a.data, -0.5, 0.5))


@given(st.sampled_from([None, 0, 1, (0, 1), (1, 2)]),
       st.booleans())
def test_reductions_match_numpy(axis, keepdims):
    a = rand(3, 4, 5)
    assert np.allclose(T.tsum(a, axis=axis, keepdims=keepdims).data,
                       a.data.sum(axis=axis, keepdims=keepdims))
    assert np.allclose(T.tmean(a, axis=axis, keepdims=keepdims).data,
                       a.data.mean(axis=axis, keepdims=keepdims))
    assert np.array_equal(T.tmax(a, axis=axis, keepdims=keepdims).data,
                          a.data.max(axis=axis, keepdims=keepdims))


def test_shape_ops_match_numpy():
    a = rand(2, 3, 4)
    assert np.array_equal(T.reshape(a, (6, 4)).data, a.data.reshape(6, 4))
    assert np.array_equal(T.transpose(a, (2, 0, 1)).data,
                          a.data.transpose(2, 0, 1))
    assert np.array_equal(T.transpose(a).data, a.data.transpose())
    b = rand(2, 3, 4)
    assert np.array_equal(T.concat([a, b], axis=1).data,
                          np.concatenate([a.data, b.data], axis=1))
    assert np.array_equal(T.take(a, [2, 0], axis=2).data,
                          a.data.take([2, 0], axis=2))
    assert np.array_equal(T.broadcast_to(rand(1, 3), (5, 3)).data,
                          np.broadcast_to(rand(1, 3).data, (5, 3)))


def test_take_accepts_range_and_rejects_empty():
    a = rand(4, 3)
    assert np.array_equal(T.take(a, range(2)).data, a.data[:2])
    with pytest.raises(ValueError):
        T.take(a, [])


def test_matmul_matches_numpy_batched():
    a, b = rand(5, 3, 4), rand(5, 4, 2)
    assert np.allclose(T.matmul(a, b).data, a.data @ b.data)
    c, d = rand(3, 4), rand(4, 6)
    assert np.allclose(T.matmul(c, d).data, c.data @ d.data)


def conv2d_oracle(x, k, b, stride, padding):
    n, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oh, ow, co))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, i, j] = np.tensordot(patch, k, axes=([1, 2, 3], [0, 1, 2]))
    return out + b


def test_conv2d_matches_loop_oracle():
    x, k, b = rand(2, 6, 6, 3), rand(3, 3, 3, 4), rand(4)
    for stride, padding in ((1, 1), (2, 1), (1, 0), (3, 2)):
        got = T.conv2d(x, k, b, stride=stride, padding=padding).data
        want = conv2d_oracle(x.data, k.data, b.data, stride, padding)
        assert np.allclose(got, want, atol=1e-12), (stride, padding)


def maxpool_oracle(x, k, stride):
    n, h, w, c = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((n, oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            out[:, i, j] = x[:, i * stride:i * stride + k,
                             j * stride:j * stride + k].max(axis=(1, 2))
    return out


def test_maxpool2d_matches_loop_oracle():
    x = rand(2, 8, 8, 3)
    for k, stride in ((2, 2), (3, 1), (3, 3)):
        got = T.maxpool2d(x, k, stride=stride).data
        assert np.array_equal(got, maxpool_oracle(x.data, k, stride))


def test_maxpool2d_same_pad_keeps_spatial_size():
    x = rand(2, 7, 7, 3)
    out = T.maxpool2d(x, 3, stride=1, same_pad=True)
    assert out.shape == (2, 7, 7, 3)
    # interior values equal the unpadded pool
    inner = T.maxpool2d(x, 3, stride=1).data
    assert np.array_equal(out.data[:, 1:-1, 1:-1], inner)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    a = rand(4, 9)
    s = T.softmax(a).data
    assert np.allclose(s.sum(axis=1), 1.0)
    shifted = T.softmax(T.add(a, 123.0)).data
    assert np.allclose(s, shifted)


def test_cross_entropy_matches_hand_formula():
    logits = rand(5, 3)
    labels = np.array([0, 2, 1, 2, 0])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(5), labels]).mean()
    assert np.allclose(T.cross_entropy(logits, labels).data, want)


# ---------------------------------------------------------------- tape

def test_gradients_accumulate_on_reused_leaf():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with T.Tape():
        y = T.tsum(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
        T.backward(y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape():
        with T.no_grad():
            y = T.mul(x, 2.0)
        z = T.tsum(T.mul(x, 3.0))
        T.backward(z)
    assert np.allclose(x.grad, 3.0)
    assert y.grad is None


def test_grads_only_on_requires_grad_leaves():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    with T.Tape():
        T.backward(T.tsum(T.mul(x, c)))
    assert x.grad is not None and c.grad is None


def test_backward_outside_tape_raises():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.tsum(x))
    with T.Tape():
        y = T.tsum(T.mul(x, x))
        with pytest.raises(ValueError):
            T.backward(T.mul(x, x))  # non-scalar root


# ---------------------------------------------------------------- grad checks

OPS_TO_CHECK = [
    ("add", lambda a, b: T.tsum(T.add(a, b)), 2),
    ("mul", lambda a, b: T.tsum(T.mul(a, b)), 2),
    ("div", lambda a, b: T.tsum(T.div(a, T.add(T.mul(b, b), 1.0))), 2),
    ("matmul", lambda a, b: T.tsum(T.matmul(a, b)), 2),
]


@pytest.mark.parametrize("name,fn,_n", OPS_TO_CHECK)
def test_binary_grad_checks(name, fn, _n):
    inputs = {"a": rand(3, 3, requires_grad=True),
              "b": rand(3, 3, requires_grad=True)}
    report = T.grad_check(fn, inputs, name=name)
    assert report.passed, report


def test_reduction_and_shape_grads():
    inputs = {"a": rand(2, 3, 4, requires_grad=True)}
    for fn in (lambda a: T.tsum(T.tmean(a, axis=(1, 2))),
               lambda a: T.tsum(T.transpose(T.reshape(a, (6, 4)))),
               lambda a: T.tsum(T.take(a, [1, 0], axis=1))):
        report = T.grad_check(fn, inputs)
        assert report.passed, report


def test_broadcast_grad_reduces_correctly():
    inputs = {"a": rand(4, 3, requires_grad=True),
              "b": rand(3, requires_grad=True)}
    report = T.grad_check(lambda a, b: T.tsum(T.mul(a, b)), inputs)
    assert report.passed, report


def test_softmax_cross_entropy_grads():
    logits = rand(4, 5, requires_grad=True)
    labels = np.array([1, 0, 4, 2])
    report = T.grad_check(lambda z: T.cross_entropy(z, labels), {"z": logits})
    assert report.passed, report


# ---------------------------------------------------------------- dtype

def test_default_dtype_switch():
    with T.using_dtype(np.float32):
        x = Tensor(np.zeros(3))
        assert x.data.dtype == np.float32
    assert Tensor(np.zeros(3)).data.dtype == np.float64


# ---------------------------------------------------------------- dispatcher

def test_forward_op_dispatch_and_unknown_name():
    a = rand(2, 3)
    out = T.forward_op("relu", [a])
    assert np.array_equal(out.data, np.maximum(a.data, 0))
    with pytest.raises(ValueError):
        T.forward_op("not_an_op", [a])


# ---------------------------------------------------------------- save/load

def test_save_load_roundtrip_bitwise(tmp_path):
    for dtype in (np.float64, np.float32):
        t = Tensor(np.random.default_rng(1).normal(size=(3, 4)), dtype=dtype)
        p = tmp_path / f"t_{dtype.__name__}.ptns"
        T.save_tensor(p, t)
        back = T.load_tensor(p)
        assert back.data.dtype == dtype
        assert np.array_equal(back.data, t.data)
        assert back.data.tobytes() == t.data.tobytes()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ptns"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError):
        T.load_tensor(p)
