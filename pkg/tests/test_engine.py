import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tendo.engine import ops
from tendo.engine.ops import ShapeError, output_size
from tendo.engine.tensor import Tensor, backward, no_grad
from tendo.gradcheck import adjoint_error, check_ops, grad_check, op_cases


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def img(rows):
    return T(np.asarray(rows, dtype=np.float64)[None, None])


def test_conv_examples():
    x = T(np.random.default_rng(0).standard_normal((2, 3, 5, 7)))
    w = np.zeros((3, 3, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1
    np.testing.assert_array_equal(ops.conv2d(x, T(w), T(np.zeros(3))).data, x.data)
    out = ops.conv2d(img([[1, 2], [3, 4]]), T(np.ones((1, 1, 2, 2))), padding="valid")
    assert out.data.tolist() == [[[[10.0]]]]
    assert ops.conv2d(T(np.ones((1, 2, 16, 16))), T(np.ones((4, 2, 3, 3))), stride=2).shape == (1, 4, 8, 8)
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((4, 3, 3, 3))))


def test_separable_examples():
    rng = np.random.default_rng(1)
    x = T(rng.standard_normal((1, 3, 6, 6)))
    dw = np.zeros((3, 1, 3, 3))
    dw[:, 0, 1, 1] = 1
    pw = np.eye(3)[:, :, None, None]
    np.testing.assert_allclose(ops.separable_conv2d(x, T(dw), T(pw)).data, x.data)
    x1 = T(rng.standard_normal((1, 1, 7, 7)))
    d, p = rng.standard_normal((1, 1, 3, 3)), rng.standard_normal((2, 1, 1, 1))
    composed = p[:, :, 0, 0][:, :, None, None] * d[:, 0][None]
    np.testing.assert_allclose(ops.separable_conv2d(x1, T(d), T(p)).data, ops.conv2d(x1, T(composed)).data,
                               rtol=1e-12, atol=1e-12)
    assert ops.separable_conv2d(T(np.ones((1, 3, 16, 16))), T(dw), T(pw), stride=2).shape == (1, 3, 8, 8)


def test_transposed_examples():
    out = ops.transposed_conv2d(img([[1]]), T(np.ones((1, 1, 2, 2))))
    assert out.data[0, 0].tolist() == [[1, 1], [1, 1]]
    z = ops.transposed_conv2d(T(np.ones((1, 2, 3, 3))), T(np.zeros((2, 4, 3, 3))))
    assert not z.data.any()
    assert ops.transposed_conv2d(T(np.ones((1, 2, 8, 8))), T(np.ones((2, 3, 3, 3)))).shape == (1, 3, 16, 16)


def test_pool_examples():
    x = img([[1, 2], [3, 4]])
    assert ops.pool2d(x, "avg", 2, 2).data.item() == 2.5
    assert ops.pool2d(x, "max", 2, 2).data.item() == 4.0
    c = T(np.full((1, 2, 5, 5), 3.0))
    for kind in ("avg", "max"):
        for k in (2, 3):
            out = ops.pool2d(c, kind, k, 1)
            assert out.shape == c.shape and np.all(out.data == 3.0)


def test_upsample_examples():
    x = img([[1, 2], [3, 4]])
    up = ops.nearest_upsample(x).data[0, 0]
    assert up.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    np.testing.assert_array_equal(ops.pool2d(ops.nearest_upsample(x), "avg", 2, 2).data, x.data)


def test_concat_examples():
    rng = np.random.default_rng(2)
    a, b = T(rng.standard_normal((2, 32, 4, 4))), T(rng.standard_normal((2, 32, 4, 4)))
    out = ops.concat_channels([a, b])
    assert out.shape == (2, 64, 4, 4)
    np.testing.assert_array_equal(out.data[:, :32], a.data)
    np.testing.assert_array_equal(out.data[:, 32:], b.data)
    np.testing.assert_array_equal(ops.concat_channels([a]).data, a.data)
    with pytest.raises(ShapeError):
        ops.concat_channels([a, T(np.ones((2, 1, 3, 4)))])


def test_small_op_examples():
    np.testing.assert_allclose(ops.softmax(T([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert ops.sigmoid(T([0.0])).data[0] == 0.5
    x = T(np.random.default_rng(3).standard_normal((3, 4)))
    np.testing.assert_array_equal(ops.dense(x, T(np.eye(4)), T(np.zeros(4))).data, x.data)
    assert ops.relu(T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ops.dropout(x, 0.5, train_mode=False) is x


def test_dropout_is_inverted():
    x = T(np.ones((200, 50)))
    out = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) == {0.0, 2.0}


def test_batch_norm_modes():
    rng = np.random.default_rng(4)
    x = T(rng.normal(3, 2, (8, 2, 4, 4)))
    rm, rv = np.zeros(2), np.ones(2)
    out = ops.batch_norm(x, T(np.ones(2)), T(np.zeros(2)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))
    rm2, rv2 = np.zeros(2), np.ones(2)
    ev = ops.batch_norm(x, T(np.ones(2)), T(np.zeros(2)), rm2, rv2, False).data
    np.testing.assert_allclose(ev, x.data / math.sqrt(1 + 1e-3))
    assert np.all(rm2 == 0)


def test_backward_examples():
    x = T([-1.0, 0.0], grad=True)
    backward(ops.total(ops.sigmoid(x)))
    assert x.grad[1] == pytest.approx(0.25)
    y = T([-1.0, 3.0], grad=True)
    backward(ops.total(ops.relu(y)))
    assert y.grad.tolist() == [0.0, 1.0]


def test_grads_overwritten_not_accumulated():
    x = T([1.0, 2.0], grad=True)
    for _ in range(3):
        backward(ops.total(ops.mul(x, 3.0)))
    assert x.grad.tolist() == [3.0, 3.0]


def test_backward_errors():
    with pytest.raises(RuntimeError):
        backward(T([1.0], grad=True))
    with pytest.raises(ValueError):
        backward(ops.relu(T([1.0, 2.0], grad=True)))


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with no_grad():
        y = ops.relu(x)
    with pytest.raises(RuntimeError):
        backward(y)


def test_random_three_op_graph():
    rng = np.random.default_rng(5)

    def f(x, w):
        return ops.total(ops.sigmoid(ops.conv2d(ops.relu(x), w)))

    rep = grad_check(f, {"x": rng.standard_normal((1, 2, 5, 5)) + 0.05, "w": rng.standard_normal((3, 2, 3, 3))})
    assert rep.max_error < 1e-4


def test_linear_layer_machine_precision():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((4, 3))
    assert grad_check(lambda x: ops.total(ops.dense(x, Tensor(w))), {"x": rng.standard_normal((2, 4))}).max_error < 1e-9


def test_every_op_passes_gradcheck():
    reports = check_ops()
    assert len(reports) == len(op_cases())
    failed = [(r.name, r.max_error) for r in reports if not r.passed]
    assert not failed


def test_adjointness():
    for seed in range(3):
        assert adjoint_error(seed) < 1e-5
        assert adjoint_error(seed, shape=(1, 2, 6, 10), c_out=3, k=5) < 1e-5


@pytest.mark.parametrize("h", range(1, 9))
@pytest.mark.parametrize("w", range(1, 9))
@pytest.mark.parametrize("stride", [1, 2])
def test_shape_algebra(h, w, stride):
    x = T(np.ones((1, 2, h, w)))
    ho, wo = output_size(h, 3, stride), output_size(w, 3, stride)
    assert (ho, wo) == (math.ceil(h / stride), math.ceil(w / stride))
    assert ops.conv2d(x, T(np.ones((3, 2, 3, 3))), stride=stride).shape == (1, 3, ho, wo)
    assert ops.depthwise_conv2d(x, T(np.ones((2, 1, 3, 3))), stride=stride).shape == (1, 2, ho, wo)
    for kind in ("avg", "max"):
        assert ops.pool2d(x, kind, 3, stride).shape == (1, 2, ho, wo)
    assert ops.transposed_conv2d(x, T(np.ones((2, 3, 3, 3)))).shape == (1, 3, 2 * h, 2 * w)
    assert ops.nearest_upsample(x).shape == (1, 2, 2 * h, 2 * w)
    assert ops.global_avg_pool(x).shape == (1, 2)
    if h >= 3 and w >= 3:
        assert ops.conv2d(x, T(np.ones((3, 2, 3, 3))), stride=stride, padding="valid").shape == \
            (1, 3, (h - 3) // stride + 1, (w - 3) // stride + 1)


LINEAR = {
    "conv2d": (lambda x, w: ops.conv2d(x, w, stride=2), (2, 3, 7, 6), (4, 3, 3, 3)),
    "transposed_conv2d": (lambda x, w: ops.transposed_conv2d(x, w), (2, 3, 4, 5), (3, 2, 3, 3)),
    "dense": (lambda x, w: ops.dense(x, w), (3, 5), (5, 4)),
    "avg_pool": (lambda x, w: ops.pool2d(x, "avg", 3, 2), (2, 3, 7, 6), None),
    "nearest_upsample": (lambda x, w: ops.nearest_upsample(x), (2, 3, 4, 5), None),
}


@pytest.mark.parametrize("name", sorted(LINEAR))
@given(seed=st.integers(0, 2 ** 31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity(name, seed, a, b):
    fn, xs, ws = LINEAR[name]
    rng = np.random.default_rng(seed)
    w = T(rng.standard_normal(ws)) if ws else None
    x, y = rng.standard_normal(xs), rng.standard_normal(xs)
    lhs = fn(T(a * x + b * y), w).data
    rhs = a * fn(T(x), w).data + b * fn(T(y), w).data
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-8)
    assert np.abs(lhs - rhs).max() / scale <= 1e-6


def test_deterministic_forward():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    w = rng.standard_normal((3, 1, 5, 5)).astype(np.float32)
    a = ops.depthwise_conv2d(Tensor(x), Tensor(w), stride=2).data
    b = ops.depthwise_conv2d(Tensor(x), Tensor(w), stride=2).data
    assert a.tobytes() == b.tobytes()
