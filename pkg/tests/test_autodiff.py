"""Gradient checks for every engine op against central finite differences."""

import numpy as np
import pytest

from hig import tensor as T
from hig.tensor import DiffArray

from conftest import check_grads

N_TRIALS = 100


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# (name, builder) pairs; builder(rng) -> (fn, input arrays)
def _unary(op, transform=None):
    def build(rng):
        x = _rand(rng, 4, 3)
        if transform is not None:
            x = transform(x)
        return (lambda a: op(a[0])), [x]

    return build


def _binary(op):
    def build(rng):
        x = _rand(rng, 4, 3)
        y = _rand(rng, 4, 3)
        return (lambda a: op(a[0], a[1])), [x, y]

    return build


def _broadcast_binary(op):
    def build(rng):
        x = _rand(rng, 4, 3)
        y = _rand(rng, 1, 3)
        return (lambda a: op(a[0], a[1])), [x, y]

    return build


def _matmul(rng):
    return (lambda a: T.matmul(a[0], a[1])), [_rand(rng, 3, 4), _rand(rng, 4, 2)]


def _sum_axis(rng):
    return (lambda a: T.sum_(a[0], axis=1)), [_rand(rng, 4, 3)]


def _mean_axis(rng):
    return (lambda a: T.mean(a[0], axis=(0, 1), keepdims=True)), [_rand(rng, 4, 3)]


def _reshape(rng):
    return (lambda a: T.reshape(a[0], (6, 2))), [_rand(rng, 4, 3)]


def _transpose(rng):
    return (lambda a: T.transpose(a[0], (1, 0))), [_rand(rng, 4, 3)]


def _concat(rng):
    return (lambda a: T.concat([a[0], a[1]], axis=1)), [
        _rand(rng, 3, 2),
        _rand(rng, 3, 4),
    ]


def _take(rng):
    idx = np.array([0, 2, 2, 1, 3])
    return (lambda a: T.take_rows(a[0], idx)), [_rand(rng, 4, 3)]


def _segment(rng):
    ids = np.array([0, 0, 2, 2, 2, 4])
    return (lambda a: T.segment_sum(a[0], ids, 5)), [_rand(rng, 6, 3)]


def _where(rng):
    mask = rng.random((4, 3)) > 0.5
    return (lambda a: T.where_mask(mask, a[0], a[1])), [
        _rand(rng, 4, 3),
        _rand(rng, 4, 3),
    ]


def _conv(rng):
    return (lambda a: T.conv2d(a[0], a[1], pad=1)), [
        _rand(rng, 1, 3, 3, 2),
        _rand(rng, 3, 3, 2, 2),
    ]


def _pool(rng):
    return (lambda a: T.avg_pool2(a[0])), [_rand(rng, 2, 4, 4, 2)]


def _upsample(rng):
    return (lambda a: T.upsample2(a[0])), [_rand(rng, 2, 2, 2, 2)]


OPS = {
    "add": _binary(T.add),
    "add_broadcast": _broadcast_binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_broadcast": _broadcast_binary(T.mul),
    "div": _binary(lambda a, b: T.div(a, b)),
    "power": _unary(lambda a: T.power(a, 3.0)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, transform=lambda x: np.abs(x) + 0.5),
    "sqrt": _unary(T.sqrt, transform=lambda x: np.abs(x) + 0.5),
    "sigmoid": _unary(T.sigmoid),
    "silu": _unary(T.silu),
    "sum_axis": _sum_axis,
    "mean_axis": _mean_axis,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "take_rows": _take,
    "segment_sum": _segment,
    "where_mask": _where,
    "conv2d": _conv,
    "avg_pool2": _pool,
    "upsample2": _upsample,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    build = OPS[name]
    trials = N_TRIALS if name not in ("conv2d",) else 25
    for _ in range(trials):
        fn, arrays = build(rng)
        # div needs inputs away from zero
        if name == "div":
            arrays[1] = np.sign(arrays[1]) * (np.abs(arrays[1]) + 0.5)
        check_grads(fn, arrays, rng)


def test_backward_without_forward_raises():
    x = DiffArray(np.ones(3))
    with pytest.raises(RuntimeError):
        x.backward()


def test_backward_accumulates_through_shared_nodes(rng):
    x = DiffArray(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    z = y + y  # y used twice
    z.backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_shape_matches_value_shape(rng):
    x = DiffArray(rng.standard_normal((3, 5)), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.shape == x.values.shape


def test_constant_branches_record_nothing(rng):
    x = DiffArray(rng.standard_normal((3,)))
    y = x * 2.0 + 1.0
    assert y._parents == ()


def test_float32_mode_preserved(rng):
    x = DiffArray(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
    out = T.silu(x * 0.5) + 1.0
    assert out.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((64, 16))
    idx = rng.integers(0, 64, size=200)
    ids = np.sort(rng.integers(0, 16, size=200))

    def run():
        a = DiffArray(x, requires_grad=True)
        out = T.segment_sum(T.take_rows(T.silu(a), idx), ids, 16)
        out.backward(np.ones(out.shape))
        return out.values.copy(), a.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


def test_segment_sum_handles_empty_segments(rng):
    x = DiffArray(np.ones((3, 2)))
    ids = np.array([1, 1, 3])
    out = T.segment_sum(x, ids, 5)
    assert np.array_equal(out.values[:, 0], [0, 2, 0, 1, 0])


def test_compensated_segment_sum_matches_plain(rng):
    x = rng.standard_normal((50, 4))
    ids = np.sort(rng.integers(0, 10, size=50))
    a = T.segment_sum(DiffArray(x), ids, 10).values
    b = T.segment_sum_compensated(DiffArray(x), ids, 10).values
    assert np.allclose(a, b, atol=1e-12)
