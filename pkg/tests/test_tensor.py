import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oktransformer.errors import ContractError, ShapeError
from oktransformer.tensor import (
    _record,
    roundoff_bound,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    div,
    dropout,
    exp,
    finite_diff_check,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    stack,
    sub,
    swapaxes,
    take_rows,
    tanh,
    transpose,
    tsum,
)


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def gelu_reference(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_annihilating(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_matches_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2 ** 31))
    def test_associativity_vs_loop(self, m, k, n, p, seed):
        r = np.random.default_rng(seed)
        a, b, c = r.normal(size=(m, k)), r.normal(size=(k, n)), r.normal(size=(n, p))
        left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        oracle = loop_matmul(loop_matmul(a, b), c)
        np.testing.assert_allclose(left, oracle, atol=1e-12 * max(1.0, np.abs(oracle).max()), rtol=0)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_matches_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax(Tensor(x)).data, np.exp(x) / np.exp(x).sum(), rtol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-1e3, 1e3)), st.integers(0, 1))
    def test_rows_sum_to_one(self, x, axis):
        y = softmax(Tensor(x), axis=axis).data
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-10)
        assert np.all(y >= 0) and np.all(y <= 1)

    def test_log_softmax_consistent(self, rng):
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data), softmax(Tensor(x)).data, atol=1e-14)


class TestLayerNorm:
    def test_constant_vector(self):
        out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_normalized_pair(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-10)

    def test_moments(self, rng):
        x = rng.normal(3.0, 5.0, size=(7, 10))
        out = layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10))).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-10
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-10)

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = gelu(Tensor([20.0, -20.0])).data
        assert abs(out[0] - 20.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_one_matches_formula(self):
        assert abs(gelu(Tensor([1.0])).data[0] - gelu_reference(1.0)) < 1e-15


class TestCrossEntropy:
    def test_confident_correct(self):
        assert cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() < 1e-8

    def test_uniform(self):
        assert abs(cross_entropy(Tensor([[0.0, 0.0]]), [1]).item() - math.log(2)) < 1e-15

    def test_matches_logsumexp(self, rng):
        z = rng.normal(size=(6, 4)) * 3
        y = rng.integers(0, 4, size=6)
        ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(z, y)])
        assert abs(cross_entropy(Tensor(z), y).item() - ref) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_dot(self, rng):
        xv, yv = rng.normal(size=4), rng.normal(size=4)
        x, y = Tensor(xv, requires_grad=True), Tensor(yv, requires_grad=True)
        backward(tsum(mul(x, y)))
        np.testing.assert_array_equal(x.grad, yv)
        np.testing.assert_array_equal(y.grad, xv)

    def test_reuse_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        backward(tsum(add(mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(mul(x, 2.0))

    def test_second_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = tsum(mul(x, x))
        backward(loss)
        first = x.grad.copy()
        with pytest.raises(ContractError):
            backward(loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, 2.0)
        assert not y.requires_grad and y.tape is None

    def test_mixed_tapes_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            a = mul(x, 2.0)
        with Tape():
            b = mul(x, 3.0)
        with pytest.raises(ContractError):
            add(a, b)


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0])
        err = finite_diff_check(lambda t: tsum(mul(t, t)), x)
        assert err < 1e-8

    def test_softmax_pick(self, rng):
        x = Tensor(rng.normal(size=5))
        assert finite_diff_check(lambda t: getitem(softmax(t), 2), x) < 1e-6

    def test_layer_norm_composite(self, rng):
        g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        w = Tensor(rng.normal(size=(3, 4)))
        x = Tensor(rng.normal(size=(3, 4)))
        assert finite_diff_check(lambda t: tsum(mul(layer_norm(t, g, b), w)), x) < 1e-5

    def test_detects_wrong_backward(self, rng):
        def bad_square(t):
            return _record("bad", t.data ** 2, (t,), lambda g: (g * t.data,))

        assert finite_diff_check(lambda t: tsum(bad_square(t)), Tensor(rng.normal(size=6))) > 0.4

    def test_roundoff_bound_scales_with_value(self):
        assert roundoff_bound(100.0, 1e-5) == pytest.approx(100 * roundoff_bound(0.5, 1e-5))

    def test_nondeterministic_rejected(self):
        r = np.random.default_rng(0)
        with pytest.raises(ContractError):
            finite_diff_check(lambda t: tsum(dropout(t, 0.5, r)), Tensor(np.linspace(1.0, 2.0, 64)))


UNARY = {
    "exp": lambda t, r: exp(t),
    "log": lambda t, r: log(add(mul(t, t), 1.0)),
    "tanh": lambda t, r: tanh(t),
    "gelu": lambda t, r: gelu(t),
    "softmax": lambda t, r: softmax(t, axis=-1),
    "log_softmax": lambda t, r: log_softmax(t, axis=0),
    "layer_norm": lambda t, r: layer_norm(t, Tensor(r.normal(size=4)), Tensor(r.normal(size=4))),
    "reshape": lambda t, r: reshape(t, (4, 3)),
    "transpose": lambda t, r: transpose(t),
    "swapaxes": lambda t, r: swapaxes(t, 0, 1),
    "mean": lambda t, r: mean(t, axis=1, keepdims=True),
    "getitem": lambda t, r: getitem(t, (np.array([0, 2, 2]), np.array([1, 1, 3]))),
    "take_rows": lambda t, r: take_rows(t, np.array([[0, 2], [2, 1]])),
    "concat": lambda t, r: concat([t, mul(t, 2.0)], axis=1),
    "stack": lambda t, r: stack([t, exp(t)], axis=0),
    "div": lambda t, r: div(t, add(mul(t, t), 2.0)),
    "sub": lambda t, r: sub(Tensor(r.normal(size=(3, 4))), t),
    "matmul_left": lambda t, r: matmul(t, Tensor(r.normal(size=(4, 2)))),
    "matmul_right": lambda t, r: matmul(Tensor(r.normal(size=(5, 3))), t),
    "batched_matmul": lambda t, r: matmul(Tensor(r.normal(size=(2, 4, 3))), reshape(t, (1, 3, 4))),
    "cross_entropy": lambda t, r: cross_entropy(t, [1, 0, 3]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_random_inputs(name, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-1, 1, size=(3, 4)))
    probe = r.normal(size=UNARY[name](x, np.random.default_rng(seed)).shape)

    def f(t):
        return tsum(mul(UNARY[name](t, np.random.default_rng(seed)), probe))

    assert finite_diff_check(f, x) < 1e-4
