import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from minibert import tensor as T
from minibert.tensor import DegenerateSoftmaxError, Tensor, backward, no_grad

from gradcheck import check


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    expect = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                expect[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


def test_softmax_against_formula_and_mask_zero():
    row = [0.5, -1.0, 2.0, -math.inf]
    z = sum(math.exp(v) for v in row[:3])
    expect = [math.exp(v) / z for v in row[:3]] + [0.0]
    got = T.softmax(Tensor(np.array([row]), dtype=np.float64)).data[0]
    np.testing.assert_allclose(got, expect, rtol=1e-12)
    assert got[3] == 0.0


def test_softmax_large_logits_stable():
    out = T.softmax(Tensor(np.array([[1000.0, 1000.0]]), dtype=np.float64)).data
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


def test_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateSoftmaxError):
        T.softmax(Tensor(np.array([[0.0, 1.0], [-np.inf, -np.inf]])))


@pytest.mark.parametrize("x", [-3.0, -0.7, 0.0, 0.3, 1.5, 4.0])
def test_gelu_matches_quadrature(x):
    phi, _ = quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -math.inf, x)
    got = float(T.gelu(Tensor(np.array([x]), dtype=np.float64)).data[0])
    assert got == pytest.approx(x * phi, abs=1e-10)


def test_layer_norm_against_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5))
    g = rng.standard_normal(5)
    b = rng.standard_normal(5)
    expect = np.zeros_like(x)
    for r in range(2):
        mu = sum(x[r]) / 5
        var = sum((v - mu) ** 2 for v in x[r]) / 5
        for c in range(5):
            expect[r, c] = (x[r, c] - mu) / math.sqrt(var + 1e-12) * g[c] + b[c]
    got = T.layer_norm(*(Tensor(a, dtype=np.float64) for a in (x, g, b))).data
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-12)


def test_cross_entropy_against_logsumexp_and_ignore():
    logits = np.array([[1.0, 2.0, 0.5], [0.1, -0.3, 0.9], [3.0, 3.0, 3.0]])
    targets = [1, -100, 2]
    rows = [(0, 1), (2, 2)]
    expect = sum(math.log(sum(math.exp(v) for v in logits[r])) - logits[r, t] for r, t in rows) / 2
    got = float(T.cross_entropy(Tensor(logits, dtype=np.float64), targets).data)
    assert got == pytest.approx(expect, rel=1e-12)


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [-100, -100])


def test_dropout_statistics_and_identity():
    x = Tensor(np.ones((200, 500)))
    rng = np.random.default_rng(0)
    y = T.dropout(x, 0.1, True, rng).data
    kept = y != 0
    # n = 1e5, sd of the kept fraction is ~0.00095
    assert abs(kept.mean() - 0.9) < 0.005
    np.testing.assert_allclose(y[kept], 1 / 0.9, rtol=1e-6)
    assert T.dropout(x, 0.1, False, None) is x
    assert T.dropout(x, 0.0, True, rng) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, rng)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        b = (a * 2).sum()
    assert not b.requires_grad
    assert not b._parents


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(a * 2)


def test_getitem_repeated_index_accumulates():
    a = Tensor(np.arange(4.0), requires_grad=True, dtype=np.float64)
    backward(a[np.array([1, 1, 3])].sum())
    np.testing.assert_array_equal(a.grad, [0, 2, 0, 1])


def test_shared_subexpression_accumulates():
    a = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    b = a * a
    backward((b + b).sum())
    np.testing.assert_array_equal(a.grad, [12.0])


def test_gradients_bitwise_repeatable():
    rng = np.random.default_rng(2)
    w = rand(rng, 6, 6)
    x = rand(rng, 4, 6, grad=False)

    def loss():
        h = T.gelu(x @ w)
        return T.layer_norm(h, Tensor(np.ones(6), dtype=np.float64), Tensor(np.zeros(6), dtype=np.float64)).sum()

    w.grad = None
    backward(loss())
    first = w.grad.copy()
    w.grad = None
    backward(loss())
    assert first.tobytes() == w.grad.tobytes()


OPS = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "pow": lambda a, b: ((a * a + 1.0) ** 1.5).sum(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "softmax": lambda a, b: (T.softmax(a, -1) * b).sum(),
    "log_softmax": lambda a, b: (T.log_softmax(a, -1) * b).sum(),
    "gelu": lambda a, b: (T.gelu(a) * b).sum(),
    "tanh": lambda a, b: (T.tanh(a) * b).sum(),
    "sigmoid": lambda a, b: (T.sigmoid(a) * b).sum(),
    "exp_log": lambda a, b: T.log(T.exp(a) + 1.0).sum() + (b * 0.5).sum(),
    "layer_norm": lambda a, b: (T.layer_norm(a, b[0], b[1]) * a).sum(),
    "mean_transpose": lambda a, b: (a.transpose(1, 0) * b.T).mean(),
    "concat_stack": lambda a, b: (T.concat([a, b], -1).sum(axis=0) * T.stack([a[0], b[1]]).sum(axis=0)[0]).sum(),
    "swap_reshape": lambda a, b: (a.reshape(3, 2, 2).swapaxes(0, 1) * b.reshape(2, 3, 2)).sum(),
    "cross_entropy": lambda a, b: T.cross_entropy(a @ b.T, [0, 2, -100]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operator_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    assert check(lambda: OPS[name](a, b), [a, b]) == {}


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 30
    out = T.softmax(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
    assert (out >= 0).all()
