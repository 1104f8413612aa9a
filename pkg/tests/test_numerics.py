import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qta import numerics as nx
from qta.numerics import NonFiniteError, Rng, Tensor, dft_naive, fft1, grad_check, ifft1


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), m).data, m)
    assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]
    out = nx.matmul(np.zeros((2, 3)), np.arange(12.0).reshape(3, 4))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_examples():
    assert nx.elementwise([1.0, 2, 3], [1.0, 1, 1], "mul").data.tolist() == [1, 2, 3]
    assert nx.elementwise([1.0, 2], [3.0, 4], "mul").data.tolist() == [3, 8]
    assert nx.elementwise([1.0, -1], [-1.0, 1], "add").data.tolist() == [0, 0]
    with pytest.raises(ValueError):
        nx.elementwise([1.0, 2], [1.0, 2, 3], "add")


def test_fft_impulse_and_constant():
    assert np.allclose(fft1([1, 0, 0, 0]), [1, 1, 1, 1], atol=0)
    assert np.allclose(fft1([1, 1, 1, 1]), [4, 0, 0, 0], atol=1e-15)


def test_fft_round_trip_length_12():
    g = np.random.default_rng(12)
    x = g.normal(size=12) + 1j * g.normal(size=12)
    assert np.abs(ifft1(fft1(x)) - x).max() / np.abs(x).max() < 1e-9


def test_fft_zero_length():
    with pytest.raises(ValueError):
        fft1([])


@settings(max_examples=64, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_fft_matches_direct_dft(n, seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=n) + 1j * g.normal(size=n)
    ref = dft_naive(x)
    assert np.abs(fft1(x) - ref).max() <= 1e-9 * max(1.0, np.abs(ref).max())
    assert np.abs(ifft1(fft1(x)) - x).max() <= 1e-9 * max(1.0, np.abs(x).max())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_fft_linearity(n, a, b, seed):
    g = np.random.default_rng(seed)
    x, y = g.normal(size=n), g.normal(size=n)
    lhs = fft1(a * x + b * y)
    rhs = a * fft1(x) + b * fft1(y)
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(rhs).max())


def test_softmax_relu_examples():
    assert nx.softmax([0.0, 0.0]).data.tolist() == [0.5, 0.5]
    assert nx.relu([-1.0, 2.0]).data.tolist() == [0.0, 2.0]
    assert nx.softmax([1000.0, 1000.0]).data.tolist() == [0.5, 0.5]


@given(st.lists(st.floats(-500, 500), min_size=1, max_size=20))
def test_softmax_sums_to_one(xs):
    assert abs(nx.softmax(xs).data.sum() - 1.0) <= 1e-12


def test_sigmoid_extremes_finite():
    y = nx.sigmoid([-1000.0, 0.0, 1000.0]).data
    assert y.tolist() == [0.0, 0.5, 1.0]


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        nx.mul([1e200], [1e200])


def test_op_outputs_are_read_only():
    out = nx.add([1.0], [2.0])
    with pytest.raises(ValueError):
        out.data[0] = 5.0


def test_grad_check_sum_of_squares():
    p = Tensor([1.0, 2.0], requires_grad=True)
    assert grad_check(lambda: nx.sum(nx.mul(p, p)), p, 1e-5) < 1e-8


def test_grad_check_softmax_cross_entropy():
    g = np.random.default_rng(3)
    W = Tensor(g.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(g.normal(size=3), requires_grad=True)
    x = g.normal(size=(5, 4))
    onehot = np.eye(3)[[0, 2, 1, 1, 0]]

    def fn():
        p = nx.softmax(nx.add(nx.matmul(x, W), b))
        return nx.mul(nx.sum(nx.log(nx.sum(nx.mul(p, onehot), axis=-1))), -1.0)

    assert grad_check(fn, [W, b], 1e-5) < 1e-6


def test_grad_check_constant():
    p = Tensor([1.0, 2.0], requires_grad=True)
    assert grad_check(lambda: Tensor(3.0), p, 1e-5) == 0.0
    assert nx.gradients(Tensor(3.0), [p])[0].tolist() == [0.0, 0.0]


def test_grad_check_rejects_bad_eps():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: nx.sum(p), p, 0.0)


def _primitive_losses(g):
    a = Tensor(g.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(g.normal(size=(3, 4)), requires_grad=True)
    v = Tensor(g.normal(size=4), requires_grad=True)
    m = Tensor(g.normal(size=(4, 2)), requires_grad=True)
    table = Tensor(g.normal(size=(5, 4)), requires_grad=True)
    w = g.normal(size=(3, 4))
    weights = {}

    def proj(t):
        if t.shape not in weights:
            weights[t.shape] = g.normal(size=t.shape)
        return nx.sum(nx.mul(t, weights[t.shape]))

    return {
        "add": (lambda: nx.sum(nx.mul(nx.add(a, b), w)), [a, b]),
        "sub": (lambda: nx.sum(nx.mul(nx.sub(a, b), w)), [a, b]),
        "mul": (lambda: nx.sum(nx.mul(nx.mul(a, b), w)), [a, b]),
        "bias": (lambda: nx.sum(nx.mul(nx.add(a, v), w)), [a, v]),
        "matmul": (lambda: nx.sum(nx.matmul(a, m)), [a, m]),
        "relu": (lambda: nx.sum(nx.mul(nx.relu(a), w)), [a]),
        "sigmoid": (lambda: nx.sum(nx.mul(nx.sigmoid(a), w)), [a]),
        "tanh": (lambda: nx.sum(nx.mul(nx.tanh(a), w)), [a]),
        "softplus": (lambda: nx.sum(nx.mul(nx.softplus(a), w)), [a]),
        "softmax": (lambda: nx.sum(nx.mul(nx.softmax(a), w)), [a]),
        "log": (lambda: nx.sum(nx.log(nx.softplus(a))), [a]),
        "mean": (lambda: proj(nx.mean(nx.mul(a, b), axis=0)), [a, b]),
        "reshape": (lambda: proj(nx.reshape(a, (4, 3))), [a]),
        "transpose": (lambda: proj(nx.transpose(a, (1, 0))), [a]),
        "concat": (lambda: proj(nx.concat([a, b], axis=-1)), [a, b]),
        "columns": (lambda: proj(nx.columns(a, 1, 3)), [a]),
        "take_rows": (lambda: proj(nx.take_rows(table, [[0, 3], [3, 3]])), [table]),
        "take_columns": (lambda: proj(nx.take_columns(m, [1, 1, 0])), [m]),
    }


@pytest.mark.parametrize("name", sorted(_primitive_losses(np.random.default_rng(0))))
def test_every_primitive_passes_grad_check(name):
    fn, params = _primitive_losses(np.random.default_rng(7))[name]
    assert grad_check(fn, params, 1e-5) < 1e-4


def test_shared_subgraph_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = Tensor([-4.0], requires_grad=True)
    q = nx.sum(nx.mul(nx.add(x, y), nx.add(x, 1.0)))
    gx, gy = nx.gradients(q, [x, y])
    assert gx.tolist() == [1.0] and gy.tolist() == [3.0]


def test_backward_sets_leaf_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.sum(nx.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_rng_split_determinism():
    a = Rng(5).split("data", 3).generator().normal(size=4)
    b = Rng(5).split("data", 3).generator().normal(size=4)
    c = Rng(5).split("data", 4).generator().normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_ops_are_bit_deterministic():
    def run():
        g = Rng(1).split("det").generator()
        x = Tensor(g.normal(size=(4, 6)))
        w = Tensor(g.normal(size=(6, 3)))
        return nx.softmax(nx.tanh(nx.matmul(x, w))).data

    assert run().tobytes() == run().tobytes()
