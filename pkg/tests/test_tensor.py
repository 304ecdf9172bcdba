import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sanpeft import tensor as T
from sanpeft.errors import ContractError, DimensionError, DomainError, NumericError


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def leaf(x):
    return T.Tensor(x, requires_grad=True)


# -- forward values -----------------------------------------------------------


def test_matmul_identity_and_tiny():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert (T.matmul(np.eye(2), m).data == m).all()
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    assert np.abs(T.matmul(a, b).data - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_examples():
    assert T.mul([2.0, 3.0], [1.0, 1.0]).data.tolist() == [2.0, 3.0]
    out = T.mul([[1.0, 2.0], [3.0, 4.0]], [10.0, 100.0])
    assert out.data.tolist() == [[10.0, 200.0], [30.0, 400.0]]


def test_elementwise_rejects_non_trailing_broadcast():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones(2))
    with pytest.raises(DimensionError):
        T.mul(np.ones(3), np.ones((2, 3)))


def test_softmax_and_relu_examples():
    assert T.softmax([0.0, 0.0]).data.tolist() == [0.5, 0.5]
    assert T.relu([-1.0, 2.0]).data.tolist() == [0.0, 2.0]


def test_softmax_matches_high_precision(backend):
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    z = sum(mpmath.exp(v) for v in xs)
    ref = [float(mpmath.exp(v) / z) for v in xs]
    assert np.abs(T.softmax([1.0, 2.0, 3.0]).data - ref).max() < 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(x).data
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log([1.0, 0.0])


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        T.exp([1000.0])
    with pytest.raises(NumericError):
        T.Tensor([np.nan])


# -- backward -----------------------------------------------------------------


def test_backward_simple_cases():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        T.backward(T.tsum(T.mul(x, 3.0)))
    assert x.grad.tolist() == [6.0, 6.0]
    T.zero_grads([x])
    assert x.grad.tolist() == [0.0, 0.0]


def test_backward_contract_errors():
    with pytest.raises(ContractError):
        T.backward(T.mul(leaf([1.0, 2.0]), 2.0))
    with pytest.raises(ContractError):
        T.backward(T.tsum(T.Tensor([1.0])))


def test_tape_is_topological(rng):
    w = leaf(rng.standard_normal((3, 4)))
    x = T.Tensor(rng.standard_normal((5, 4)))
    loss = T.mean(T.gelu(T.matmul(x, T.transpose(w))))
    tape = T.ComputationTape.from_loss(loss)
    assert tape.is_topological()
    assert tape.nodes[-1] is loss


def test_mul_gradient_is_other_operand(rng):
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    ta = leaf(a)
    T.backward(T.tsum(T.mul(ta, b)))
    num = T.finite_diff_grad(lambda t: T.tsum(T.mul(t, b)), a).data
    assert np.abs(ta.grad - b).max() < 1e-12
    assert np.abs(num - b).max() < 1e-8


def test_finite_diff_examples():
    g = T.finite_diff_grad(T.tsum, np.arange(5.0)).data
    assert np.abs(g - 1.0).max() < 1e-9
    g = T.finite_diff_grad(lambda t: T.tsum(T.mul(t, t)), [3.0]).data
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_propagates_non_finite():
    with pytest.raises(NumericError):
        T.finite_diff_grad(lambda t: float("inf"), [1.0])


def test_mlp_loss_gradients_match_finite_differences(rng):
    x = rng.standard_normal((6, 3))
    labels = rng.integers(0, 2, size=6)
    w1, w2 = leaf(rng.standard_normal((4, 3))), leaf(rng.standard_normal((2, 4)))

    def loss_fn(a, b):
        h = T.gelu(T.matmul(x, T.transpose(a)))
        return T.cross_entropy(T.matmul(h, T.transpose(b)), labels)

    T.backward(loss_fn(w1, w2))
    n1 = T.finite_diff_grad(lambda t: loss_fn(t, w2), w1.data).data
    n2 = T.finite_diff_grad(lambda t: loss_fn(w1, t), w2.data).data
    assert T.relative_error(w1.grad, n1) < 1e-4
    assert T.relative_error(w2.grad, n2) < 1e-4


# Every primitive at 100 random points: analytic vs central differences.
UNARY_CASES = {
    "sum": (T.tsum, lambda r: r.standard_normal(4)),
    "mean": (T.mean, lambda r: r.standard_normal(4)),
    "relu": (T.relu, lambda r: r.standard_normal(4) + np.sign(r.standard_normal(4)) * 0.1),
    "gelu": (T.gelu, lambda r: r.standard_normal(4) * 2),
    "softmax": (T.softmax, lambda r: r.standard_normal((2, 3))),
    "exp": (T.exp, lambda r: r.standard_normal(4)),
    "log": (T.log, lambda r: r.uniform(0.5, 3.0, 4)),
    "normalize": (T.normalize, lambda r: r.standard_normal((2, 5))),
    "transpose": (T.transpose, lambda r: r.standard_normal((2, 3))),
}


@pytest.mark.parametrize("op", sorted(UNARY_CASES))
def test_primitive_gradients_at_100_points(op, backend):
    fn, draw = UNARY_CASES[op]
    r = np.random.default_rng(hash(op) % 2**32)
    for _ in range(100):
        x = draw(r)
        if op == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        probe = r.standard_normal(fn(x).shape)

        def f(t):
            return T.tsum(T.mul(fn(t), probe))

        t = leaf(x)
        T.backward(f(t))
        assert T.relative_error(t.grad, T.finite_diff_grad(f, x).data) < 1e-4, op


@pytest.mark.parametrize("op", ["add", "sub", "mul", "matmul", "cross_entropy"])
def test_binary_gradients_at_100_points(op, backend):
    r = np.random.default_rng(7)
    for _ in range(100):
        if op == "matmul":
            a, b = r.standard_normal((3, 4)), r.standard_normal((4, 2))
            fn = T.matmul
        elif op == "cross_entropy":
            a, y = r.standard_normal((4, 3)) * 3, r.integers(0, 3, size=4)
            b = None
        else:
            a, b = r.standard_normal((3, 4)), r.standard_normal(4)
            fn = getattr(T, op)
        if op == "cross_entropy":
            t = leaf(a)
            T.backward(T.cross_entropy(t, y))
            num = T.finite_diff_grad(lambda s: T.cross_entropy(s, y), a).data
            assert T.relative_error(t.grad, num) < 1e-4
            continue
        probe = r.standard_normal(fn(a, b).shape)
        ta, tb = leaf(a), leaf(b)
        T.backward(T.tsum(T.mul(fn(ta, tb), probe)))
        na = T.finite_diff_grad(lambda s: T.tsum(T.mul(fn(s, b), probe)), a).data
        nb = T.finite_diff_grad(lambda s: T.tsum(T.mul(fn(a, s), probe)), b).data
        assert T.relative_error(ta.grad, na) < 1e-4
        assert T.relative_error(tb.grad, nb) < 1e-4


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(ca, cb, seed):
    r = np.random.default_rng(seed)
    x0, w = r.standard_normal(5), r.standard_normal(5)

    def f(x):
        return T.tsum(T.mul(T.gelu(x), w))

    def g(x):
        return T.mean(T.mul(x, x))

    grads = []
    for build in (f, g, lambda x: T.add(T.mul(f(x), ca), T.mul(g(x), cb))):
        x = leaf(x0)
        T.backward(build(x))
        grads.append(x.grad)
    assert np.abs(grads[2] - (ca * grads[0] + cb * grads[1])).max() < 1e-10


def test_same_ops_same_seed_bitwise(rng):
    def run(seed):
        r = np.random.default_rng(seed)
        w = leaf(r.standard_normal((4, 4)))
        x = r.standard_normal((3, 4))
        loss = T.mean(T.softmax(T.normalize(T.matmul(x, w))))
        T.backward(loss)
        return loss.data.tobytes() + w.grad.tobytes()

    assert run(5) == run(5)


# -- layer-level helpers --------------------------------------------------------


def test_normalize_conventions():
    assert (T.normalize([[2.0, 2.0, 2.0]]).data == 0).all()
    assert T.normalize([[1.0, -1.0]]).data.tolist() == [[1.0, -1.0]]


def test_expand_concat_slice_roundtrip(rng):
    p = leaf(rng.standard_normal((2, 3)))
    x = T.Tensor(rng.standard_normal((4, 5, 3)))
    cat = T.concat([x, T.expand(p, (4,))], axis=1)
    assert cat.shape == (4, 7, 3)
    back = T.slice_axis(cat, 5, 7, axis=1)
    T.backward(T.tsum(back))
    assert (p.grad == 4.0).all()


def test_float32_storage_is_kept():
    t = T.Tensor([1.0, 2.0], dtype=np.float32)
    assert T.mul(t, 2.0).dtype == np.float32
