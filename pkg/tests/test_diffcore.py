import numpy as np
import pytest

from dgptransport import diffcore as dc


def fd_grad(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_matmul_identity():
    A = np.random.default_rng(0).standard_normal((3, 4))
    out = dc.matmul(np.eye(3), A)
    np.testing.assert_array_equal(out.data, A)


def test_cholesky_diagonal():
    L = dc.cholesky(np.diag([4.0, 9.0]), jitter=0.0)
    np.testing.assert_allclose(L.data, np.diag([2.0, 3.0]))


def test_logsumexp_two_zeros():
    assert abs(float(dc.logsumexp(np.zeros(2)).data) - np.log(2)) < 1e-12


def test_square_grad():
    x = dc.tensor(3.0, requires_grad=True)
    (g,) = dc.grad(dc.square(x), [x])
    assert float(g) == 6.0


def test_trace_grad_is_identity():
    A = dc.tensor(np.random.default_rng(1).standard_normal((4, 4)), requires_grad=True)
    (g,) = dc.grad(dc.sum(dc.diagonal(A)), [A])
    np.testing.assert_array_equal(g, np.eye(4))


def gaussian_logpdf(K, y):
    L = dc.cholesky(K)
    a = dc.solve_triangular(L, y)
    n = y.shape[0]
    return -0.5 * dc.sum(dc.square(a)) - dc.sum(dc.log(dc.diagonal(L))) - 0.5 * n * np.log(2 * np.pi)


def test_cholesky_logdensity_grad_matches_fd():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((4, 4))
    # K = S + S^T keeps every perturbation symmetric
    S0 = 0.5 * (B @ B.T) + 2 * np.eye(4)
    y = rng.standard_normal(4)
    S = dc.tensor(S0, requires_grad=True)
    (g,) = dc.grad(gaussian_logpdf(S + dc.transpose(S), y), [S])
    num = fd_grad(lambda v: float(gaussian_logpdf(dc.tensor(v + v.T), y).data), S0)
    assert rel_err(g, num) < 1e-4


@pytest.mark.parametrize("op", [dc.exp, dc.tanh, dc.sigmoid, dc.softplus, dc.silu, dc.dsilu,
                                dc.square, lambda t: dc.log(dc.exp(t) + 1.0),
                                lambda t: dc.sqrt(dc.square(t) + 1.0)])
def test_unary_ops_fd(op):
    x0 = np.random.default_rng(3).standard_normal((3, 2))
    x = dc.tensor(x0, requires_grad=True)
    w = np.random.default_rng(4).standard_normal((3, 2))
    (g,) = dc.grad(dc.sum(op(x) * w), [x])
    num = fd_grad(lambda v: float(dc.sum(op(dc.tensor(v)) * w).data), x0)
    assert rel_err(g, num) < 1e-6


def test_binary_broadcast_and_structural_ops_fd():
    rng = np.random.default_rng(5)
    a0, b0 = rng.standard_normal((2, 3, 4)), rng.uniform(1, 2, (3, 1))

    def f(a, b):
        t = dc.div(dc.mul(a, b), b + 1.0) - a ** 2
        t = dc.concat([t, dc.transpose(dc.reshape(a, (2, 4, 3)))], axis=0)
        t = dc.getitem(t, (slice(None), slice(0, 2)))
        return dc.mean(dc.logsumexp(t, axis=-1)) + dc.sum(dc.broadcast_to(b, (2, 3, 4)) * 0.1)

    a, b = dc.tensor(a0, requires_grad=True), dc.tensor(b0, requires_grad=True)
    ga, gb = dc.grad(f(a, b), [a, b])
    assert rel_err(ga, fd_grad(lambda v: float(f(dc.tensor(v), b0).data), a0)) < 1e-6
    assert rel_err(gb, fd_grad(lambda v: float(f(a0, dc.tensor(v)).data), b0)) < 1e-6


def test_batched_matmul_and_triangular_solve_fd():
    rng = np.random.default_rng(6)
    A0 = rng.standard_normal((2, 3, 4))
    B0 = rng.standard_normal((4, 5))
    L0 = np.tril(rng.standard_normal((3, 3))) + 3 * np.eye(3)
    c0 = rng.standard_normal((3, 2))

    def f(A, B, L, c):
        return dc.sum(dc.square(dc.matmul(A, B))) + dc.sum(dc.solve_triangular(L, c, trans=True) ** 3)

    ts = [dc.tensor(v, requires_grad=True) for v in (A0, B0, L0, c0)]
    grads = dc.grad(f(*ts), ts)
    for i, (g, v0) in enumerate(zip(grads, (A0, B0, L0, c0))):
        def fi(v, i=i):
            args = [A0, B0, L0, c0]
            args[i] = v
            return float(f(*[dc.tensor(a) for a in args]).data)
        num = fd_grad(fi, v0)
        if i == 2:
            num = np.tril(num)
        assert rel_err(g, num) < 1e-6


def test_clip_min_passes_gradient_only_above_floor():
    x = dc.tensor(np.array([-1.0, 2.0]), requires_grad=True)
    (g,) = dc.grad(dc.sum(dc.clip_min(x, 0.0)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_backward_repeatable_bit_identical():
    rng = np.random.default_rng(7)
    x = dc.tensor(rng.standard_normal((5, 5)), requires_grad=True)

    def loss():
        return dc.sum(dc.tanh(x @ x) * x)

    g1 = dc.grad(loss(), [x])[0]
    g2 = dc.grad(loss(), [x])[0]
    assert np.array_equal(g1, g2)


def test_graph_parents_precede_children():
    x = dc.tensor(np.ones(3), requires_grad=True)
    y = dc.exp(x) * x + x
    g = dc.trace(dc.sum(y))
    for i, parents in enumerate(g.parents):
        assert all(p < i for p in parents)
    assert sum(g.trainable) == 1


def test_shape_mismatch_raises():
    with pytest.raises(dc.DimensionError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(dc.DimensionError):
        dc.add(np.ones((2, 3)), np.ones((3, 2)))


def test_cholesky_failure_raises():
    with pytest.raises(dc.DecompositionError):
        dc.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_non_scalar_backward_rejected():
    x = dc.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.UsageError):
        dc.backward(x * 2.0)


def test_non_finite_detected():
    with pytest.raises(dc.NonFiniteError):
        dc.log(dc.tensor(np.array([-1.0]), requires_grad=True))
    prev = dc.set_finite_check(False)
    try:
        with np.errstate(invalid="ignore"):
            out = dc.log(dc.tensor(np.array([-1.0])))
        assert np.isnan(out.data[0])
    finally:
        dc.set_finite_check(prev)
