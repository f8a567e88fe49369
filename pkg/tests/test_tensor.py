import numpy as np
import pytest

from ofa import tensor as T
from ofa.tensor import ContractError, ShapeError, Tensor, finite_diff_grad, relative_error


def _p64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _param(rng, *shape, scale=1.0):
    return _p64(rng.normal(size=shape) * scale)


def _check(build, params, tol=1e-4):
    """AD gradient of sum(build() * fixed random weights) against central differences."""
    with T.default_dtype(np.float64):
        out = build()
        w = np.random.default_rng(99).normal(size=out.shape)

        def loss():
            return T.sum_(build() * w)

        for p in params:
            p.zero_grad()
        loss().backward()
        ad = [p.grad.copy() for p in params]
        fd = finite_diff_grad(lambda: loss().item(), params)
    for a, f in zip(ad, fd):
        assert relative_error(a, f) < tol


def test_fd_oracle_on_square():
    th = _p64([3.0])
    (g,) = finite_diff_grad(lambda: float((th.data**2).sum()), [th], h=1e-4)
    assert abs(g[0] - 6.0) <= 1e-6
    a = _p64([1.0, -2.0])
    (g,) = finite_diff_grad(lambda: float(3 * a.data[0] - 5 * a.data[1]), [a])
    np.testing.assert_allclose(g, [3.0, -5.0], atol=1e-9)


def test_fd_requires_float64():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda: 0.0, [Tensor(np.zeros(2, np.float32), requires_grad=True)])


def test_simple_gradients():
    w = T.parameter(np.array([1.0, 2.0, 3.0]))
    T.sum_(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones(3))
    w.zero_grad()
    T.sum_(w * w).backward()
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_backward_needs_scalar():
    w = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        (w * 2).backward()


def test_forward_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])
    ln = T.layer_norm(Tensor(np.full((1, 5), 3.0)))
    np.testing.assert_allclose(ln.data, 0.0, atol=1e-12)
    a = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(T.matmul(Tensor(np.eye(4)), Tensor(a)).data, a)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).normal(size=(20, 7)) * 30)
    s = T.softmax(x).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_dropout_p0_identity():
    x = T.parameter(np.random.default_rng(0).normal(size=(3, 4)))
    y = T.dropout(x, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(y.data, x.data)
    T.sum_(y * 2.0).backward()
    np.testing.assert_array_equal(x.grad, np.full((3, 4), 2.0))


def test_dropout_scales_kept_units():
    x = Tensor(np.ones((200, 200)))
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    kept = y[y > 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    assert abs((y > 0).mean() - 0.75) < 0.01


R = np.random.default_rng(7)


@pytest.mark.parametrize(
    "name",
    ["add_bcast", "mul", "div", "power", "exp", "log", "gelu", "matmul3d", "sum_axis", "mean", "reshape_transpose",
     "getitem", "fancy_index", "concat", "embedding", "softmax", "log_softmax", "layer_norm"],
)
def test_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a, b = _param(rng, 3, 4), _param(rng, 4)
    pos = _p64(rng.uniform(0.5, 2.0, size=(3, 4)))
    builds = {
        "add_bcast": (lambda: a + b, [a, b]),
        "mul": (lambda: a * b, [a, b]),
        "div": (lambda: a / pos, [a, pos]),
        "power": (lambda: T.power(pos, 3.0), [pos]),
        "exp": (lambda: T.exp(a), [a]),
        "log": (lambda: T.log(pos), [pos]),
        "gelu": (lambda: T.gelu(a), [a]),
        "sum_axis": (lambda: T.sum_(a, axis=0, keepdims=True), [a]),
        "mean": (lambda: T.mean(a, axis=-1), [a]),
        "reshape_transpose": (lambda: T.transpose(T.reshape(a, (2, 6)), (1, 0)), [a]),
        "getitem": (lambda: a[1:, ::2], [a]),
        "fancy_index": (lambda: a[np.array([0, 2, 2])], [a]),
        "concat": (lambda: T.concat([a, pos], axis=1), [a, pos]),
        "softmax": (lambda: T.softmax(a), [a]),
        "log_softmax": (lambda: T.log_softmax(a), [a]),
    }
    if name == "matmul3d":
        x, y = _param(rng, 2, 3, 4), _param(rng, 4, 5)
        builds[name] = (lambda: x @ y, [x, y])
    if name == "embedding":
        table = _param(rng, 6, 3)
        ids = np.array([[0, 5, 5], [2, 0, 1]])
        builds[name] = (lambda: T.embedding(table, ids), [table])
    if name == "layer_norm":
        x, g, bb = _param(rng, 3, 5), _param(rng, 5), _param(rng, 5)
        builds[name] = (lambda: T.layer_norm(x, g, bb), [x, g, bb])
    build, params = builds[name]
    _check(build, params)


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
@pytest.mark.parametrize("masked", [False, True])
def test_cross_entropy_gradient(smoothing, masked):
    rng = np.random.default_rng(3)
    logits = _param(rng, 2, 3, 6)
    tgt = np.array([[1, 4, 2], [0, 2, 2]])  # 2 is the ignore index
    allowed = None
    if masked:
        allowed = np.ones((2, 3, 6), bool)
        allowed[0, 1, [0, 5]] = False
    with T.default_dtype(np.float64):
        def f():
            return T.cross_entropy_logits(logits, tgt, smoothing, ignore_index=2, allowed=allowed)

        logits.zero_grad()
        f().backward()
        (fd,) = finite_diff_grad(lambda: f().item(), [logits])
    assert relative_error(logits.grad, fd) < 1e-4
    # ignored positions get no gradient
    assert np.abs(logits.grad[1, 1:]).max() == 0.0


def test_no_grad_builds_no_graph():
    w = T.parameter(np.ones(3))
    with T.no_grad():
        y = w * 2.0
    assert not y.requires_grad


def test_default_dtype_context():
    with T.default_dtype(np.float64):
        assert T.as_tensor([1.0]).dtype == np.float64
        assert T.parameter([1.0]).dtype == np.float64
    assert T.as_tensor([1.0]).dtype == np.float32
