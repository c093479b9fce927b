import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commformer import diffmath as dm
from commformer.diffmath import functional as F
from commformer.errors import DegenerateRowError, EmbeddingIndexError, GradcheckError, ShapeError


def _fd_grad(fn, x, step=1e-5):
    """Central differences of scalar fn(ndarray) at x; independent of the tape."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        g[idx] = (fn(hi) - fn(lo)) / (2 * step)
    return g


def _check_unary(op, x, weights=None, tol=1e-4):
    """Analytic gradient of sum(w * op(x)) against central differences."""
    rng = np.random.default_rng(0)
    t = dm.Tensor(x, requires_grad=True)
    out = op(t)
    w = weights if weights is not None else rng.standard_normal(out.shape)
    (out * w).sum().backward()
    numeric = _fd_grad(lambda v: float(np.sum(op(dm.constant(v)).data * w)), x)
    assert dm.relative_error(t.grad, numeric) < tol


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    out = dm.matmul(dm.Tensor([[1.0, 0.0], [0.0, 1.0]]), dm.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_dot_product():
    out = dm.matmul(dm.Tensor([[1.0, 2.0]]), dm.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_gradient_matches_finite_difference():
    a = dm.Tensor([[1.0, 2.0]], requires_grad=True)
    b = dm.Tensor([[3.0], [4.0]])
    dm.matmul(a, b).sum().backward()
    numeric = _fd_grad(lambda v: float((v @ b.data).sum()), a.data.copy())
    np.testing.assert_allclose(numeric, [[3.0, 4.0]], atol=1e-8)
    np.testing.assert_allclose(a.grad, numeric, atol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        dm.matmul(dm.Tensor(np.ones((2, 3))), dm.Tensor(np.ones((2, 3))))


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    b = rng.standard_normal((2, 3, 4))
    _check_unary(lambda t: dm.matmul(t, dm.constant(b)), rng.standard_normal((2, 5, 3)))
    w = rng.standard_normal((3, 4))
    _check_unary(lambda t: dm.matmul(t, dm.constant(w)), rng.standard_normal((2, 2, 5, 3)))
    a = rng.standard_normal((6, 3))
    _check_unary(lambda t: dm.matmul(dm.constant(a), t), rng.standard_normal((3, 2)))


# -- masked softmax ----------------------------------------------------------


def test_masked_softmax_uniform():
    out = F.masked_softmax(dm.Tensor([0.0, 0.0, 0.0]), np.ones(3))
    np.testing.assert_allclose(out.data, [1 / 3] * 3)


def test_masked_softmax_excludes_masked_max():
    out = F.masked_softmax(dm.Tensor([5.0, 100.0, 5.0]), np.array([1.0, 0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.0, 0.5])


def test_masked_softmax_two_way():
    out = F.masked_softmax(dm.Tensor([1.0, 2.0]), np.ones(2))
    np.testing.assert_allclose(out.data, [0.2689, 0.7311], atol=1e-4)


def test_masked_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        F.masked_softmax(dm.Tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_softmax_exact_zeros_and_gradient(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((3, 4)) * 3
    mask = (rng.random((3, 4)) < 0.5).astype(float)
    mask[:, 0] = 1.0
    out = F.masked_softmax(dm.constant(scores), mask)
    assert np.all(out.data[mask == 0] == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    _check_unary(lambda t: F.masked_softmax(t, mask), scores)


def test_masked_softmax_mask_gradient_matches_relaxation():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((2, 4))
    soft_mask = rng.uniform(0.2, 1.0, (2, 4))
    _check_unary(lambda t: F.masked_softmax(dm.constant(scores), t), soft_mask)


# -- other primitives -------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    for c in (0.0, 3.5, -1e3):
        out = F.layer_norm(dm.Tensor([c, c, c]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])


def test_gelu_zero():
    assert F.gelu(dm.Tensor([0.0])).data[0] == 0.0


def test_embedding_lookup_selects_row():
    table = dm.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(F.embedding_lookup(table, 1).data, [3.0, 4.0])
    with pytest.raises(EmbeddingIndexError):
        F.embedding_lookup(table, 2)


def test_embedding_lookup_gradient_scatters():
    table = dm.Tensor(np.zeros((3, 2)), requires_grad=True)
    F.embedding_lookup(table, np.array([0, 2, 2])).sum().backward()
    np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])


@pytest.mark.parametrize(
    "op",
    [
        F.layer_norm,
        F.gelu,
        F.log_softmax,
        dm.exp,
        dm.tanh,
        lambda t: dm.log(t * t + 1.0),
        lambda t: dm.huber(t, 0.7),
        lambda t: dm.clip(t, -0.5, 0.5),
        lambda t: t / (t * t + 2.0),
        lambda t: t.sum(axis=1, keepdims=True) * t,
        lambda t: t.mean(axis=0),
        lambda t: t.transpose(1, 0).reshape(-1),
        lambda t: t[1:, ::2],
        lambda t: dm.concat([t, t * 2.0], axis=1),
        lambda t: dm.stack([t, t], axis=0),
        lambda t: F.take_along_last(t, np.array([0, 3, 1])),
        lambda t: dm.minimum(t, t * 0.5),
    ],
)
def test_primitive_gradients_match_finite_differences(op):
    rng = np.random.default_rng(7)
    # keep entries away from the kinks of clip/huber/minimum
    x = rng.uniform(0.15, 1.3, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.1
    x[np.abs(np.abs(x) - 0.7) < 0.05] += 0.1
    _check_unary(op, x)


def test_straight_through_forward_hard_backward_soft():
    soft = dm.Tensor([0.3, 0.7], requires_grad=True)
    st_value = F.straight_through(np.array([0.0, 1.0]), soft)
    np.testing.assert_array_equal(st_value.data, [0.0, 1.0])
    (st_value * dm.constant([2.0, 5.0])).sum().backward()
    np.testing.assert_array_equal(soft.grad, [2.0, 5.0])


def test_broadcasting_rules():
    x = dm.Tensor(np.ones((2, 3, 4)))
    assert (x + dm.Tensor(np.ones(4))).shape == (2, 3, 4)
    assert (x * dm.Tensor(np.ones((2, 1, 4)))).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        x + dm.Tensor(np.ones((3, 1)))


def test_bias_gradient_sums_over_batch():
    b = dm.Tensor(np.zeros(3), requires_grad=True)
    (dm.constant(np.ones((4, 2, 3))) + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [8.0, 8.0, 8.0])


def test_no_grad_builds_no_graph():
    p = dm.Tensor([1.0], requires_grad=True)
    with dm.no_grad():
        y = p * 2.0
    assert not y.requires_grad


def test_gradient_accumulates_across_shared_subgraph():
    p = dm.Tensor([3.0], requires_grad=True)
    y = p * p
    (y + y).sum().backward()
    np.testing.assert_allclose(p.grad, [12.0])


# -- gradcheck ------------------------------------------------------------------


def test_gradcheck_sum_of_squares():
    store = dm.ParameterStore()
    p = store.add("w", np.random.default_rng(0).standard_normal((3, 2)))
    report = dm.gradcheck(lambda: (p * p).sum(), store, step=1e-5, tol=1e-6)
    assert report.max_rel_error < 1e-6
    assert report.passed


def test_gradcheck_constant_function():
    store = dm.ParameterStore()
    store.add("w", np.ones(4))
    report = dm.gradcheck(lambda: dm.constant(2.0), store)
    assert report.max_rel_error == 0.0


def test_gradcheck_non_finite_raises():
    store = dm.ParameterStore()
    p = store.add("w", np.ones(2))
    with pytest.raises(GradcheckError):
        dm.gradcheck(lambda: (p * np.inf).sum(), store)


def test_gradcheck_detects_wrong_gradient():
    store = dm.ParameterStore()
    p = store.add("w", np.array([1.0, 2.0]))
    # a straight-through identity reports the wrong derivative of x**2
    report = dm.gradcheck(lambda: F.straight_through(p.data**2, p).sum(), store)
    assert not report.passed


# -- parameter store / optim -----------------------------------------------------


def test_parameter_store_order_and_uniqueness():
    store = dm.ParameterStore()
    store.add("b", [1.0])
    store.add("a", [2.0])
    assert store.names() == ["b", "a"]
    with pytest.raises(KeyError):
        store.add("a", [3.0])
    assert all(t.requires_grad for t in store.values())


def test_orthogonal_init_gain():
    q = dm.orthogonal((5, 3), 0.01, np.random.default_rng(0))
    np.testing.assert_allclose(q.T @ q, 0.01**2 * np.eye(3), atol=1e-12)


def test_clip_grad_norm_bounds_norm():
    store = dm.ParameterStore()
    p = store.add("w", np.zeros(4))
    p.grad = np.full(4, 100.0)
    before = dm.clip_grad_norm(store, 10.0)
    assert before == pytest.approx(200.0)
    assert dm.global_grad_norm(store) <= 10.0


def test_adam_zero_lr_keeps_parameters():
    store = dm.ParameterStore()
    p = store.add("w", np.ones(3))
    p.grad = np.ones(3)
    dm.Adam(store, lr=0.0).step()
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5))
    a = F.gelu(F.layer_norm(dm.constant(x))).data
    b = F.gelu(F.layer_norm(dm.constant(x))).data
    assert np.array_equal(a, b)
