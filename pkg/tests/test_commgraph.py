import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commformer import diffmath as dm
from commformer.commgraph import (
    AdjacencyLogits,
    CommGraph,
    SparsitySpec,
    append_snapshot,
    apply_dynamic_gate,
    argmax_khot,
    full_graph,
    identity_graph,
    read_snapshots,
    sample_khot_gumbel,
    snapshot,
)
from commformer.errors import NumericError, ShapeError, SparsityError


def _alpha(values):
    return dm.Tensor(np.asarray(values, dtype=float), requires_grad=True)


def _brute_topk(row_scores, diag, k):
    """Enumerate all k-subsets of off-diagonal columns; pick the max-sum one (lowest indices on ties)."""
    candidates = [j for j in range(len(row_scores)) if j != diag]
    best = max(itertools.combinations(candidates, k), key=lambda c: (sum(row_scores[j] for j in c), [-j for j in c]))
    return set(best)


def test_sparsity_k_rule():
    assert SparsitySpec(0.4, 10).k == 4
    assert SparsitySpec(0.4, 3).k == 1
    assert SparsitySpec(0.2, 3).k == 1
    assert SparsitySpec(0.6, 3).k == 2
    with pytest.raises(SparsityError):
        SparsitySpec(1.0, 3)
    with pytest.raises(SparsityError):
        SparsitySpec(0.0, 3)


def test_sparsity_total_edge_budget():
    for n in (3, 8, 10):
        for s in (0.2, 0.4, 0.6):
            spec = SparsitySpec(s, n)
            assert spec.total_edges <= s * n * n + n


def test_two_agents_only_one_candidate():
    spec = SparsitySpec(0.5, 2)
    rng = np.random.default_rng(0)
    for _ in range(10):
        g = sample_khot_gumbel(_alpha(rng.standard_normal((2, 2))), spec, rng=rng)
        np.testing.assert_array_equal(g.edges, np.ones((2, 2)))


def test_sampler_zero_noise_picks_largest_logit():
    alpha = _alpha([[0, 5, 0], [0, 0, 0], [0, 0, 0]])
    g = sample_khot_gumbel(alpha, SparsitySpec.from_k(3, 1), noise=np.zeros((3, 3)))
    np.testing.assert_array_equal(g.edges[0], [1, 1, 0])


def test_gumbel_selection_frequency_matches_softmax():
    # row 0 competes between column 1 (logit log 2) and column 2 (logit 0)
    alpha = _alpha([[0, math.log(2), 0], [0, 0, 0], [0, 0, 0]])
    spec = SparsitySpec.from_k(3, 1)
    rng = np.random.default_rng(123)
    noise = rng.gumbel(size=(10_000, 3, 3))
    g = sample_khot_gumbel(alpha, spec, noise=noise)
    freq = g.edges[:, 0, 1].mean()
    assert abs(freq - 2 / 3) < 0.02


def test_argmax_ties_go_to_lowest_column():
    g = argmax_khot(_alpha(np.zeros((4, 4))), SparsitySpec.from_k(4, 1))
    expected = np.eye(4)
    expected[0, 1] = 1
    expected[1:, 0] = 1
    np.testing.assert_array_equal(g.edges, expected)


def test_argmax_row_topk_against_brute_force():
    alpha = np.zeros((4, 4))
    alpha[0] = [0.0, 0.1, 0.9, 0.5]
    g = argmax_khot(_alpha(alpha), SparsitySpec.from_k(4, 2))
    np.testing.assert_array_equal(g.edges[0], [1, 0, 1, 1])
    rng = np.random.default_rng(5)
    for _ in range(20):
        scores = rng.standard_normal((5, 5))
        spec = SparsitySpec.from_k(5, 2)
        g = argmax_khot(_alpha(scores), spec)
        for i in range(5):
            chosen = {j for j in range(5) if j != i and g.edges[i, j] == 1}
            assert chosen == _brute_topk(scores[i], i, 2)


def test_argmax_saturation():
    g = argmax_khot(_alpha(np.random.default_rng(0).standard_normal((5, 5))), SparsitySpec.from_k(5, 4))
    np.testing.assert_array_equal(g.edges, np.ones((5, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_argmax_invariant_to_row_shift(seed, shift):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((5, 5))
    shifted = scores.copy()
    shifted[rng.integers(5)] += shift
    spec = SparsitySpec.from_k(5, 2)
    np.testing.assert_array_equal(argmax_khot(_alpha(scores), spec).edges, argmax_khot(_alpha(shifted), spec).edges)


def test_errors():
    with pytest.raises(ShapeError):
        argmax_khot(_alpha(np.zeros((3, 3))), SparsitySpec(0.5, 4))
    with pytest.raises(SparsityError):
        SparsitySpec.from_k(3, 3)
    bad = np.zeros((3, 3))
    bad[0, 1] = np.nan
    with pytest.raises(NumericError):
        argmax_khot(_alpha(bad), SparsitySpec.from_k(3, 1))


def test_straight_through_contract():
    """d loss/d alpha through the sampler == J_softmax^T (d loss/d edges at the hard graph)."""
    rng = np.random.default_rng(9)
    n = 4
    alpha = _alpha(rng.standard_normal((n, n)))
    noise = rng.gumbel(size=(n, n))
    w = rng.standard_normal((n, n))
    spec = SparsitySpec.from_k(n, 2)

    def loss_of_edges(e):
        return ((e * e) * w).sum()

    g = sample_khot_gumbel(alpha, spec, noise=noise)
    loss_of_edges(g.tensor()).backward()
    analytic = alpha.grad.copy()

    # gradient of the loss wrt the edge matrix at the hard value
    e_leaf = dm.Tensor(g.edges, requires_grad=True)
    loss_of_edges(e_leaf).backward()
    d_edges = e_leaf.grad

    # Jacobian of the off-diagonal softmax by finite differences
    def soft(a):
        z = np.where(np.eye(n, dtype=bool), -np.inf, a + noise)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    expected = np.zeros((n, n))
    base = alpha.data.copy()
    for idx in np.ndindex(n, n):
        hi, lo = base.copy(), base.copy()
        hi[idx] += 1e-6
        lo[idx] -= 1e-6
        expected[idx] = np.sum(d_edges * (soft(hi) - soft(lo)) / 2e-6)
    np.testing.assert_allclose(analytic, expected, atol=1e-7)


def test_sampled_graphs_keep_row_sparsity_after_alpha_updates():
    rng = np.random.default_rng(2)
    store = dm.ParameterStore()
    logits = AdjacencyLogits(store, 6, rng)
    spec = SparsitySpec(0.4, 6)
    for _ in range(5):
        logits.alpha.data = logits.alpha.data + rng.standard_normal((6, 6))
        g = sample_khot_gumbel(logits, spec, rng=rng)
        assert np.all(g.off_diagonal_counts() == spec.k)
        assert np.all(np.diag(g.edges) == 1)


def test_dynamic_gate_identity_and_zero():
    g = argmax_khot(_alpha(np.random.default_rng(0).standard_normal((4, 4))), SparsitySpec.from_k(4, 2))
    np.testing.assert_array_equal(apply_dynamic_gate(g, np.ones(4)).edges, g.edges)
    np.testing.assert_array_equal(apply_dynamic_gate(g, np.zeros(4)).edges, np.eye(4))


def test_dynamic_gate_closes_one_row():
    g = full_graph(3)
    gated = apply_dynamic_gate(g, np.array([1, 0, 1]))
    np.testing.assert_array_equal(gated.edges, [[1, 1, 1], [0, 1, 0], [1, 1, 1]])
    with pytest.raises(ShapeError):
        apply_dynamic_gate(g, np.ones(4))


def test_dynamic_gate_batched_with_gradient():
    alpha = _alpha(np.random.default_rng(1).standard_normal((3, 3)))
    g = argmax_khot(alpha, SparsitySpec.from_k(3, 1))
    h = np.array([[1, 0, 1], [0, 1, 1]])
    gated = apply_dynamic_gate(g, h)
    assert gated.edges.shape == (2, 3, 3)
    np.testing.assert_array_equal(gated.tensor().data, gated.edges)
    gated.tensor().sum().backward()
    assert alpha.grad is not None


def test_snapshot_records():
    rec = snapshot(identity_graph(3), step=7)
    assert rec == {"iteration": 7, "matrix": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}
    assert snapshot(full_graph(3), 0)["matrix"] == [[1] * 3] * 3
    spec = SparsitySpec(0.4, 10)
    g = sample_khot_gumbel(_alpha(np.zeros((10, 10))), spec, rng=np.random.default_rng(0))
    assert all(sum(row) == spec.k + 1 for row in snapshot(g, 1)["matrix"])


def test_snapshot_file_roundtrip(tmp_path):
    path = tmp_path / "alpha.jsonl"
    append_snapshot(path, snapshot(identity_graph(2), 0))
    append_snapshot(path, snapshot(full_graph(2), 1))
    assert [r["iteration"] for r in read_snapshots(path)] == [0, 1]


def test_relaxed_graph_is_soft():
    alpha = _alpha(np.zeros((3, 3)))
    g = sample_khot_gumbel(alpha, SparsitySpec.from_k(3, 1), noise=np.zeros((3, 3)), relaxed=True)
    np.testing.assert_allclose(g.tensor().data, np.eye(3) + 0.5 * (1 - np.eye(3)))
    assert isinstance(g, CommGraph)
