import numpy as np
import pytest

from commformer import diffmath as dm
from commformer.commgraph import SparsitySpec, apply_dynamic_gate, argmax_khot
from commformer.errors import ShapeError
from commformer.gating import CLOSED, OPEN, GateNetwork, gate_forward, gate_forward_recurrent


def _gates(n=4, obs_dim=5, dim=8, seed=0, recurrent=False):
    store = dm.ParameterStore()
    return store, GateNetwork(store, "gate", n, obs_dim, dim, np.random.default_rng(seed), recurrent=recurrent)


def test_saturated_gate_is_open():
    _, gates = _gates()
    gates.w2.data[:] = 0.0
    gates.b2.data[..., OPEN] = 10.0
    gates.b2.data[..., CLOSED] = -10.0
    obs = np.random.default_rng(1).standard_normal((4, 5))
    assert np.all(gate_forward(obs, gates).h == 1)
    # Gumbel noise almost never overturns a 20-nat margin
    d = gate_forward(obs, gates, mode="train", rng=np.random.default_rng(2))
    assert np.all(d.h == 1)


def test_inference_is_deterministic():
    _, gates = _gates()
    obs = np.random.default_rng(3).standard_normal((6, 4, 5))
    a, b = gate_forward(obs, gates), gate_forward(obs, gates)
    np.testing.assert_array_equal(a.h, b.h)
    assert a.h.shape == (6, 4)
    assert set(np.unique(a.h)) <= {0.0, 1.0}


def test_gate_depends_only_on_own_observation():
    store, gates = _gates()
    obs = dm.Tensor(np.random.default_rng(4).standard_normal((3, 4, 5)), requires_grad=True)
    d = gate_forward(obs, gates, mode="train", rng=np.random.default_rng(5))
    d.st[:, 1].sum().backward()
    per_agent = np.abs(obs.grad).sum(axis=(0, 2))
    assert per_agent[1] > 0
    assert np.all(per_agent[[0, 2, 3]] == 0.0)


def test_agents_have_distinct_parameters():
    _, gates = _gates()
    assert gates.w1.shape == (4, 5, 8)
    assert not np.allclose(gates.w1.data[0], gates.w1.data[1])


def test_train_mode_straight_through_and_gradient():
    store, gates = _gates()
    obs = np.random.default_rng(6).standard_normal((2, 4, 5))
    d = gate_forward(obs, gates, mode="train", rng=np.random.default_rng(7))
    np.testing.assert_array_equal(d.st.data, d.h)
    d.st.sum().backward()
    assert np.abs(gates.w2.grad).sum() > 0


def test_train_mode_with_fixed_noise_matches_perturbed_argmax():
    _, gates = _gates()
    obs = np.random.default_rng(8).standard_normal((5, 4, 5))
    noise = np.random.default_rng(9).gumbel(size=(5, 4, 2))
    d = gate_forward(obs, gates, mode="train", noise=noise)
    logits = gates.logits(obs).data
    np.testing.assert_array_equal(d.h, (np.argmax(logits + noise, -1) == OPEN).astype(float))


def test_shape_errors():
    _, gates = _gates()
    with pytest.raises(ShapeError):
        gate_forward(np.zeros((3, 5)), gates)
    with pytest.raises(ShapeError):
        gate_forward(np.zeros((4, 6)), gates)
    with pytest.raises(ValueError):
        gate_forward(np.zeros((4, 5)), gates, mode="train")


def test_all_open_gate_reproduces_static_graph():
    alpha = dm.Tensor(np.random.default_rng(10).standard_normal((4, 4)))
    g = argmax_khot(alpha, SparsitySpec(0.5, 4))
    _, gates = _gates()
    gates.b2.data[..., OPEN] = 50.0
    d = gate_forward(np.zeros((4, 5)), gates)
    np.testing.assert_array_equal(apply_dynamic_gate(g, d).edges, g.edges)


def test_recurrent_with_zero_weights_matches_feedforward():
    store, gates = _gates(recurrent=True)
    obs = np.random.default_rng(11).standard_normal((3, 4, 5))
    plain = gate_forward(obs, gates)
    rec, hidden = gate_forward_recurrent(obs, np.zeros((3, 4, 8)), gates)
    np.testing.assert_array_equal(plain.h, rec.h)
    np.testing.assert_allclose(plain.soft.data, rec.soft.data, atol=0)
    assert hidden.shape == (3, 4, 8)


def test_recurrent_hidden_is_deterministic_and_evolves():
    _, gates = _gates(recurrent=True, seed=3)
    gates.u.data = np.random.default_rng(12).standard_normal(gates.u.shape)
    obs = np.random.default_rng(13).standard_normal((4, 5))
    h0 = np.zeros((4, 8))
    _, h1 = gate_forward_recurrent(obs, h0, gates)
    _, h1b = gate_forward_recurrent(obs, h0, gates)
    _, h2 = gate_forward_recurrent(obs, h1.data, gates)
    np.testing.assert_array_equal(h1.data, h1b.data)
    assert not np.allclose(h1.data, h2.data)
