import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from titan import numerics as nx
from titan.errors import ConfigError
from titan.numerics import Linear, Tensor, grad_check, parameter
from titan.prior import PriorGraph
from titan.routing import (
    FREE,
    WARMUP,
    SelectionTally,
    combine,
    expert_keys,
    gate,
    memory_query,
    route_loss,
    route_targets,
)


def softmax_list(v):
    e = [math.exp(a - max(v)) for a in v]
    return [a / sum(e) for a in e]


class TestMemoryQuery:
    def test_formula_oracle(self):
        x = np.array([[0.3, -1.2, 0.5], [1.0, 0.2, -0.7]])  # already in m-space, N=2, m=3
        mem = np.array([[0.1, 0.4, -0.2], [-0.5, 0.3, 0.9], [0.7, -0.1, 0.2]])
        out = memory_query(Tensor(x[None]), Tensor(mem)).data[0]
        for i in range(2):
            att = softmax_list([sum(x[i][d] * mem[j][d] for d in range(3)) / math.sqrt(3) for j in range(3)])
            for d in range(3):
                assert out[i, d] == pytest.approx(sum(att[j] * mem[j][d] for j in range(3)), abs=1e-9)

    def test_single_item(self):
        mem = np.array([[0.25, -0.5, 2.0]])
        x = np.random.default_rng(0).normal(size=(2, 4, 3))
        out = memory_query(Tensor(x), Tensor(mem)).data
        np.testing.assert_allclose(out, np.broadcast_to(mem, out.shape), atol=1e-15)

    def test_projection_required(self):
        with pytest.raises(ConfigError):
            memory_query(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((2, 3))))

    def test_with_projection(self):
        rng = np.random.default_rng(1)
        proj = Linear(rng, 4, 3)
        out = memory_query(Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(5, 3))), proj)
        assert out.shape == (2, 5, 3)


class TestExpertKeys:
    def test_formula_oracle(self):
        h = np.array([[1.0, -0.5, 0.25], [0.3, 0.8, -1.1]])
        out = expert_keys([Tensor(h[None])]).data[0, 0]
        for i in range(2):
            att = softmax_list([sum(h[i][d] * h[j][d] for d in range(3)) / math.sqrt(3) for j in range(2)])
            for d in range(3):
                assert out[i, d] == pytest.approx(sum(att[j] * h[j][d] for j in range(2)), abs=1e-9)

    def test_identical_hiddens(self):
        h = Tensor(np.random.default_rng(2).normal(size=(1, 3, 4)))
        k = expert_keys([h, h, h, h]).data
        for e in range(1, 4):
            np.testing.assert_array_equal(k[:, e], k[:, 0])

    def test_single_node(self):
        rng = np.random.default_rng(3)
        proj = Linear(rng, 5, 3)
        h = Tensor(rng.normal(size=(2, 1, 5)))
        k = expert_keys([h], proj).data[:, 0]
        np.testing.assert_allclose(k, proj(h).data, atol=1e-14)


def rand_keys(rng, b=2, e=4, n=3, m=4):
    return Tensor(rng.normal(size=(b, n, m))), Tensor(rng.normal(size=(b, e, n, m)))


class TestGate:
    def test_identical_keys_uniform(self):
        rng = np.random.default_rng(0)
        o = Tensor(rng.normal(size=(1, 3, 4)))
        k = rng.normal(size=(1, 1, 3, 4))
        d = gate(o, Tensor(np.repeat(k, 4, axis=1)))
        np.testing.assert_allclose(d.probs.data, 0.25, atol=1e-15)
        assert d.selected[0] == 0  # ties go to the lowest index

    def test_identity_prior_neutral(self):
        o, k = rand_keys(np.random.default_rng(1))
        a = gate(o, k)
        b = gate(o, k, PriorGraph.identity(3))
        assert a.probs.data.tobytes() == b.probs.data.tobytes()
        assert (a.selected == b.selected).all()
        assert b.phase == WARMUP and a.phase == FREE

    def test_orthogonal_construction(self):
        q = np.zeros((1, 2, 2))
        q[0, 0, 0] = 1.0
        keys = np.zeros((1, 4, 2, 2))
        keys[0, 0] = [[0.0, 1.0], [0.0, 0.0]]
        keys[0, 1] = q[0]
        keys[0, 2] = [[0.0, 0.0], [3.0, 0.0]]
        keys[0, 3] = [[0.0, 0.0], [0.0, -2.0]]
        d = gate(Tensor(q), Tensor(keys))
        score = d.logits.data[0]
        np.testing.assert_allclose(score, [0.0, 1.0, 0.0, 0.0], atol=1e-15)
        e = math.e
        np.testing.assert_allclose(d.probs.data[0], [1 / (e + 3), e / (e + 3), 1 / (e + 3), 1 / (e + 3)], atol=1e-15)
        assert d.selected[0] == 1

    def test_prior_mixes_node_rows(self):
        rng = np.random.default_rng(5)
        o, k = rand_keys(rng, b=1, n=2)
        w = np.array([[1.0, 0.5], [0.5, 1.0]])
        mixed = Tensor(np.einsum("ij,bjm->bim", w, o.data))
        np.testing.assert_allclose(gate(o, k, w).probs.data, gate(mixed, k).probs.data, atol=1e-15)

    def test_zero_norm_scores_zero(self):
        o = Tensor(np.ones((1, 2, 2)))
        k = np.ones((1, 2, 2, 2))
        k[0, 1] = 0.0
        d = gate(o, Tensor(k))
        np.testing.assert_allclose(d.logits.data[0], [1.0, 0.0], atol=1e-15)

    def test_temperature(self):
        o, k = rand_keys(np.random.default_rng(6))
        a, b = gate(o, k), gate(o, k, temperature=0.5)
        np.testing.assert_allclose(b.logits.data, 2 * a.logits.data, atol=1e-14)
        with pytest.raises(ConfigError):
            gate(o, k, temperature=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariance_and_normalization(self, seed, c):
        o, k = rand_keys(np.random.default_rng(seed))
        a = gate(o, k)
        b = gate(Tensor(o.data * c), Tensor(k.data * c))
        assert (a.selected == b.selected).all()
        np.testing.assert_allclose(a.probs.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(a.probs.data >= 0)
        assert (a.selected == np.argmax(a.probs.data, axis=-1)).all()


class TestCombine:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.fc = [Tensor(rng.normal(size=(3, 2, 4, 1))) for _ in range(4)]

    def test_one_hot_soft_equals_hard(self):
        probs = np.eye(4)[[2, 0, 3]]
        soft = combine(self.fc, Tensor(probs), "soft").data
        hard = combine(self.fc, Tensor(probs), "hard").data
        np.testing.assert_array_equal(soft, hard)

    def test_equal_forecasts(self):
        same = [self.fc[0]] * 4
        out = combine(same, Tensor(np.full((3, 4), 0.25)), "soft").data
        np.testing.assert_allclose(out, self.fc[0].data, atol=1e-15)

    def test_weighted_sum_oracle(self):
        probs = np.random.default_rng(8).dirichlet(np.ones(4), size=3)
        out = combine(self.fc, Tensor(probs), "soft").data
        for b in range(3):
            manual = sum(probs[b, e] * self.fc[e].data[b] for e in range(4))
            np.testing.assert_allclose(out[b], manual, rtol=0, atol=1e-12)

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            combine(self.fc, Tensor(np.full((3, 4), 0.25)), "top2")


def test_tally_sums_to_routed():
    rng = np.random.default_rng(9)
    tally = SelectionTally(4)
    for _ in range(5):
        o, k = rand_keys(rng, b=int(rng.integers(1, 6)))
        tally.update(gate(o, k))
    assert tally.samples.sum() == tally.routed
    assert tally.nodes.sum() == tally.routed * 3
    assert sum(tally.mean_probs()) == pytest.approx(1.0)


def test_route_targets_and_loss():
    target = np.zeros((2, 1, 1, 1))
    fc = [np.full((2, 1, 1, 1), v) for v in (0.5, -0.1, 0.1)]
    labels = route_targets(fc, target, np.ones_like(target, dtype=bool))
    assert labels.tolist() == [1, 1]  # experts 1 and 2 tie at 0.1; lowest index wins
    logits = Tensor(np.array([[0.0, math.log(3.0), 0.0], [0.0, 0.0, 0.0]]))
    loss = route_loss(logits, np.array([1, 2])).data
    assert loss == pytest.approx((-math.log(3 / 5) - math.log(1 / 3)) / 2)


def test_end_to_end_grad_check():
    rng = np.random.default_rng(10)
    n, d_h, m = 3, 4, 5
    proj = Linear(rng, d_h, m)
    mem = parameter(rng.normal(size=(n, m)))
    hid = [parameter(rng.normal(size=(1, n, d_h))) for _ in range(4)]
    fc = [parameter(rng.normal(size=(1, 2, n, 1))) for _ in range(4)]
    y = rng.normal(size=(1, 2, n, 1))

    def f():
        pooled = nx.mean(nx.stack(hid, axis=0), axis=0)
        d = gate(memory_query(pooled, mem, proj), expert_keys(hid, proj))
        return nx.mean(nx.tabs(combine(fc, d.probs, "soft") - y))

    assert grad_check(f, [mem, *proj.parameters(), *hid, *fc], eps=1e-6) < 1e-4
