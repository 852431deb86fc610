import pytest
import torch

from cg4d.errors import ConfigurationError
from cg4d.graphs import CognitionGraph, EdgeBuilder
from cg4d.worldmodel import (
    ActionPooler,
    ActionVector,
    AdaLNConditioner,
    CausalPredictor,
    ResampleDecoder,
    StateDistiller,
    WorldModel,
    WorldState,
    loss_wm,
    sigreg,
    sigreg_random_projection,
)


def fused_graph(n=6, d=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    gate = torch.rand(n, n, generator=g, dtype=dtype)
    gate.fill_diagonal_(0.0)
    return CognitionGraph("fused", torch.randn(n, d, generator=g, dtype=dtype),
                          torch.randn(n, n, 8, generator=g, dtype=dtype), gate, n)


def whitened_batch(b=32, dim=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, dim, generator=g, dtype=torch.float64)
    x = x - x.mean(dim=0)
    cov = x.T @ x / (b - 1)
    chol = torch.linalg.cholesky(cov)
    return torch.linalg.solve_triangular(chol, x.T, upper=False).T


class TestSigreg:
    def test_whitened_batch_zero(self):
        x = whitened_batch()
        assert sigreg(x).item() < 1e-6

    def test_b2_hand_case(self):
        states = torch.tensor([[-1.0], [1.0]], dtype=torch.float64)
        # mean 0, unbiased variance 2 => (2 - 1)^2 = 1
        assert sigreg(states).item() == pytest.approx(1.0, abs=1e-12)

    def test_collapsed_batch(self):
        c = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64)
        states = c.expand(8, -1)
        expect = float((c ** 2).sum()) + 3.0  # ||c||^2 + ||I||_F^2
        assert sigreg(states).item() == pytest.approx(expect, abs=1e-9)

    def test_nonnegative(self):
        for seed in range(5):
            x = torch.randn(6, 3, generator=torch.Generator().manual_seed(seed))
            assert sigreg(x).item() >= 0.0

    def test_small_batch_rejected(self):
        with pytest.raises(ConfigurationError):
            sigreg(torch.randn(1, 4))

    def test_random_projection_variant(self):
        x = whitened_batch(b=64, dim=4)
        assert sigreg_random_projection(x).item() < 1e-2


class TestLossWM:
    def test_zero_when_perfect_and_whitened(self):
        x = whitened_batch()
        pred = torch.randn(4, 8, dtype=torch.float64)
        assert loss_wm(pred, pred.clone(), x).item() < 1e-6

    def test_unit_residual(self):
        pred = torch.ones(4, 8, dtype=torch.float64)
        target = torch.zeros(4, 8, dtype=torch.float64)
        loss = loss_wm(pred, target, whitened_batch(), alpha=0.1)
        assert loss.item() == pytest.approx(1.0, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            loss_wm(torch.zeros(2, 3), torch.zeros(3, 2), whitened_batch())


class TestStateDistiller:
    def test_single_node_value_projection(self):
        torch.manual_seed(0)
        sd = StateDistiller(num_slots=4, dim_nodes=16, dim_state=8)
        graph = fused_graph(n=1)
        state = sd(graph)
        expect = sd.attn.v_proj(graph.nodes)
        assert torch.allclose(state.slots, expect.expand(4, -1), atol=1e-6)

    def test_node_permutation_invariance(self):
        torch.manual_seed(1)
        sd = StateDistiller(num_slots=4, dim_nodes=16, dim_state=8)
        graph = fused_graph(n=5)
        perm = torch.randperm(5)
        permuted = CognitionGraph("fused", graph.nodes[perm], graph.edge_feats,
                                  graph.edge_gate, graph.topk)
        assert torch.allclose(sd(graph).slots, sd(permuted).slots, atol=1e-6)

    def test_shape_and_kind_check(self):
        torch.manual_seed(2)
        sd = StateDistiller(num_slots=16, dim_nodes=16, dim_state=64)
        assert sd(fused_graph()).slots.shape == (16, 64)
        bad = fused_graph()
        bad.kind = "semantic"
        with pytest.raises(ConfigurationError):
            sd(bad)


class TestActionPooler:
    def test_single_token(self):
        torch.manual_seed(3)
        ap = ActionPooler(dim_action=8)
        tok = torch.randn(1, 8)
        out = ap(tok)
        expect = ap.head(ap.attn.v_proj(tok).squeeze(0))
        assert torch.allclose(out.a, expect, atol=1e-6)

    def test_identical_tokens_match_single(self):
        torch.manual_seed(4)
        ap = ActionPooler(dim_action=8)
        tok = torch.randn(1, 8)
        many = tok.expand(5, -1)
        assert torch.allclose(ap(many).a, ap(tok).a, atol=1e-6)

    def test_shape(self):
        torch.manual_seed(5)
        ap = ActionPooler(dim_action=32)
        assert ap(torch.randn(8, 32)).a.shape == (32,)


class TestAdaLN:
    def test_zero_heads_plain_ln(self):
        torch.manual_seed(6)
        cond = AdaLNConditioner(dim_state=8, dim_action=4)
        for p in cond.gamma.parameters():
            p.data.zero_()
        for p in cond.beta.parameters():
            p.data.zero_()
        state = WorldState(slots=torch.randn(3, 8))
        out = cond(state, ActionVector(a=torch.randn(4)))
        assert torch.allclose(out.slots, cond.norm(state.slots), atol=1e-7)

    def test_ln_rows_standardized(self):
        torch.manual_seed(7)
        cond = AdaLNConditioner(dim_state=16, dim_action=4)
        normed = cond.norm(torch.randn(5, 16))
        assert torch.allclose(normed.mean(dim=1), torch.zeros(5), atol=1e-6)
        assert torch.allclose(normed.var(dim=1, unbiased=False), torch.ones(5), atol=1e-4)

    def test_different_actions_differ(self):
        torch.manual_seed(8)
        cond = AdaLNConditioner(dim_state=8, dim_action=4)
        state = WorldState(slots=torch.randn(3, 8))
        a1 = cond(state, ActionVector(a=torch.randn(4)))
        a2 = cond(state, ActionVector(a=torch.randn(4)))
        assert not torch.allclose(a1.slots, a2.slots, atol=1e-5)


class TestCausalPredictor:
    def make(self, seed=9):
        torch.manual_seed(seed)
        return CausalPredictor(num_slots=3, dim_state=8, max_context=4)

    def test_context_truncation(self):
        pred = self.make()
        states = [WorldState(slots=torch.randn(3, 8), time_index=i) for i in range(6)]
        full = pred(states)
        tail = pred(states[-4:])
        assert torch.allclose(full.slots, tail.slots, atol=1e-7)

    def test_mask_block_lower_triangular(self):
        pred = self.make()
        states = [WorldState(slots=torch.randn(3, 8)) for _ in range(3)]
        weights = pred.attention_weights(states)
        m = pred.num_slots
        for t_q in range(3):
            for t_k in range(3):
                block = weights[t_q * m:(t_q + 1) * m, t_k * m:(t_k + 1) * m]
                if t_k > t_q:
                    assert torch.equal(block, torch.zeros_like(block))
                else:
                    assert block.abs().sum().item() > 0

    def test_last_state_matters(self):
        pred = self.make()
        states = [WorldState(slots=torch.randn(3, 8)) for _ in range(3)]
        base = pred(states)
        bumped = states[:-1] + [WorldState(slots=states[-1].slots + 1.0)]
        assert not torch.allclose(pred(bumped).slots, base.slots, atol=1e-5)

    def test_single_step_shape(self):
        pred = self.make()
        out = pred([WorldState(slots=torch.randn(3, 8))])
        assert out.slots.shape == (3, 8)

    def test_empty_history(self):
        with pytest.raises(ConfigurationError):
            self.make()([])


class TestResampleDecoder:
    def make(self, seed=10):
        torch.manual_seed(seed)
        eb = EdgeBuilder(dim=16, edge_dim=8, topk=3)
        return ResampleDecoder(dim_nodes=16, dim_state=8, edge_builder=eb), eb

    def test_zero_paths_identity_nodes(self):
        dec, _ = self.make()
        for p in dec.attn.parameters():
            p.data.zero_()
        for p in dec.ffn.parameters():
            p.data.zero_()
        graph = fused_graph()
        out = dec(graph, WorldState(slots=torch.randn(4, 8)), torch.randn(16))
        assert torch.allclose(out.nodes, graph.nodes, atol=1e-7)

    def test_shape_preserved(self):
        dec, _ = self.make()
        graph = fused_graph(n=7)
        out = dec(graph, WorldState(slots=torch.randn(4, 8)), torch.randn(16))
        assert out.num_nodes == 7
        out.validate()

    def test_state_sensitivity(self):
        dec, _ = self.make()
        graph = fused_graph()
        ctx = torch.randn(16)
        a = dec(graph, WorldState(slots=torch.randn(4, 8)), ctx)
        b = dec(graph, WorldState(slots=torch.randn(4, 8)), ctx)
        assert not torch.allclose(a.nodes, b.nodes, atol=1e-5)


class TestRollout:
    def make_wm(self, seed=11):
        torch.manual_seed(seed)
        eb = EdgeBuilder(dim=16, edge_dim=8, topk=3)
        return WorldModel(dim_nodes=16, dim_state=8, dim_action=8, num_slots=4,
                          max_context=4, edge_builder=eb)

    def test_horizon_one_unrolls_explicitly(self):
        wm = self.make_wm()
        graph = fused_graph()
        actions = torch.randn(3, 8)
        logical = torch.randn(2, 16)
        out = wm.rollout(graph, actions, 1, logical_tokens=logical)
        assert len(out) == 1
        ctx = wm.decoder.edge_builder.logical_context(graph.nodes, logical)
        action = wm.pool_action(actions)
        state = wm.condition(wm.distill(graph), action)
        predicted = wm.predictor([state])
        expect = wm.decoder(graph, predicted, ctx)
        assert torch.allclose(out[0].nodes, expect.nodes, atol=1e-6)

    def test_invariants_over_horizon(self):
        wm = self.make_wm(seed=12)
        graphs = wm.rollout(fused_graph(), torch.randn(3, 8), 8,
                            logical_tokens=torch.randn(2, 16))
        assert len(graphs) == 8
        for g in graphs:
            g.validate()
            assert torch.isfinite(g.nodes).all()

    def test_deterministic_and_input_untouched(self):
        wm = self.make_wm(seed=13)
        graph = fused_graph(seed=5)
        before = graph.nodes.clone()
        actions = torch.randn(3, 8)
        logical = torch.randn(2, 16)
        a = wm.rollout(graph, actions, 3, logical_tokens=logical)
        b = wm.rollout(graph, actions, 3, logical_tokens=logical)
        assert torch.equal(graph.nodes, before)
        for ga, gb in zip(a, b):
            assert torch.equal(ga.nodes, gb.nodes)
