import math

import pytest
import torch

from cg4d.encoders import FoundationEncoders
from cg4d.errors import ConfigurationError
from cg4d.graphs import (
    CognitionGraph,
    CognitionGraphStack,
    EdgeBuilder,
    GraphBuilder,
    MessagePasser,
    NodeExtractor,
    SemSTF,
    ge3d,
    graph_to_dot,
    graph_to_json,
    pe2d,
)


class TestPositionalEmbeddings:
    def test_pe2d_zero(self):
        v = pe2d(0.0, 0.0, 8)
        assert torch.allclose(v[0::2], torch.zeros(4))
        assert torch.allclose(v[1::2], torch.ones(4))

    def test_pe2d_range(self):
        v = pe2d(3.7, -1.2, 16)
        assert v.abs().max().item() <= 1.0

    def test_pe2d_formula(self):
        dim = 8
        x, y = 0.3, 0.7
        v = pe2d(x, y, dim)
        half = dim // 4  # frequencies per coordinate
        expect = []
        for coord in (x, y):
            for k in range(half):
                w = math.exp(-math.log(10000.0) * k / half)
                expect += [math.sin(coord * w), math.cos(coord * w)]
        assert torch.allclose(v, torch.tensor(expect), atol=1e-6)

    def test_pe2d_bad_dim(self):
        with pytest.raises(ConfigurationError):
            pe2d(0.0, 0.0, 6)

    def test_ge3d_zero(self):
        v = ge3d(0.0, 0.0, 0.0, 12)
        assert torch.allclose(v[0::2], torch.zeros(6))
        assert torch.allclose(v[1::2], torch.ones(6))

    def test_ge3d_range_and_formula(self):
        dim = 12
        x, y, z = 0.3, 0.7, -0.2
        v = ge3d(x, y, z, dim)
        assert v.abs().max().item() <= 1.0
        per = dim // 6
        expect = []
        for coord in (x, y, z):
            for k in range(per):
                w = math.exp(-math.log(10000.0) * k / per)
                expect += [math.sin(coord * w), math.cos(coord * w)]
        assert torch.allclose(v, torch.tensor(expect), atol=1e-6)

    def test_ge3d_bad_dim(self):
        with pytest.raises(ConfigurationError):
            ge3d(0.0, 0.0, 0.0, 16)


class TestNodeExtractor:
    def test_single_token_value_projection(self):
        torch.manual_seed(0)
        ex = NodeExtractor(num_nodes=5, dim=16, pe_dim=12)
        token = torch.randn(1, 16)
        embed = torch.randn(1, 12)
        nodes = ex(token, embed)
        expect = ex.attn.v_proj(torch.cat([token, embed], dim=-1))
        assert torch.allclose(nodes, expect.expand(5, -1), atol=1e-6)

    def test_permutation_invariance(self):
        torch.manual_seed(1)
        ex = NodeExtractor(num_nodes=4, dim=16, pe_dim=12)
        tokens = torch.randn(7, 16)
        embeds = torch.randn(7, 12)
        perm = torch.randperm(7)
        a = ex(tokens, embeds)
        b = ex(tokens[perm], embeds[perm])
        assert torch.allclose(a, b, atol=1e-6)

    def test_shape(self):
        torch.manual_seed(2)
        ex = NodeExtractor(num_nodes=32, dim=64, pe_dim=24)
        assert ex(torch.randn(10, 64), torch.randn(10, 24)).shape == (32, 64)


class TestEdgeBuilder:
    def test_identical_nodes_tiebreak(self):
        torch.manual_seed(3)
        eb = EdgeBuilder(dim=16, edge_dim=8, topk=2)
        nodes = torch.ones(5, 16)
        logical = torch.randn(3, 16)
        _, gate = eb(nodes, logical)
        for i in range(5):
            nz = torch.nonzero(gate[i]).squeeze(1).tolist()
            expect = [j for j in range(5) if j != i][:2]
            assert nz == expect

    def test_k_geq_n_keeps_all_offdiagonal(self):
        torch.manual_seed(4)
        eb = EdgeBuilder(dim=16, edge_dim=8, topk=10)
        nodes = torch.randn(4, 16)
        _, gate = eb(nodes, torch.randn(2, 16))
        assert bool((gate.diagonal() == 0).all())
        assert int((gate != 0).sum()) == 12

    def test_exact_row_counts(self):
        torch.manual_seed(5)
        eb = EdgeBuilder(dim=16, edge_dim=8, topk=2)
        _, gate = eb(torch.randn(4, 16), torch.randn(2, 16))
        assert ((gate != 0).sum(dim=1) == 2).all()

    def test_gate_range(self):
        torch.manual_seed(6)
        eb = EdgeBuilder(dim=16, edge_dim=8, topk=3)
        _, gate = eb(torch.randn(6, 16), torch.randn(2, 16))
        assert gate.min().item() >= 0.0 and gate.max().item() <= 1.0


def random_graph(n=6, d=16, de=8, topk=3, seed=0, dense=False, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    gate = torch.rand(n, n, generator=g, dtype=dtype)
    gate.fill_diagonal_(0.0)
    if not dense:
        keep = torch.topk(gate, topk, dim=1).indices
        mask = torch.zeros(n, n, dtype=torch.bool)
        mask.scatter_(1, keep, True)
        mask &= ~torch.eye(n, dtype=torch.bool)
        gate = gate * mask
    return CognitionGraph(
        kind="semantic",
        nodes=torch.randn(n, d, generator=g, dtype=dtype),
        edge_feats=torch.randn(n, n, de, generator=g, dtype=dtype),
        edge_gate=gate,
        topk=n if dense else topk,
    )


def brute_force_pass(passer, graph):
    n = graph.num_nodes
    out = graph.nodes.clone()
    for i in range(n):
        for j in range(n):
            feat = torch.cat([graph.nodes[i], graph.nodes[j], graph.edge_feats[i, j]])
            out[i] = out[i] + graph.edge_gate[i, j] * passer.msg_mlp(feat)
    return out


class TestMessagePass:
    def test_zero_gates_identity(self):
        torch.manual_seed(7)
        mp = MessagePasser(dim=16, edge_dim=8)
        graph = random_graph()
        graph.edge_gate.zero_()
        assert torch.allclose(mp(graph), graph.nodes, atol=1e-7)

    def test_matches_double_loop(self):
        torch.manual_seed(8)
        mp = MessagePasser(dim=16, edge_dim=8).double()
        graph = random_graph(n=3, dense=True, dtype=torch.float64)
        assert torch.allclose(mp(graph), brute_force_pass(mp, graph), atol=1e-6)

    def test_zero_weight_mlp_identity(self):
        torch.manual_seed(9)
        mp = MessagePasser(dim=16, edge_dim=8)
        for p in mp.parameters():
            p.data.zero_()
        graph = random_graph(seed=2)
        assert torch.allclose(mp(graph), graph.nodes, atol=0)

    def test_permutation_equivariance(self):
        torch.manual_seed(10)
        mp = MessagePasser(dim=16, edge_dim=8).double()
        graph = random_graph(n=5, dense=True, dtype=torch.float64, seed=3)
        perm = torch.randperm(5)
        permuted = CognitionGraph(
            kind=graph.kind,
            nodes=graph.nodes[perm],
            edge_feats=graph.edge_feats[perm][:, perm],
            edge_gate=graph.edge_gate[perm][:, perm],
            topk=graph.topk,
        )
        assert torch.allclose(mp(permuted), mp(graph)[perm], atol=1e-10)


@pytest.fixture(scope="module")
def builder():
    torch.manual_seed(11)
    return GraphBuilder(num_nodes=8, dim=16, edge_dim=8, topk=3)


class TestGraphBuilder:

    def test_semantic_graph_valid(self, builder):
        tokens = torch.randn(64, 16)
        coords = torch.rand(64, 2)
        graph = builder("semantic", tokens, coords, torch.randn(4, 16))
        graph.validate()
        assert graph.kind == "semantic"
        assert graph.num_nodes == 8

    def test_local_graph_ignores_spatial_tokens(self):
        # graph stack wiring: perturbing spatial tokens leaves the local graph alone
        torch.manual_seed(12)
        stack = CognitionGraphStack(num_nodes=6, dim=32, edge_dim=8, topk=3)
        enc = FoundationEncoders(dim=32, dim_action=8, logical_tokens=2, patch=8,
                                 image_size=16)
        images = torch.rand(2, 16, 16, 3)
        views = torch.rand(2, 16, 16, 3)
        bundle = enc(images, views, "x")
        _, (_, _, loc_a) = stack(bundle)
        bundle.spatial = bundle.spatial + 0.25  # local graph never reads T_S
        _, (_, _, loc_b) = stack(bundle)
        assert torch.allclose(loc_a.nodes, loc_b.nodes, atol=1e-6)

    def test_fused_kind_rejected(self, builder):
        with pytest.raises(ConfigurationError):
            builder("fused", torch.randn(4, 16), torch.rand(4, 2), torch.randn(2, 16))


class TestSemSTF:
    def make(self, n=6, d=16, seed=13):
        torch.manual_seed(seed)
        eb = EdgeBuilder(dim=d, edge_dim=8, topk=3)
        fusion = SemSTF(dim=d, edge_builder=eb)
        logical = torch.randn(3, d)

        def graph(kind, seed):
            g = torch.Generator().manual_seed(seed)
            nodes = torch.randn(n, d, generator=g)
            feats, gate = eb(nodes, logical)
            return CognitionGraph(kind, nodes, feats, gate, 3)

        return fusion, graph, logical

    def test_symmetric_gate_equal_streams(self):
        fusion, graph, logical = self.make()
        g_sem = graph("semantic", 1)
        g_g = graph("global", 2)
        forced = torch.full((6, 2), 0.5)
        both = fusion(g_sem, g_g, g_g, logical, forced_gates=forced)
        only = fusion(g_sem, g_g, g_g, logical,
                      forced_gates=torch.tensor([[1.0, 0.0]]).expand(6, -1))
        assert torch.allclose(both.nodes, only.nodes, atol=1e-6)

    def test_gates_sum_to_one(self):
        fusion, graph, logical = self.make(seed=14)
        h_sem = graph("semantic", 1).nodes
        h_g = fusion.attn_stream(h_sem, graph("global", 2).nodes)
        h_l = fusion.attn_stream(h_sem, graph("local", 3).nodes)
        gates = torch.softmax(fusion.gate_mlp(torch.cat([h_sem, h_g, h_l], dim=-1)), dim=-1)
        assert torch.isfinite(gates).all()
        assert torch.allclose(gates.sum(dim=-1), torch.ones(6), atol=1e-6)

    def test_output_invariants(self):
        fusion, graph, logical = self.make(seed=15)
        fused = fusion(graph("semantic", 1), graph("global", 2), graph("local", 3), logical)
        fused.validate()
        assert fused.kind == "fused"
        assert fused.num_nodes == 6

    def test_dim_mismatch(self):
        fusion, graph, logical = self.make(seed=16)
        g_sem = graph("semantic", 1)
        small = CognitionGraph("global", torch.randn(4, 16), torch.randn(4, 4, 8),
                               torch.zeros(4, 4), 3)
        with pytest.raises(ConfigurationError):
            fusion(g_sem, small, small, logical)


class TestDifferentiability:
    def test_finite_difference_through_fused_graph(self):
        torch.manual_seed(17)
        stack = CognitionGraphStack(num_nodes=4, dim=16, edge_dim=8, topk=2).double()
        enc = FoundationEncoders(dim=16, dim_action=8, logical_tokens=2, patch=8,
                                 image_size=16).double()
        images = torch.rand(2, 16, 16, 3, dtype=torch.float64).requires_grad_(True)
        readout = torch.randn(4, 16, dtype=torch.float64)

        def scalar(x):
            fused, _ = stack(enc(x, x[:1], "y"))
            return (fused.nodes * readout).sum()

        scalar(images).backward()
        grad = images.grad.clone()
        eps = 1e-6
        for idx in [(0, 2, 3, 0), (1, 9, 12, 2)]:
            plus = images.detach().clone()
            plus[idx] += eps
            minus = images.detach().clone()
            minus[idx] -= eps
            fd = (scalar(plus) - scalar(minus)).item() / (2 * eps)
            rel = abs(fd - grad[idx].item()) / max(abs(fd), 1e-8)
            assert rel < 1e-2


class TestExports:
    def test_json_and_dot(self):
        graph = random_graph(n=4, topk=2, seed=5)
        import json as _json
        data = _json.loads(graph_to_json(graph))
        assert len(data["nodes"]) == 4
        assert len(data["gate"]) == 4
        dot = graph_to_dot(graph)
        assert dot.startswith("digraph")
        assert dot.count("->") == int((graph.edge_gate > 0).sum())
