"""Cognition graphs: construction, gated message passing, and fusion.

Three graphs are built from the token families (semantic / global
appearance / local dynamics) with a shared recipe: learnable seed queries
cross-attend over positionally-embedded tokens to produce n nodes, logical
tokens steer a gated dense edge bank, and one residual round of message
passing updates the nodes.  Fusion bridges the global and local graphs
into the semantic graph through dual cross-attention and adaptive gating.
"""

import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import Attention, FeedForward, mlp
from .errors import ConfigurationError

GRAPH_KINDS = ("semantic", "global", "local", "fused")


@dataclass
class CognitionGraph:
    kind: str
    nodes: torch.Tensor       # [n, d]
    edge_feats: torch.Tensor  # [n, n, d_e]
    edge_gate: torch.Tensor   # [n, n], zero diagonal, <= topk nonzeros per row
    topk: int

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    def validate(self):
        if self.kind not in GRAPH_KINDS:
            raise ConfigurationError(f"unknown graph kind {self.kind!r}")
        n = self.num_nodes
        if self.edge_gate.shape != (n, n):
            raise ConfigurationError("edge gate shape mismatch")
        if not torch.isfinite(self.nodes).all():
            raise ConfigurationError("graph nodes must be finite")
        diag = self.edge_gate.diagonal()
        if not bool((diag == 0).all()):
            raise ConfigurationError("edge gate diagonal must be zero")
        if int((self.edge_gate != 0).sum(dim=1).max()) > self.topk:
            raise ConfigurationError("edge gate rows exceed topk nonzeros")
        return self


def _sincos(values, dim):
    """Interleaved sin/cos over geometric frequencies for one coordinate."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=values.dtype) / half)
    angles = values.unsqueeze(-1) * freqs
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.flatten(-2)


def pe2d(x, y, dim):
    """Sinusoidal 2D positional embedding; dim must divide by 4."""
    if dim % 4 != 0:
        raise ConfigurationError("pe2d dim must be divisible by 4")
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    return torch.cat([_sincos(x, dim // 2), _sincos(y, dim // 2)], dim=-1)


def ge3d(x, y, z, dim):
    """Sinusoidal 3D geometry embedding; dim must divide by 6."""
    if dim % 6 != 0:
        raise ConfigurationError("ge3d dim must be divisible by 6")
    third = dim // 3
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    z = torch.as_tensor(z)
    return torch.cat([_sincos(x, third), _sincos(y, third), _sincos(z, third)], dim=-1)


class NodeExtractor(nn.Module):
    """n learnable seeds cross-attend over tokens keyed with position codes."""

    def __init__(self, num_nodes, dim, pe_dim):
        super().__init__()
        self.seeds = nn.Parameter(torch.randn(num_nodes, dim) / math.sqrt(dim))
        self.attn = Attention(dim, dim + pe_dim, dim)

    def forward(self, tokens, coords_embed):
        if tokens.shape[0] < 1:
            raise ConfigurationError("node extraction needs at least one token")
        keys = torch.cat([tokens, coords_embed], dim=-1)
        return self.attn(self.seeds, keys)


class EdgeBuilder(nn.Module):
    """Logical-context-conditioned edge features with sparse sigmoid gates."""

    def __init__(self, dim, edge_dim, topk):
        super().__init__()
        self.topk = topk
        self.context_attn = Attention(dim, dim, dim)
        self.edge_mlp = mlp([3 * dim, 2 * edge_dim, edge_dim])
        self.gate_head = nn.Linear(edge_dim, 1)

    def logical_context(self, nodes, logical_tokens):
        query = nodes.mean(dim=0, keepdim=True)
        return self.context_attn(query, logical_tokens).squeeze(0)

    def forward(self, nodes, logical_tokens=None, context=None):
        n = nodes.shape[0]
        if n < 2:
            raise ConfigurationError("edges need at least two nodes")
        if context is None:
            if logical_tokens is None:
                raise ConfigurationError("edge builder needs logical tokens or context")
            context = self.logical_context(nodes, logical_tokens)
        ni = nodes.unsqueeze(1).expand(n, n, -1)
        nj = nodes.unsqueeze(0).expand(n, n, -1)
        ctx = context.expand(n, n, -1)
        edge_feats = self.edge_mlp(torch.cat([ni, nj, ctx], dim=-1))
        raw_gate = torch.sigmoid(self.gate_head(edge_feats)).squeeze(-1)

        eye = torch.eye(n, dtype=torch.bool)
        keep = torch.zeros(n, n, dtype=torch.bool)
        masked = raw_gate.masked_fill(eye, float("-inf"))
        k = min(self.topk, n - 1)
        # stable descending sort breaks ties toward the lowest column index
        order = torch.argsort(masked, dim=1, descending=True, stable=True)
        keep.scatter_(1, order[:, :k], True)
        keep &= ~eye
        gate = raw_gate * keep
        return edge_feats, gate


class MessagePasser(nn.Module):
    """Residual gated message passing: N_i' = N_i + sum_j g_ij MLP([N_i;N_j;E_ij])."""

    def __init__(self, dim, edge_dim):
        super().__init__()
        self.msg_mlp = mlp([2 * dim + edge_dim, 2 * dim, dim])

    def forward(self, graph):
        n, d = graph.nodes.shape
        ni = graph.nodes.unsqueeze(1).expand(n, n, -1)
        nj = graph.nodes.unsqueeze(0).expand(n, n, -1)
        msgs = self.msg_mlp(torch.cat([ni, nj, graph.edge_feats], dim=-1))
        msgs = graph.edge_gate.unsqueeze(-1) * msgs
        return graph.nodes + msgs.sum(dim=1)


class GraphBuilder(nn.Module):
    """One construction pipeline per graph kind, sharing edge/message stacks."""

    def __init__(self, num_nodes, dim, edge_dim=32, topk=8, pe_dim=None):
        super().__init__()
        self.num_nodes = num_nodes
        pe_dim = pe_dim or 24
        if pe_dim % 12 != 0:
            raise ConfigurationError("positional dim must be divisible by 12")
        self.pe_dim = pe_dim
        self.extractors = nn.ModuleDict({
            kind: NodeExtractor(num_nodes, dim, pe_dim)
            for kind in ("semantic", "global", "local")
        })
        self.edges = EdgeBuilder(dim, edge_dim, topk)
        self.passer = MessagePasser(dim, edge_dim)
        self.topk = topk

    def coords_embed(self, kind, coords):
        if kind == "semantic":
            return pe2d(coords[:, 0], coords[:, 1], self.pe_dim)
        return ge3d(coords[:, 0], coords[:, 1], coords[:, 2], self.pe_dim)

    def forward(self, kind, tokens, coords, logical_tokens):
        """tokens [M, d]; coords [M, 2] (semantic) or [M, 3] (global/local)."""
        if kind not in ("semantic", "global", "local"):
            raise ConfigurationError(
                f"build_graph kind must be semantic/global/local, got {kind!r}")
        embed = self.coords_embed(kind, coords).to(tokens.dtype)
        nodes = self.extractors[kind](tokens, embed)
        edge_feats, gate = self.edges(nodes, logical_tokens)
        graph = CognitionGraph(kind=kind, nodes=nodes, edge_feats=edge_feats,
                               edge_gate=gate, topk=self.topk)
        updated = self.passer(graph)
        return CognitionGraph(kind=kind, nodes=updated, edge_feats=edge_feats,
                              edge_gate=gate, topk=self.topk)


class SemSTF(nn.Module):
    """Semantic-bridged fusion of the global and local graphs.

    Dual cross-attention from the semantic nodes into each stream, adaptive
    per-node softmax gating, and a feed-forward merge around the semantic
    anchor.  Edges of the fused graph are rebuilt from the fused nodes.
    """

    def __init__(self, dim, edge_builder):
        super().__init__()
        # one cross-attention applied to both streams: identical stream
        # inputs then yield identical aligned features, so the symmetric
        # gate (0.5, 0.5) reduces exactly to either single stream
        self.attn_stream = Attention(dim, dim, dim)
        self.gate_mlp = mlp([3 * dim, dim, 2])
        self.ffn = FeedForward(dim)
        self.edge_builder = edge_builder

    def forward(self, g_sem, g_glob, g_loc, logical_tokens, forced_gates=None):
        if not (g_sem.nodes.shape == g_glob.nodes.shape == g_loc.nodes.shape):
            raise ConfigurationError("fusion requires equal graph shapes")
        h_sem = g_sem.nodes
        h_g = self.attn_stream(h_sem, g_glob.nodes)
        h_l = self.attn_stream(h_sem, g_loc.nodes)
        if forced_gates is None:
            logits = self.gate_mlp(torch.cat([h_sem, h_g, h_l], dim=-1))
            gates = torch.softmax(logits, dim=-1)          # [n, 2]
        else:
            gates = forced_gates
        mix = h_sem + gates[:, :1] * h_g + gates[:, 1:] * h_l
        fused = mix + self.ffn(mix)
        edge_feats, gate = self.edge_builder(fused, logical_tokens)
        return CognitionGraph(kind="fused", nodes=fused, edge_feats=edge_feats,
                              edge_gate=gate, topk=self.edge_builder.topk)


class CognitionGraphStack(nn.Module):
    """Builds the three token graphs and fuses them into one cognition graph."""

    def __init__(self, num_nodes, dim, edge_dim=32, topk=8, pe_dim=None):
        super().__init__()
        self.builder = GraphBuilder(num_nodes, dim, edge_dim=edge_dim,
                                    topk=topk, pe_dim=pe_dim)
        self.fusion = SemSTF(dim, self.builder.edges)

    def forward(self, bundle):
        """TokenBundle -> fused cognition graph (plus the three components)."""
        d = bundle.semantic.shape[-1]
        F_, P, _ = bundle.semantic.shape
        V = bundle.spatial.shape[0]
        coords2d = bundle.patch_coords                      # [P, 2]
        coords3d = torch.cat([coords2d, bundle.patch_depth.unsqueeze(1)], dim=1)

        sem_tokens = bundle.semantic.reshape(F_ * P, d)
        sem_coords = coords2d.repeat(F_, 1)
        spa_tokens = bundle.spatial.reshape(V * P, d)
        spa_coords = coords3d.repeat(V, 1)
        tem_tokens = bundle.temporal.reshape(F_ * P, d)
        tem_coords = coords3d.repeat(F_, 1)

        g_sem = self.builder("semantic", sem_tokens, sem_coords, bundle.logical)
        g_glob = self.builder("global", spa_tokens, spa_coords, bundle.logical)
        g_loc = self.builder("local", tem_tokens, tem_coords, bundle.logical)
        fused = self.fusion(g_sem, g_glob, g_loc, bundle.logical)
        return fused, (g_sem, g_glob, g_loc)


# ---------------------------------------------------------------------------
# Inspection exports
# ---------------------------------------------------------------------------

def graph_to_json(graph):
    return json.dumps({
        "nodes": graph.nodes.detach().tolist(),
        "gate": graph.edge_gate.detach().tolist(),
    })


def graph_to_dot(graph):
    lines = ["digraph cognition {"]
    gate = graph.edge_gate.detach()
    for i in range(graph.num_nodes):
        lines.append(f"  n{i};")
    nz = torch.nonzero(gate > 0, as_tuple=False)
    for i, j in nz.tolist():
        lines.append(f'  n{i} -> n{j} [label="{gate[i, j].item():.3f}"];')
    lines.append("}")
    return "\n".join(lines)
