"""Latent world model over cognition graphs.

Distills a fused graph into m state slots, conditions them on a pooled
action vector via adaptive layer normalization, predicts the next state
with a causally masked transformer over slot-time tokens, and resamples
the prediction back into a future cognition graph.  The moment-matching
regularizer keeps batches of states from collapsing.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import Attention, FeedForward, mlp
from .errors import ConfigurationError
from .graphs import CognitionGraph


@dataclass
class WorldState:
    slots: torch.Tensor  # [m, d_s]
    time_index: int = 0


@dataclass
class ActionVector:
    a: torch.Tensor  # [d_a]


def sigreg(states):
    """Moment-matching pull toward zero mean / identity covariance.

    states: [B, D] flattened state batch, B >= 2.  Uses the unbiased
    sample covariance.  Zero exactly when the batch is whitened.
    """
    if states.dim() != 2 or states.shape[0] < 2:
        raise ConfigurationError("sigreg needs a [B, D] batch with B >= 2")
    mean = states.mean(dim=0)
    centered = states - mean
    cov = centered.T @ centered / (states.shape[0] - 1)
    eye = torch.eye(states.shape[1], dtype=states.dtype)
    return (mean ** 2).sum() + ((cov - eye) ** 2).sum()


def sigreg_random_projection(states, num_projections=16, seed=0):
    """1-D moment matching along random directions; optional variant."""
    if states.dim() != 2 or states.shape[0] < 2:
        raise ConfigurationError("sigreg needs a [B, D] batch with B >= 2")
    g = torch.Generator().manual_seed(seed)
    dirs = torch.randn(states.shape[1], num_projections, generator=g,
                       dtype=states.dtype)
    dirs = dirs / dirs.norm(dim=0, keepdim=True)
    proj = states @ dirs                          # [B, num_projections]
    mean = proj.mean(dim=0)
    var = proj.var(dim=0, unbiased=True)
    return (mean ** 2).mean() + ((var - 1.0) ** 2).mean()


def loss_wm(pred, target, states_batch, alpha=0.1):
    """Prediction MSE plus alpha * sigreg over the state batch."""
    if pred.shape != target.shape:
        raise ConfigurationError("loss_wm prediction/target shape mismatch")
    mse = ((pred - target) ** 2).mean()
    return mse + alpha * sigreg(states_batch)


class StateDistiller(nn.Module):
    """m learnable queries cross-attend over fused graph nodes."""

    def __init__(self, num_slots, dim_nodes, dim_state):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(num_slots, dim_state) * 0.02)
        self.attn = Attention(dim_state, dim_nodes, dim_state)

    def forward(self, graph):
        if graph.kind != "fused":
            raise ConfigurationError("state distillation expects a fused graph")
        return WorldState(slots=self.attn(self.queries, graph.nodes))


class ActionPooler(nn.Module):
    """Single learnable query attends over action tokens, then an MLP."""

    def __init__(self, dim_action):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, dim_action) * 0.02)
        self.attn = Attention(dim_action, dim_action, dim_action)
        self.head = mlp([dim_action, 2 * dim_action, dim_action])

    def forward(self, action_tokens):
        if action_tokens.shape[0] < 1:
            raise ConfigurationError("action pooling needs at least one token")
        pooled = self.attn(self.query, action_tokens).squeeze(0)
        return ActionVector(a=self.head(pooled))


class AdaLNConditioner(nn.Module):
    """Per-slot LN modulated by action-derived scale and shift."""

    def __init__(self, dim_state, dim_action):
        super().__init__()
        self.norm = nn.LayerNorm(dim_state, elementwise_affine=False)
        self.gamma = mlp([dim_action, dim_state, dim_state])
        self.beta = mlp([dim_action, dim_state, dim_state])

    def forward(self, state, action):
        normed = self.norm(state.slots)
        g = self.gamma(action.a)
        b = self.beta(action.a)
        return WorldState(slots=(1.0 + g) * normed + b,
                          time_index=state.time_index)


class CausalPredictor(nn.Module):
    """Causal transformer over slot-time tokens; emits the next state.

    Tokens are the m slots of each history state plus a learned time
    embedding; attention is block-lower-triangular over time (slots of
    one step see each other and every earlier step).
    """

    def __init__(self, num_slots, dim_state, max_context=8, blocks=2):
        super().__init__()
        self.num_slots = num_slots
        self.max_context = max_context
        self.time_embed = nn.Parameter(torch.randn(max_context, dim_state) * 0.02)
        from .attention import TransformerBlock
        self.blocks = nn.ModuleList(TransformerBlock(dim_state) for _ in range(blocks))
        self.head = nn.Linear(dim_state, dim_state)

    def causal_mask(self, steps):
        frame = torch.tril(torch.ones(steps, steps, dtype=torch.bool))
        m = self.num_slots
        return frame.repeat_interleave(m, 0).repeat_interleave(m, 1)

    def forward(self, history):
        if not history:
            raise ConfigurationError("predictor needs a non-empty history")
        history = history[-self.max_context:]
        steps = len(history)
        x = torch.cat([s.slots + self.time_embed[i] for i, s in enumerate(history)])
        mask = self.causal_mask(steps)
        for block in self.blocks:
            x = block(x, mask=mask)
        last = x[(steps - 1) * self.num_slots:]
        return WorldState(slots=self.head(last),
                          time_index=history[-1].time_index + 1)

    def attention_weights(self, history):
        """Attention weights of the first block, for mask inspection."""
        history = history[-self.max_context:]
        steps = len(history)
        x = torch.cat([s.slots + self.time_embed[i] for i, s in enumerate(history)])
        block = self.blocks[0]
        h = block.norm1(x)
        _, weights = block.attn(h, h, mask=self.causal_mask(steps), return_weights=True)
        return weights.squeeze(0)


class ResampleDecoder(nn.Module):
    """Projects a predicted state back into graph space.

    Graph nodes query the predicted slots; edges are rebuilt by the shared
    edge builder from a cached logical context.
    """

    def __init__(self, dim_nodes, dim_state, edge_builder):
        super().__init__()
        self.attn = Attention(dim_nodes, dim_state, dim_nodes)
        self.ffn = FeedForward(dim_nodes)
        self.edge_builder = edge_builder

    def forward(self, graph, state_next, logical_context):
        if graph.kind != "fused":
            raise ConfigurationError("resampling expects a fused graph")
        nodes = graph.nodes + self.attn(graph.nodes, state_next.slots)
        nodes = nodes + self.ffn(nodes)
        edge_feats, gate = self.edge_builder(nodes, context=logical_context)
        return CognitionGraph(kind="fused", nodes=nodes, edge_feats=edge_feats,
                              edge_gate=gate, topk=self.edge_builder.topk)


class WorldModel(nn.Module):
    """Distill -> condition -> predict -> resample, rolled out autoregressively."""

    def __init__(self, dim_nodes, dim_state=64, dim_action=32, num_slots=16,
                 max_context=8, edge_builder=None):
        super().__init__()
        self.distill = StateDistiller(num_slots, dim_nodes, dim_state)
        self.pool_action = ActionPooler(dim_action)
        self.condition = AdaLNConditioner(dim_state, dim_action)
        self.predictor = CausalPredictor(num_slots, dim_state, max_context)
        self.decoder = ResampleDecoder(dim_nodes, dim_state, edge_builder)

    def rollout(self, graph, action_tokens, horizon, logical_tokens=None,
                logical_context=None):
        """Autoregressive future graphs; the input graph is never mutated."""
        if horizon < 1:
            raise ConfigurationError("rollout horizon must be >= 1")
        if logical_context is None:
            if logical_tokens is None:
                raise ConfigurationError("rollout needs logical tokens or context")
            eb = self.decoder.edge_builder
            logical_context = eb.logical_context(graph.nodes, logical_tokens)
        action = self.pool_action(action_tokens)
        history = []
        current = graph
        futures = []
        for _ in range(horizon):
            state = self.distill(current)
            state = WorldState(slots=state.slots, time_index=len(history))
            conditioned = self.condition(state, action)
            history.append(conditioned)
            predicted = self.predictor(history)
            current = self.decoder(current, predicted, logical_context)
            futures.append(current)
        return futures
