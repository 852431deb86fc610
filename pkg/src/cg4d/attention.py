"""Small attention building blocks shared by every subsystem.

Single-head attention is used wherever the contracts are tested against
closed-form behavior (one key => output equals the value projection);
multi-head with an output projection is used inside the DiT blocks.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def masked_softmax(scores, mask=None):
    """Softmax over the last dim; masked positions get exactly zero weight."""
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


class Attention(nn.Module):
    """Scaled dot-product attention with separate q/kv input dims.

    With heads=1 there is no output projection, so a single key yields
    exactly the value projection of that key's token.
    """

    def __init__(self, dim_q, dim_kv, dim, heads=1):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim_q, dim)
        self.k_proj = nn.Linear(dim_kv, dim)
        self.v_proj = nn.Linear(dim_kv, dim)
        self.out_proj = nn.Linear(dim, dim) if heads > 1 else None

    def forward(self, queries, keys_values, mask=None, return_weights=False):
        """queries [..., Nq, dq], keys_values [..., Nk, dkv], mask [Nq, Nk].

        Leading batch dims broadcast through; the kv tensor may omit them.
        """
        if queries.dim() > keys_values.dim():
            keys_values = keys_values.expand(*queries.shape[:-2], *keys_values.shape)
        q = self.q_proj(queries)
        k = self.k_proj(keys_values)
        v = self.v_proj(keys_values)
        h = self.heads
        hd = self.dim // h

        def split(x):
            return x.unflatten(-1, (h, hd)).transpose(-3, -2)  # [..., h, N, hd]

        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        weights = masked_softmax(scores, mask)
        out = (weights @ v).transpose(-3, -2).flatten(-2)
        if self.out_proj is not None:
            out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim, hidden=None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with an optional attention mask."""

    def __init__(self, dim, heads=1):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, dim, dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, mask=mask)
        x = x + self.ff(self.norm2(x))
        return x


def mlp(dims, activation=nn.GELU):
    """Plain MLP over a list of layer widths."""
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)
