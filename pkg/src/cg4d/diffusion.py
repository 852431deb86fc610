"""Cognition-guided diffusion transformer trained with flow matching.

Rectified-flow convention: data lives at tau=0, noise at tau=1,
z_tau = (1 - tau) z0 + tau eps, and the regression target is the constant
velocity eps - z0.  Sampling integrates the learned field from tau=1 down
to 0 with plain Euler steps.  Each block is adaLN-modulated self-attention
over the latent tokens, cross-attention against the conditioning graph
nodes, and an MLP, all residual.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import Attention, FeedForward, mlp
from .errors import ConfigurationError


@dataclass
class ConditioningSequence:
    """Predicted graph nodes concatenated over the horizon.

    tokens: [T_c * n, d] with additive learned frame-index embeddings
    already applied; frame_count tracks T_c.
    """

    tokens: torch.Tensor
    frame_count: int


@dataclass
class DiffusionConfig:
    train_timesteps: int = 1000
    sample_steps: int = 50
    blocks: int = 4
    heads: int = 4
    width: int = 128

    def __post_init__(self):
        if self.sample_steps < 1 or self.train_timesteps < self.sample_steps:
            raise ConfigurationError("need train_timesteps >= sample_steps >= 1")


def make_conditioning(graphs, frame_embed):
    """Stack node tensors of predicted graphs with frame-index embeddings.

    frame_embed: [max_frames, d] learned table.
    """
    if len(graphs) > frame_embed.shape[0]:
        raise ConfigurationError("conditioning horizon exceeds frame embedding table")
    tokens = torch.cat([g.nodes + frame_embed[i] for i, g in enumerate(graphs)])
    return ConditioningSequence(tokens=tokens, frame_count=len(graphs))


def flow_interp(z0, eps, tau):
    """Linear interpolation toward noise and its target velocity."""
    if z0.shape != eps.shape:
        raise ConfigurationError("flow_interp operands must share a shape")
    tau = torch.as_tensor(tau, dtype=z0.dtype)
    z_tau = (1.0 - tau) * z0 + tau * eps
    return z_tau, eps - z0


def timestep_embedding(tau, width, train_timesteps=1000):
    """Sinusoidal embedding of tau scaled by the training timestep count.

    tau may be a scalar or a [B] tensor; the batch dim carries through.
    """
    half = width // 2
    t = torch.as_tensor(tau, dtype=torch.get_default_dtype()) * train_timesteps
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    angles = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class DiTBlock(nn.Module):
    """adaLN self-attention, conditioning cross-attention, MLP; all residual."""

    def __init__(self, width, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.mod = nn.Linear(width, 2 * width)
        self.self_attn = Attention(width, width, width, heads=heads)
        self.norm2 = nn.LayerNorm(width)
        self.cross_attn = Attention(width, width, width, heads=heads)
        self.norm3 = nn.LayerNorm(width)
        self.ff = FeedForward(width)

    def forward(self, x, t_emb, cond_tokens):
        scale, shift = self.mod(t_emb).chunk(2, dim=-1)
        if x.dim() == scale.dim() + 1:
            scale, shift = scale.unsqueeze(-2), shift.unsqueeze(-2)
        h = (1.0 + scale) * self.norm1(x) + shift
        x = x + self.self_attn(h, h)
        if cond_tokens is not None:
            x = x + self.cross_attn(self.norm2(x), cond_tokens)
        x = x + self.ff(self.norm3(x))
        return x


class CGDiT(nn.Module):
    """Velocity field over latent tokens conditioned on cognition graphs."""

    def __init__(self, latent_dim, cond_dim=None, config=None, max_frames=16):
        super().__init__()
        self.config = config or DiffusionConfig()
        w = self.config.width
        self.latent_dim = latent_dim
        self.in_proj = nn.Linear(latent_dim, w)
        self.cond_proj = nn.Linear(cond_dim, w) if cond_dim else None
        self.cond_dim = cond_dim
        self.time_mlp = mlp([w, w, w])
        self.blocks = nn.ModuleList(
            DiTBlock(w, self.config.heads) for _ in range(self.config.blocks))
        self.out_norm = nn.LayerNorm(w)
        self.out_proj = nn.Linear(w, latent_dim)
        self.frame_embed = nn.Parameter(torch.randn(max_frames, cond_dim or 1) * 0.02)

    def time_embedding(self, tau):
        emb = timestep_embedding(tau, self.config.width, self.config.train_timesteps)
        return self.time_mlp(emb.to(self.in_proj.weight.dtype))

    def velocity(self, z_tau, tau, cond=None):
        """z_tau [N, latent_dim] -> predicted velocity of the same shape."""
        cond_tokens = None
        if cond is not None:
            if self.cond_proj is None:
                raise ConfigurationError("model built without conditioning support")
            if cond.tokens.shape[-1] != self.cond_dim:
                raise ConfigurationError(
                    f"conditioning dim {cond.tokens.shape[-1]} != expected {self.cond_dim}")
            cond_tokens = self.cond_proj(cond.tokens)
        t_emb = self.time_embedding(tau)
        x = self.in_proj(z_tau)
        for block in self.blocks:
            x = block(x, t_emb, cond_tokens)
        return self.out_proj(self.out_norm(x))

    forward = velocity

    def fm_loss(self, z0, cond=None, generator=None):
        """Mean flow-matching loss with per-element tau and seeded noise.

        z0: [B, N, latent_dim] batch (or [N, latent_dim] single element).
        cond: None, one shared ConditioningSequence, or a per-element list.
        """
        if isinstance(cond, (list, tuple)):
            total = 0.0
            for z, c in zip(z0, cond):
                total = total + self.fm_loss(z, c, generator=generator)
            return total / len(cond)
        single = z0.dim() == 2
        if single:
            z0 = z0.unsqueeze(0)
        B = z0.shape[0]
        tau = torch.rand(B, generator=generator, dtype=z0.dtype)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        t = tau.view(B, 1, 1)
        z_tau = (1.0 - t) * z0 + t * eps
        v_target = eps - z0
        v_hat = self.velocity(z_tau, tau, cond)
        return ((v_hat - v_target) ** 2).mean()

    def sample(self, shape, cond=None, steps=None, generator=None,
               velocity_fn=None):
        """Euler integration from seeded noise at tau=1 down to tau=0."""
        steps = steps or self.config.sample_steps
        if steps < 1:
            raise ConfigurationError("sample steps must be >= 1")
        velocity_fn = velocity_fn or (lambda z, tau: self.velocity(z, tau, cond))
        dtype = self.in_proj.weight.dtype
        z = torch.randn(shape, generator=generator, dtype=dtype)
        dt = 1.0 / steps
        for k in range(steps):
            tau = 1.0 - k * dt
            z = z - dt * velocity_fn(z, tau)
        return z
