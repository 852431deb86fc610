"""End-to-end generation pipeline.

Prompt images flow through the foundation encoders into three cognition
graphs, fuse, roll forward through the world model, and condition the
latent diffusion transformer; sampled latents decode into a 4D Gaussian
scene.  Text-only prompts skip perception: a learned adapter builds the
conditioning graph directly from embedded text tokens.
"""

import json
import os
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import Attention
from .codec import LatentCodec
from .config import RunConfig
from .diffusion import CGDiT, DiffusionConfig, make_conditioning
from .encoders import FoundationEncoders
from .errors import ConfigurationError
from .gaussians import render
from .graphs import CognitionGraph, CognitionGraphStack
from .worldmodel import WorldModel


@dataclass
class GenerationResult:
    scene: object                 # Gaussian4DScene
    frames: torch.Tensor          # [H, img, img, 3] renders along the horizon
    graphs: list                  # predicted fused graphs, one per future step
    latents: torch.Tensor         # [H, Nz, dz] sampled latent tokens


class TextToGraphAdapter(nn.Module):
    """Builds a fused cognition graph from text tokens alone.

    Learnable node seeds cross-attend over the embedded prompt; edges come
    from the shared edge builder with the text tokens standing in for the
    logical stream.
    """

    def __init__(self, num_nodes, dim, edge_builder):
        super().__init__()
        self.seeds = nn.Parameter(torch.randn(num_nodes, dim) * 0.02)
        self.attn = Attention(dim, dim, dim)
        self.edge_builder = edge_builder

    def forward(self, text_tokens):
        if text_tokens.shape[0] < 1:
            raise ConfigurationError("text adapter needs at least one token")
        nodes = self.seeds + self.attn(self.seeds, text_tokens)
        edge_feats, gate = self.edge_builder(nodes, logical_tokens=text_tokens)
        return CognitionGraph(kind="fused", nodes=nodes, edge_feats=edge_feats,
                              edge_gate=gate, topk=self.edge_builder.topk)


class Pipeline(nn.Module):
    """All trainable components behind one module, built from a RunConfig."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config or RunConfig()
        self.config = cfg
        self.encoders = FoundationEncoders(
            dim=cfg.enc_dim, dim_action=cfg.enc_action_dim,
            logical_tokens=cfg.enc_logical_tokens, patch=cfg.enc_patch,
            temporal_window=cfg.enc_temporal_window,
            text_table=cfg.enc_text_table, image_size=cfg.image_size)
        self.graphs = CognitionGraphStack(
            cfg.graph_nodes, cfg.enc_dim, edge_dim=cfg.graph_edge_dim,
            topk=cfg.graph_topk)
        self.world = WorldModel(
            dim_nodes=cfg.enc_dim, dim_state=cfg.wm_state_dim,
            dim_action=cfg.enc_action_dim, num_slots=cfg.wm_slots,
            max_context=cfg.wm_context,
            edge_builder=self.graphs.builder.edges)
        self.codec = LatentCodec(
            num_gaussians=cfg.codec_gaussians, latent_dim=cfg.codec_latent_dim,
            deform_degree=cfg.scene_deform_degree, bounds=cfg.scene_bounds,
            resolution=cfg.codec_resolution, kl_weight=cfg.codec_kl_weight)
        self.dit = CGDiT(
            latent_dim=cfg.codec_latent_dim, cond_dim=cfg.enc_dim,
            config=DiffusionConfig(
                train_timesteps=cfg.dit_train_timesteps,
                sample_steps=cfg.dit_sample_steps, blocks=cfg.dit_blocks,
                heads=cfg.dit_heads, width=cfg.dit_width),
            max_frames=max(16, cfg.wm_horizon))
        self.text_adapter = TextToGraphAdapter(
            cfg.graph_nodes, cfg.enc_dim, self.graphs.builder.edges)

    @property
    def latent_tokens(self):
        return (self.config.codec_resolution // 8) ** 3

    def perceive(self, images, view_images=None, text=""):
        """Prompt frames -> token bundle + fused graph (+ components)."""
        bundle = self.encoders(images, view_images, text)
        fused, components = self.graphs(bundle)
        return bundle, fused, components

    def predict_graphs(self, bundle, fused, horizon):
        """Roll the fused graph forward under the prompt's action tokens."""
        return self.world.rollout(fused, bundle.action, horizon,
                                  logical_tokens=bundle.logical)

    def graphs_from_text(self, text, horizon):
        """Text-only conditioning path: adapter graph + neutral-action rollout."""
        tokens = self.encoders.text_embed(text)
        fused = self.text_adapter(tokens)
        actions = torch.zeros(1, self.config.enc_action_dim,
                              dtype=tokens.dtype)
        logical_context = self.graphs.builder.edges.context_attn(
            fused.nodes.mean(dim=0, keepdim=True), tokens).squeeze(0)
        return self.world.rollout(fused, actions, horizon,
                                  logical_context=logical_context)

    def generate(self, images=None, view_images=None, text="", horizon=None,
                 seed=0, sample_steps=None):
        """Full prompt-to-scene path; deterministic under the seed."""
        cfg = self.config
        horizon = horizon or cfg.wm_horizon
        if images is None and not text:
            raise ConfigurationError(
                "generation needs prompt images or a text prompt "
                "(pass --prompt or --prompt-images)")
        with torch.no_grad():
            if images is not None:
                bundle, fused, _ = self.perceive(images, view_images, text)
                future = self.predict_graphs(bundle, fused, horizon)
            else:
                future = self.graphs_from_text(text, horizon)
            cond = make_conditioning(future, self.dit.frame_embed)
            if cfg.dit_single_latent:
                shape = (self.latent_tokens, cfg.codec_latent_dim)
            else:
                shape = (horizon, self.latent_tokens, cfg.codec_latent_dim)
            g = torch.Generator().manual_seed(seed)
            z = self.dit.sample(shape, cond=cond,
                                steps=sample_steps or cfg.dit_sample_steps,
                                generator=g)
            scene = self.codec.decode(z.reshape(-1, cfg.codec_latent_dim))
            cameras = _orbit_camera(cfg)
            frames = torch.stack([
                render(scene, cameras, 0.0 if horizon == 1 else h / (horizon - 1))
                for h in range(horizon)])
        return GenerationResult(scene=scene, frames=frames, graphs=future,
                                latents=z.reshape(horizon if not cfg.dit_single_latent else 1,
                                                  self.latent_tokens, -1))


def _orbit_camera(cfg):
    from .gaussians import look_at_camera
    H = cfg.image_size
    return look_at_camera((0.0, 0.4 * cfg.scene_bounds, 3.0 * cfg.scene_bounds),
                          focal=float(H), resolution=(H, H))


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(path, module, config, stage, step, seed, extra=None):
    """Write a checkpoint directory: weights blob plus meta.json."""
    os.makedirs(path, exist_ok=True)
    torch.save(module.state_dict(), os.path.join(path, "weights.pt"))
    meta = {"stage": stage, "step": step, "seed": seed,
            "config": {k: getattr(config, k) for k in config.field_names()}}
    if extra:
        meta.update(extra)
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path


def load_checkpoint(path, module):
    weights = os.path.join(path, "weights.pt")
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(weights) or not os.path.exists(meta_path):
        raise ConfigurationError(
            f"no checkpoint at {path}; run the matching train command first")
    module.load_state_dict(torch.load(weights, weights_only=True))
    with open(meta_path, "r", encoding="utf-8") as f:
        return json.load(f)
