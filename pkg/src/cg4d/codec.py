"""KL-regularized autoencoder between Gaussian scenes and latent tokens.

The encoder voxelizes canonical positions into a dense feature grid
(count + per-voxel attribute means, with deformation coefficients as
channels) and runs a strided convolution stack; the decoder uses K
learnable queries over the latent tokens with parallel range-enforcing
attribute heads, so decoded scenes satisfy the representation invariants
unconditionally.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import Attention, TransformerBlock, mlp
from .errors import ConfigurationError
from .gaussians import Gaussian4DScene, chamfer

SCALE_FLOOR = 1e-3


@dataclass
class Latent4D:
    mean: torch.Tensor    # [Nz, dz]
    logvar: torch.Tensor  # [Nz, dz]
    z: torch.Tensor       # [Nz, dz]; equals mean when sampling is off


@dataclass
class VoxelGrid:
    grid: torch.Tensor  # [R, R, R, C]; channel 0 is occupancy count
    resolution: int


def voxelize(scene, resolution, bounds=1.0):
    """Bin canonical positions into an R^3 grid over the world cube.

    Occupied voxels carry [count, color(3), opacity(1), scale(3),
    deform(3*D)] with attribute channels averaged over their Gaussians.
    """
    if resolution < 2:
        raise ConfigurationError("voxel resolution must be >= 2")
    K = scene.num_gaussians
    D = scene.degree
    C = 1 + 7 + 3 * D
    attrs = torch.cat([scene.colors, scene.opacities.unsqueeze(1),
                       scene.scales, scene.deform.reshape(K, 3 * D)], dim=1)
    idx = ((scene.positions + bounds) / (2 * bounds) * resolution).long()
    idx = idx.clamp(0, resolution - 1)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    grid = torch.zeros(resolution ** 3, C, dtype=scene.positions.dtype)
    grid.index_add_(0, flat, torch.cat([torch.ones(K, 1, dtype=attrs.dtype), attrs], dim=1))
    count = grid[:, :1]
    mean_attrs = grid[:, 1:] / count.clamp(min=1.0)
    grid = torch.cat([count, mean_attrs], dim=1)
    return VoxelGrid(grid=grid.reshape(resolution, resolution, resolution, C),
                     resolution=resolution)


class SceneEncoder(nn.Module):
    """Strided 3D convolutions over the voxel grid with mu/logvar heads."""

    def __init__(self, deform_degree=2, latent_dim=64, bounds=1.0, hidden=32):
        super().__init__()
        in_ch = 1 + 7 + 3 * deform_degree
        self.bounds = bounds
        self.deform_degree = deform_degree
        self.convs = nn.Sequential(
            nn.Conv3d(in_ch, hidden, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv3d(hidden, hidden, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv3d(hidden, hidden, 3, stride=2, padding=1), nn.GELU(),
        )
        self.mean_head = nn.Linear(hidden, latent_dim)
        self.logvar_head = nn.Linear(hidden, latent_dim)

    def forward(self, scene, resolution=16, sample=False, generator=None):
        grid = voxelize(scene, resolution, bounds=self.bounds).grid
        x = grid.permute(3, 0, 1, 2).unsqueeze(0)           # [1, C, R, R, R]
        feat = self.convs(x)                                # [1, h, R/8, R/8, R/8]
        tokens = feat.flatten(2).squeeze(0).T               # [(R/8)^3, h]
        mean = self.mean_head(tokens)
        logvar = self.logvar_head(tokens).clamp(-10.0, 10.0)
        if sample:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * eps
        else:
            z = mean
        return Latent4D(mean=mean, logvar=logvar, z=z)


def kl_divergence(latent):
    """KL(q || N(0, I)) averaged over latent tokens."""
    mu, logvar = latent.mean, latent.logvar
    per_token = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).sum(dim=1)
    return per_token.mean()


class SceneDecoder(nn.Module):
    """K queries cross-attend over latent tokens; parallel attribute heads."""

    def __init__(self, num_gaussians, latent_dim=64, deform_degree=2,
                 bounds=1.0, width=64, blocks=2):
        super().__init__()
        self.num_gaussians = num_gaussians
        self.bounds = bounds
        self.deform_degree = deform_degree
        self.queries = nn.Parameter(torch.randn(num_gaussians, width) * 0.02)
        self.cross = Attention(width, latent_dim, width)
        self.blocks = nn.ModuleList(TransformerBlock(width) for _ in range(blocks))
        self.head_position = mlp([width, width, 3])
        self.head_scale = mlp([width, width, 3])
        self.head_rotation = mlp([width, width, 4])
        self.head_opacity = mlp([width, width, 1])
        self.head_color = mlp([width, width, 3])
        self.head_deform = mlp([width, width, 3 * deform_degree])

    def forward(self, z, num_gaussians=None):
        K = num_gaussians or self.num_gaussians
        if K < 1:
            raise ConfigurationError("decoder needs at least one Gaussian")
        if K > self.num_gaussians:
            raise ConfigurationError(
                f"decoder supports at most {self.num_gaussians} Gaussians")
        x = self.queries[:K] + self.cross(self.queries[:K], z)
        for block in self.blocks:
            x = block(x)
        positions = self.bounds * torch.tanh(self.head_position(x))
        scales = F.softplus(self.head_scale(x)) + SCALE_FLOOR
        rot = self.head_rotation(x)
        rotations = rot / rot.norm(dim=1, keepdim=True).clamp(min=1e-8)
        opacities = torch.sigmoid(self.head_opacity(x)).squeeze(-1)
        # keep opacity strictly inside (0, 1) for the invariant check
        opacities = opacities.clamp(1e-6, 1.0 - 1e-6)
        colors = torch.sigmoid(self.head_color(x))
        deform = self.head_deform(x).reshape(K, 3, self.deform_degree)
        return Gaussian4DScene(positions=positions, scales=scales,
                               rotations=rotations, opacities=opacities,
                               colors=colors, deform=deform)


class LatentCodec(nn.Module):
    """Encoder/decoder pair plus the codec training loss."""

    def __init__(self, num_gaussians=64, latent_dim=64, deform_degree=2,
                 bounds=1.0, resolution=16, kl_weight=1e-4):
        super().__init__()
        self.resolution = resolution
        self.kl_weight = kl_weight
        self.encoder = SceneEncoder(deform_degree, latent_dim, bounds)
        self.decoder = SceneDecoder(num_gaussians, latent_dim, deform_degree, bounds)

    def encode(self, scene, sample=False, generator=None):
        return self.encoder(scene, resolution=self.resolution, sample=sample,
                            generator=generator)

    def decode(self, z, num_gaussians=None):
        return self.decoder(z, num_gaussians)

    def reconstruction_loss(self, scene, sample=False, generator=None):
        """Chamfer on positions + matched-attribute MSE + weighted KL."""
        latent = self.encode(scene, sample=sample, generator=generator)
        recon = self.decode(latent.z, scene.num_gaussians)
        cd = chamfer(recon.positions, scene.positions)
        # nearest target Gaussian per decoded one supervises the attributes
        with torch.no_grad():
            match = torch.cdist(recon.positions, scene.positions).argmin(dim=1)
        attr_mse = (
            ((recon.colors - scene.colors[match]) ** 2).mean()
            + ((recon.opacities - scene.opacities[match]) ** 2).mean()
            + ((recon.scales - scene.scales[match]) ** 2).mean()
            + ((recon.deform - scene.deform[match]) ** 2).mean()
        )
        kl = kl_divergence(latent)
        total = cd + attr_mse + self.kl_weight * kl
        return total, {"chamfer": cd.item(), "attr_mse": attr_mse.item(),
                       "kl": kl.item()}
