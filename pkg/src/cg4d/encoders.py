"""Foundation token encoders: semantic, spatial, temporal, logical, action.

Small trainable stand-ins with strict interface contracts.  The semantic
encoder is causal in time, the temporal encoder uses a sliding window over
frames, and the spatial encoder refines each view by cross-attending over
the others.  The spatial and temporal encoders share one patch backbone.
"""

import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import Attention, TransformerBlock, mlp
from .errors import ConfigurationError


@dataclass
class TokenBundle:
    """The five token families plus per-patch geometry used downstream."""

    semantic: torch.Tensor     # [F, P, d]
    spatial: torch.Tensor      # [V, P, d]
    temporal: torch.Tensor     # [F, P, d]
    logical: torch.Tensor      # [L, d]
    action: torch.Tensor       # [F, d_a]
    patch_coords: torch.Tensor  # [P, 2] normalized patch centers in [0, 1]
    patch_depth: torch.Tensor   # [P] learned scalar depth per patch


def hash_token(token, table_size):
    """Stable token hash; index 0 is reserved for padding."""
    return 1 + zlib.crc32(token.encode("utf-8")) % (table_size - 1)


class PatchBackbone(nn.Module):
    """Non-overlapping patch embedding: [*, H, W, 3] -> [*, P, d]."""

    def __init__(self, dim, patch):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)

    def forward(self, images):
        if images.shape[-3] % self.patch or images.shape[-2] % self.patch:
            raise ConfigurationError(
                f"image size {tuple(images.shape[-3:-1])} not divisible by patch {self.patch}")
        lead = images.shape[:-3]
        x = images.reshape(-1, *images.shape[-3:]).permute(0, 3, 1, 2)
        feat = self.proj(x)                       # [B, d, H/p, W/p]
        feat = feat.flatten(2).transpose(1, 2)    # [B, P, d]
        return feat.reshape(*lead, *feat.shape[1:])

    def patch_coords(self, height, width, dtype=torch.float32):
        hp, wp = height // self.patch, width // self.patch
        ys = (torch.arange(hp, dtype=dtype) + 0.5) / hp
        xs = (torch.arange(wp, dtype=dtype) + 0.5) / wp
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx.flatten(), gy.flatten()], dim=1)  # [P, 2]


def _frame_mask(num_frames, patches, allow):
    """Token-level [F*P, F*P] mask from a frame-level predicate allow(f, g)."""
    frame = torch.zeros(num_frames, num_frames, dtype=torch.bool)
    for f in range(num_frames):
        for g in range(num_frames):
            frame[f, g] = allow(f, g)
    return frame.repeat_interleave(patches, 0).repeat_interleave(patches, 1)


class SemanticEncoder(nn.Module):
    """Patch embedding plus transformer blocks causally masked over frames."""

    def __init__(self, dim, patch, blocks=2):
        super().__init__()
        self.backbone = PatchBackbone(dim, patch)
        self.blocks = nn.ModuleList(TransformerBlock(dim) for _ in range(blocks))

    def forward(self, images):
        feats = self.backbone(images)             # [F, P, d]
        F_, P, d = feats.shape
        mask = _frame_mask(F_, P, lambda f, g: g <= f)
        x = feats.reshape(F_ * P, d)
        for block in self.blocks:
            x = block(x, mask=mask)
        return x.reshape(F_, P, d)


class TemporalEncoder(nn.Module):
    """Sliding-window attention over frames on top of a shared backbone."""

    def __init__(self, backbone, dim, window=3, blocks=2):
        super().__init__()
        if window % 2 == 0:
            raise ConfigurationError("temporal window must be odd")
        self.backbone = backbone
        self.window = window
        self.blocks = nn.ModuleList(TransformerBlock(dim) for _ in range(blocks))

    def forward(self, images, window=None):
        window = self.window if window is None else window
        if window % 2 == 0:
            raise ConfigurationError("temporal window must be odd")
        half = window // 2
        feats = self.backbone(images)
        F_, P, d = feats.shape
        mask = _frame_mask(F_, P, lambda f, g: abs(f - g) <= half)
        x = feats.reshape(F_ * P, d)
        for block in self.blocks:
            x = block(x, mask=mask)
        return x.reshape(F_, P, d)


class SpatialEncoder(nn.Module):
    """Per-view features refined by cross-attention against the other views."""

    def __init__(self, backbone, dim):
        super().__init__()
        self.backbone = backbone
        self.cross = Attention(dim, dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.depth_head = nn.Linear(dim, 1)

    def forward(self, images):
        feats = self.backbone(images)             # [V, P, d]
        V, P, d = feats.shape
        if V == 1:
            return feats
        out = []
        for v in range(V):
            others = torch.cat([feats[u] for u in range(V) if u != v], dim=0)
            out.append(feats[v] + self.cross(self.norm(feats[v]), others))
        return torch.stack(out)

    def patch_depth(self, spatial_tokens):
        """Positive per-patch scalar lifting (x, y) patches to 3D."""
        pooled = spatial_tokens.mean(dim=0)       # [P, d]
        return torch.nn.functional.softplus(self.depth_head(pooled)).squeeze(-1)


class LogicalEncoder(nn.Module):
    """Pools image patches, embeds hashed text, maps both to L tokens."""

    def __init__(self, dim, num_tokens, table_size=256):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.text = TextEmbedder(dim, table_size)
        self.head = mlp([2 * dim, 4 * dim, num_tokens * dim])

    def forward(self, image_tokens, text=""):
        img = image_tokens.reshape(-1, image_tokens.shape[-1]).mean(dim=0)
        txt = self.text(text).mean(dim=0)
        fused = self.head(torch.cat([img, txt]))
        return fused.reshape(self.num_tokens, self.dim)


class TextEmbedder(nn.Module):
    """Deterministic hashed bag-of-words embedding table."""

    def __init__(self, dim, table_size=256):
        super().__init__()
        self.table = nn.Embedding(table_size, dim)
        self.table_size = table_size

    def forward(self, text):
        words = text.split()
        if not words:
            idx = [0]  # padding token
        else:
            idx = [hash_token(w, self.table_size) for w in words]
        device = self.table.weight.device
        return self.table(torch.tensor(idx, dtype=torch.long, device=device))


class ActionEncoder(nn.Module):
    """Frame-difference features through an MLP; frame 0 uses a zero diff."""

    def __init__(self, dim_action, patch, image_size):
        super().__init__()
        self.pool = nn.AvgPool2d(patch)
        feat = 3 * (image_size // patch) ** 2
        self.head = mlp([feat, 2 * dim_action, dim_action])

    def forward(self, images):
        diffs = torch.cat([torch.zeros_like(images[:1]), images[1:] - images[:-1]])
        pooled = self.pool(diffs.permute(0, 3, 1, 2)).flatten(1)
        return self.head(pooled)                  # [F, d_a]


class FoundationEncoders(nn.Module):
    """Bundles the five encoders behind one token-extraction call."""

    def __init__(self, dim=64, dim_action=32, logical_tokens=8, patch=8,
                 temporal_window=3, text_table=256, image_size=64):
        super().__init__()
        self.dim = dim
        self.patch = patch
        self.semantic = SemanticEncoder(dim, patch)
        shared = PatchBackbone(dim, patch)  # spatial/temporal share this backbone
        self.spatial = SpatialEncoder(shared, dim)
        self.temporal = TemporalEncoder(shared, dim, window=temporal_window)
        self.logical = LogicalEncoder(dim, logical_tokens, table_size=text_table)
        self.action = ActionEncoder(dim_action, patch, image_size)
        self.text_embed = self.logical.text

    def forward(self, temporal_images, view_images=None, text=""):
        """temporal_images [F, H, W, 3]; view_images [V, H, W, 3] (default frame 0)."""
        if view_images is None:
            view_images = temporal_images[:1]
        sem = self.semantic(temporal_images)
        spa = self.spatial(view_images)
        tem = self.temporal(temporal_images)
        log = self.logical(sem, text)
        act = self.action(temporal_images)
        H, W = temporal_images.shape[1:3]
        coords = self.semantic.backbone.patch_coords(H, W, dtype=temporal_images.dtype)
        depth = self.spatial.patch_depth(spa)
        return TokenBundle(semantic=sem, spatial=spa, temporal=tem, logical=log,
                           action=act, patch_coords=coords, patch_depth=depth)
