"""Deformable 4D Gaussian scenes: representation, rendering, metrics, I/O.

A scene is a set of K Gaussians with canonical position, scale, rotation,
opacity, color, and per-axis polynomial deformation coefficients.  The
degree-d coefficient multiplies t^d for d = 1..D, so t=0 is the canonical
pose.  The renderer splats isotropic screen-space footprints and
alpha-composites front to back; it is differentiable w.r.t. every scene
attribute.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, SceneParseError

SCENE_SUFFIX = ".st4d.json"


@dataclass
class Gaussian4DScene:
    """K Gaussians with polynomial motion.  All tensors share one dtype."""

    positions: torch.Tensor  # [K, 3]
    scales: torch.Tensor     # [K, 3], > 0
    rotations: torch.Tensor  # [K, 4], unit quaternions (w, x, y, z)
    opacities: torch.Tensor  # [K], in (0, 1)
    colors: torch.Tensor     # [K, 3], in [0, 1]
    deform: torch.Tensor     # [K, 3, D], degree-d term multiplies t^d

    @property
    def num_gaussians(self):
        return self.positions.shape[0]

    @property
    def degree(self):
        return self.deform.shape[2]

    def validate(self, atol=1e-5):
        K = self.num_gaussians
        if self.scales.shape != (K, 3) or self.rotations.shape != (K, 4):
            raise ConfigurationError("scene attribute shapes disagree on K")
        qn = self.rotations.norm(dim=1)
        if not torch.allclose(qn, torch.ones_like(qn), atol=atol):
            raise ConfigurationError("rotations must be unit quaternions")
        if not bool((self.scales > 0).all()):
            raise ConfigurationError("scales must be strictly positive")
        if not bool(((self.opacities > 0) & (self.opacities < 1)).all()):
            raise ConfigurationError("opacities must lie in (0, 1)")
        if not bool(((self.colors >= 0) & (self.colors <= 1)).all()):
            raise ConfigurationError("colors must lie in [0, 1]")
        return self

    def detach_clone(self):
        return Gaussian4DScene(
            positions=self.positions.detach().clone(),
            scales=self.scales.detach().clone(),
            rotations=self.rotations.detach().clone(),
            opacities=self.opacities.detach().clone(),
            colors=self.colors.detach().clone(),
            deform=self.deform.detach().clone(),
        )

    def to(self, dtype):
        return Gaussian4DScene(*(t.to(dtype) for t in (
            self.positions, self.scales, self.rotations,
            self.opacities, self.colors, self.deform)))


@dataclass
class Camera:
    """Pinhole camera; rotation maps world to camera coordinates."""

    position: torch.Tensor  # [3]
    rotation: torch.Tensor  # [3, 3] orthonormal, world -> camera
    focal: float            # pixels
    resolution: tuple       # (H, W)

    def validate(self, atol=1e-5):
        rrt = self.rotation @ self.rotation.T
        if not torch.allclose(rrt, torch.eye(3, dtype=self.rotation.dtype), atol=atol):
            raise ConfigurationError("camera rotation must be orthonormal")
        if self.focal <= 0:
            raise ConfigurationError("camera focal must be positive")
        return self


def look_at_camera(position, target=(0.0, 0.0, 0.0), focal=64.0, resolution=(64, 64),
                   up=(0.0, 1.0, 0.0), dtype=torch.float32):
    """Camera at `position` whose +z axis points at `target`."""
    pos = torch.as_tensor(position, dtype=dtype)
    tgt = torch.as_tensor(target, dtype=dtype)
    upv = torch.as_tensor(up, dtype=dtype)
    fwd = tgt - pos
    fwd = fwd / fwd.norm()
    right = torch.linalg.cross(fwd, upv)
    if right.norm() < 1e-8:  # looking along up; pick another up
        upv = torch.tensor([1.0, 0.0, 0.0], dtype=dtype)
        right = torch.linalg.cross(fwd, upv)
    right = right / right.norm()
    down = torch.linalg.cross(fwd, right)
    rot = torch.stack([right, down, fwd], dim=0)
    return Camera(position=pos, rotation=rot, focal=float(focal),
                  resolution=tuple(resolution))


def positions_at(scene, t):
    """Deformed positions mu + sum_d C[:, :, d-1] * t^d at time t."""
    pos = scene.positions
    D = scene.degree
    if D == 0:
        return pos
    tt = torch.as_tensor(t, dtype=pos.dtype)
    powers = torch.stack([tt ** d for d in range(1, D + 1)])  # [D]
    return pos + (scene.deform * powers).sum(dim=2)


def project(camera, points):
    """Project world points; returns pixel coordinates and camera depth."""
    rot = camera.rotation.to(points.dtype)
    cam_pts = (points - camera.position.to(points.dtype)) @ rot.T
    depth = cam_pts[:, 2]
    H, W = camera.resolution
    center = torch.tensor([W / 2.0, H / 2.0], dtype=points.dtype)
    uv = camera.focal * cam_pts[:, :2] / depth.unsqueeze(1) + center
    return uv, depth


def render(scene, camera, t=0.0, background=None):
    """Differentiable splat of the scene at time t.

    Visible Gaussians get an isotropic footprint of radius
    focal * mean(scale) / depth and are alpha-composited in ascending
    depth (ties broken by Gaussian index).  Returns [H, W, 3] in [0, 1].
    """
    H, W = camera.resolution
    dtype = scene.positions.dtype
    pts = positions_at(scene, t)
    uv, depth = project(camera, pts)
    visible = depth > 1e-6
    img = torch.zeros(H, W, 3, dtype=dtype)
    if background is not None:
        img = img + torch.as_tensor(background, dtype=dtype)
    if not bool(visible.any()):
        return img.clamp(0.0, 1.0)

    idx = torch.nonzero(visible, as_tuple=False).squeeze(1)
    # stable ascending sort => ties broken by original index
    order = torch.argsort(depth[idx], stable=True)
    idx = idx[order]

    uv_v = uv[idx]                                  # [Kv, 2]
    depth_v = depth[idx]
    radius = camera.focal * scene.scales[idx].mean(dim=1) / depth_v
    radius = radius.clamp(min=1e-4)
    opacity = scene.opacities[idx]
    color = scene.colors[idx]

    ys = torch.arange(H, dtype=dtype) + 0.5
    xs = torch.arange(W, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")   # [H, W]
    dx = gx.unsqueeze(0) - uv_v[:, 0].view(-1, 1, 1)
    dy = gy.unsqueeze(0) - uv_v[:, 1].view(-1, 1, 1)
    foot = torch.exp(-(dx * dx + dy * dy) / (2.0 * radius.view(-1, 1, 1) ** 2))
    alpha = (opacity.view(-1, 1, 1) * foot).clamp(max=1.0 - 1e-6)

    # front-to-back compositing: weight_i = alpha_i * prod_{j<i} (1 - alpha_j)
    trans = torch.cumprod(1.0 - alpha, dim=0)
    trans = torch.cat([torch.ones_like(alpha[:1]), trans[:-1]], dim=0)
    weight = alpha * trans                           # [Kv, H, W]
    img = img + (weight.unsqueeze(-1) * color.view(-1, 1, 1, 3)).sum(dim=0)
    return img.clamp(0.0, 1.0)


def chamfer(p, q):
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    if p.numel() == 0 or q.numel() == 0:
        raise ConfigurationError("chamfer requires non-empty point clouds")
    d2 = torch.cdist(p, q) ** 2
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def f_score(p, q, tau):
    """Harmonic mean of precision/recall of points within distance tau."""
    if tau <= 0:
        raise ConfigurationError("f_score threshold must be positive")
    if p.numel() == 0 or q.numel() == 0:
        raise ConfigurationError("f_score requires non-empty point clouds")
    d = torch.cdist(p, q)
    precision = (d.min(dim=1).values <= tau).float().mean()
    recall = (d.min(dim=0).values <= tau).float().mean()
    denom = precision + recall
    if float(denom) == 0.0:
        return torch.zeros((), dtype=p.dtype)
    return (2 * precision * recall / denom).to(p.dtype)


def temporal_smoothness(scene, times):
    """Second-difference penalty on per-Gaussian displacements.

    For consecutive displacements D_k = pos(t_k) - pos(t_{k-1}), sums the
    per-Gaussian squared norm of D_k - D_{k-1} (mean over Gaussians).
    """
    if len(times) < 3:
        raise ConfigurationError("temporal_smoothness needs at least 3 times")
    pos = [positions_at(scene, t) for t in times]
    disp = [b - a for a, b in zip(pos[:-1], pos[1:])]
    loss = torch.zeros((), dtype=scene.positions.dtype)
    for prev, cur in zip(disp[:-1], disp[1:]):
        loss = loss + ((cur - prev) ** 2).sum(dim=1).mean()
    return loss


# ---------------------------------------------------------------------------
# Scene file format (.st4d.json)
# ---------------------------------------------------------------------------

_SCENE_FIELDS = ("positions", "scales", "rotations", "opacities", "colors", "deform")


def scene_to_dict(scene):
    def listify(t):
        return np.asarray(t.detach().cpu(), dtype=np.float32).tolist()

    return {
        "version": 1,
        "K": int(scene.num_gaussians),
        "D": int(scene.degree),
        "positions": listify(scene.positions),
        "scales": listify(scene.scales),
        "rotations": listify(scene.rotations),
        "opacities": listify(scene.opacities),
        "colors": listify(scene.colors),
        "deform": listify(scene.deform),
    }


def scene_from_dict(data, dtype=torch.float32):
    for key in ("version", "K", "D") + _SCENE_FIELDS:
        if key not in data:
            raise SceneParseError(key, "missing")
    K, D = data["K"], data["D"]
    shapes = {
        "positions": (K, 3),
        "scales": (K, 3),
        "rotations": (K, 4),
        "opacities": (K,),
        "colors": (K, 3),
        "deform": (K, 3, D),
    }
    tensors = {}
    for key, shape in shapes.items():
        try:
            arr = np.asarray(data[key], dtype=np.float32)
        except (ValueError, TypeError):
            raise SceneParseError(key, "not a numeric array")
        if arr.shape != shape:
            raise SceneParseError(key, f"shape {arr.shape} != expected {shape}")
        tensors[key] = torch.from_numpy(arr).to(dtype)
    return Gaussian4DScene(**tensors)


def save_scene(scene, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(scene), f)


def load_scene(path, dtype=torch.float32):
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneParseError("<file>", f"invalid JSON: {e}")
    if not isinstance(data, dict):
        raise SceneParseError("<file>", "top level must be an object")
    return scene_from_dict(data, dtype=dtype)


# ---------------------------------------------------------------------------
# Image export
# ---------------------------------------------------------------------------

def image_to_uint8(img):
    arr = np.asarray(img.detach().cpu(), dtype=np.float64)
    return np.round(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)


def save_png(img, path):
    Image.fromarray(image_to_uint8(img)).save(path, format="PNG")


def save_gif(frames, path, fps=8):
    pils = [Image.fromarray(image_to_uint8(f)) for f in frames]
    pils[0].save(path, format="GIF", save_all=True, append_images=pils[1:],
                 duration=int(1000 / fps), loop=0)
