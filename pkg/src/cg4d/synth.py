"""Procedural ground-truth scene generation with templated captions.

Scenes are clusters of Gaussians per object; each object follows one of
four motion programs.  Non-polynomial trajectories (orbit, bob) are
converted to degree-D polynomial coefficients by a least-squares fit over
16 uniformly spaced times so ground truth lives in the same deformation
family as the generator.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import MOTION_FAMILIES
from .errors import ConfigurationError
from .gaussians import Gaussian4DScene, look_at_camera, render

FIT_TIMES = 16

_NUM_WORDS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five",
              6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten"}

_MOTION_PHRASES = {
    "static": "static",
    "linear_drift": "drifting in a straight line",
    "circular_orbit": "moving on a circular orbit",
    "sinusoidal_bob": "bobbing up and down sinusoidally",
}


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    num_objects: int = 2
    gaussians_per_object: int = 32
    motion_family: str = "linear_drift"
    bounds: float = 1.0
    num_frames: int = 8
    num_views: int = 4
    deform_degree: int = 2
    image_size: int = 64

    def __post_init__(self):
        if self.motion_family not in MOTION_FAMILIES:
            raise ConfigurationError(
                f"motion_family must be one of {MOTION_FAMILIES}, "
                f"got {self.motion_family!r}")
        if self.num_objects < 1 or self.gaussians_per_object < 1:
            raise ConfigurationError("need at least one object and one Gaussian")
        if self.num_frames < 1:
            raise ConfigurationError("num_frames must be >= 1")


@dataclass
class GroundTruthSample:
    scene: Gaussian4DScene
    caption: str
    cameras: list
    images: torch.Tensor        # [F, H, W, 3] temporal prompt from camera 0
    view_images: torch.Tensor   # [V, H, W, 3] multi-view render at t=0


def _fit_polynomial(trajectory, times, degree):
    """Least-squares fit of offsets with no constant term.

    trajectory: [T, 3] offsets from the canonical position, zero at t=0.
    Returns [3, degree] coefficients (degree-d term multiplies t^d).
    """
    basis = np.stack([times ** d for d in range(1, degree + 1)], axis=1)  # [T, deg]
    coeffs, *_ = np.linalg.lstsq(basis, trajectory, rcond=None)           # [deg, 3]
    return coeffs.T                                                        # [3, deg]


def _object_offsets(rng, family, center, bounds, degree):
    """Deformation coefficients [3, degree] for one object's motion program."""
    times = np.linspace(0.0, 1.0, FIT_TIMES)
    if family == "static":
        return np.zeros((3, degree))
    if family == "linear_drift":
        vel = rng.uniform(-0.3, 0.3, size=3) * bounds
        coeffs = np.zeros((3, degree))
        coeffs[:, 0] = vel
        return coeffs
    if family == "circular_orbit":
        # rotate the object's center about the world y-axis
        omega = rng.uniform(0.5 * math.pi, math.pi)
        traj = np.zeros((FIT_TIMES, 3))
        cx, cy, cz = center
        for i, t in enumerate(times):
            a = omega * t
            traj[i, 0] = cx * math.cos(a) + cz * math.sin(a) - cx
            traj[i, 2] = -cx * math.sin(a) + cz * math.cos(a) - cz
        return _fit_polynomial(traj, times, degree)
    if family == "sinusoidal_bob":
        amp = rng.uniform(0.1, 0.25) * bounds
        freq = rng.uniform(0.5, 1.0)
        traj = np.zeros((FIT_TIMES, 3))
        traj[:, 1] = amp * np.sin(2.0 * math.pi * freq * times)
        return _fit_polynomial(traj, times, degree)
    raise ConfigurationError(f"unknown motion family {family!r}")


def synth_scene(spec: SyntheticSceneSpec) -> Gaussian4DScene:
    """Deterministic scene synthesis; identical spec yields identical tensors."""
    rng = np.random.default_rng(spec.seed)
    b = spec.bounds
    K = spec.num_objects * spec.gaussians_per_object
    D = spec.deform_degree

    positions = np.zeros((K, 3))
    deform = np.zeros((K, 3, D))
    for obj in range(spec.num_objects):
        center = rng.uniform(-0.55 * b, 0.55 * b, size=3)
        lo, hi = obj * spec.gaussians_per_object, (obj + 1) * spec.gaussians_per_object
        offsets = rng.normal(0.0, 0.08 * b, size=(hi - lo, 3))
        positions[lo:hi] = np.clip(center + offsets, -b, b)
        deform[lo:hi] = _object_offsets(rng, spec.motion_family, center, b, D)

    scales = rng.uniform(0.03 * b, 0.09 * b, size=(K, 3))
    opacities = rng.uniform(0.55, 0.95, size=K)
    colors = rng.uniform(0.25, 1.0, size=(K, 3))
    quats = rng.normal(size=(K, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    f32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
    return Gaussian4DScene(
        positions=f32(positions), scales=f32(scales), rotations=f32(quats),
        opacities=f32(opacities), colors=f32(colors), deform=f32(deform),
    ).validate()


def caption(spec: SyntheticSceneSpec) -> str:
    count = _NUM_WORDS.get(spec.num_objects, str(spec.num_objects))
    noun = "object" if spec.num_objects == 1 else "objects"
    return f"{count} {noun}, {_MOTION_PHRASES[spec.motion_family]}"


def default_cameras(spec, dtype=torch.float32):
    """num_views cameras on a circle around the scene, looking at the origin."""
    H = W = spec.image_size
    cams = []
    radius = 3.0 * spec.bounds
    for v in range(spec.num_views):
        a = 2.0 * math.pi * v / max(spec.num_views, 1)
        pos = (radius * math.sin(a), 0.4 * spec.bounds, radius * math.cos(a))
        cams.append(look_at_camera(pos, focal=float(H), resolution=(H, W), dtype=dtype))
    return cams


def render_prompt_sequence(scene, cameras, frames):
    """Render frame f at t = f/(F-1); camera f % V drives frame f."""
    if not cameras:
        raise ConfigurationError("render_prompt_sequence needs at least one camera")
    if frames < 1:
        raise ConfigurationError("frames must be >= 1")
    images = []
    for f in range(frames):
        t = 0.0 if frames == 1 else f / (frames - 1)
        images.append(render(scene, cameras[f % len(cameras)], t))
    return torch.stack(images)


def make_sample(spec: SyntheticSceneSpec) -> GroundTruthSample:
    scene = synth_scene(spec)
    cams = default_cameras(spec)
    images = render_prompt_sequence(scene, cams[:1], spec.num_frames)
    views = torch.stack([render(scene, c, 0.0) for c in cams])
    return GroundTruthSample(scene=scene, caption=caption(spec), cameras=cams,
                             images=images, view_images=views)
