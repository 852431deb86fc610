"""Run configuration: one flat, documented key set shared by every command.

Config is loaded from a JSON file and may be overridden per key on the
command line.  Unknown keys are rejected so typos fail loudly.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError

MOTION_FAMILIES = ("static", "linear_drift", "circular_orbit", "sinusoidal_bob")


@dataclass
class RunConfig:
    # global
    seed: int = 0
    out_dir: str = ""  # empty -> $ST4D_HOME or ./st4d_runs

    # synthetic scenes
    scene_bounds: float = 1.0
    scene_deform_degree: int = 2
    scene_num_objects: int = 2
    scene_gaussians_per_object: int = 32
    scene_motion_family: str = "linear_drift"
    scene_num_frames: int = 8
    scene_num_views: int = 4
    image_size: int = 64

    # foundation encoders
    enc_dim: int = 64
    enc_action_dim: int = 32
    enc_logical_tokens: int = 8
    enc_patch: int = 8
    enc_temporal_window: int = 3
    enc_text_table: int = 256

    # cognition graphs
    graph_nodes: int = 256
    graph_edge_dim: int = 32
    graph_topk: int = 8

    # world model
    wm_slots: int = 16
    wm_state_dim: int = 64
    wm_context: int = 8
    wm_horizon: int = 4
    wm_sigreg_random_projection: bool = False

    # latent codec
    codec_resolution: int = 16
    codec_latent_dim: int = 64
    codec_gaussians: int = 64
    codec_kl_weight: float = 1e-4

    # diffusion transformer
    dit_train_timesteps: int = 1000
    dit_sample_steps: int = 50
    dit_blocks: int = 4
    dit_heads: int = 4
    dit_width: int = 128
    dit_sample_steps_train: int = 4
    dit_single_latent: bool = False

    # loss weights
    loss_alpha: float = 0.1
    loss_beta: float = 0.5
    loss_gamma: float = 1.0
    loss_lambda1: float = 1.0
    loss_lambda2: float = 0.1
    loss_lambda3: float = 0.5

    # training
    train_steps: int = 200
    train_batch: int = 4
    train_lr: float = 1e-4
    train_weight_decay: float = 0.01
    train_warmup_frac: float = 0.1
    train_dataset_scenes: int = 8

    # teacher diffusion
    teacher_timesteps: int = 256
    teacher_channels: int = 16
    teacher_steps: int = 200
    teacher_lr: float = 1e-3

    # evaluation
    eval_f_tau: float = 0.1
    eval_frames: int = 4

    def __post_init__(self):
        if self.scene_motion_family not in MOTION_FAMILIES:
            raise ConfigurationError(
                f"scene_motion_family must be one of {MOTION_FAMILIES}, "
                f"got {self.scene_motion_family!r}"
            )
        if self.enc_temporal_window % 2 == 0:
            raise ConfigurationError("enc_temporal_window must be odd")
        if self.dit_sample_steps < 1 or self.dit_train_timesteps < self.dit_sample_steps:
            raise ConfigurationError("need dit_train_timesteps >= dit_sample_steps >= 1")

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
        return cls.from_dict(data)

    def with_overrides(self, overrides):
        """Apply key=value string overrides, coercing to the field's type."""
        data = dataclasses.asdict(self)
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for key, raw in overrides.items():
            if key not in data:
                raise ConfigurationError(f"unknown config key: {key}")
            t = type(getattr(self, key))
            try:
                if t is bool:
                    data[key] = raw if isinstance(raw, bool) else raw.lower() in ("1", "true", "yes")
                else:
                    data[key] = t(raw)
            except (TypeError, ValueError):
                raise ConfigurationError(f"cannot parse {raw!r} as {types[key]} for key {key}")
        return RunConfig.from_dict(data)

    def artifact_root(self):
        if self.out_dir:
            return self.out_dir
        return os.environ.get("ST4D_HOME", os.path.join(os.getcwd(), "st4d_runs"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
