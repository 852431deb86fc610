"""Toy image diffusion teacher for score distillation.

A small convolutional denoiser with a 256-step DDPM-style noise schedule,
pre-trained on renders of synthetic scenes.  It stands in for a large
pretrained image prior: the distillation loss only needs a frozen noise
predictor eps_hat(x_t; t, c) with a known schedule.
"""

import math

import torch
import torch.nn as nn

from .diffusion import timestep_embedding
from .errors import ConfigurationError


class NoiseSchedule:
    """Linear-beta schedule with cached cumulative signal/noise levels."""

    def __init__(self, num_steps=256, beta_start=1e-4, beta_end=0.02):
        if num_steps < 1:
            raise ConfigurationError("noise schedule needs at least one step")
        self.num_steps = num_steps
        betas = torch.linspace(beta_start, beta_end, num_steps)
        alphas_bar = torch.cumprod(1.0 - betas, dim=0)
        self.betas = betas
        self.sqrt_alphas_bar = alphas_bar.sqrt()
        self.sqrt_one_minus = (1.0 - alphas_bar).sqrt()

    def add_noise(self, x0, eps, t):
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
        return self.sqrt_alphas_bar[t] * x0 + self.sqrt_one_minus[t] * eps


class ToyImageDenoiser(nn.Module):
    """Conv stack predicting the noise added to an image.

    The timestep enters through a sinusoidal embedding mapped to per-channel
    scale/shift; an optional conditioning vector is added to the embedding.
    """

    def __init__(self, channels=3, hidden=32, cond_dim=None, num_steps=256):
        super().__init__()
        self.num_steps = num_steps
        self.embed_dim = hidden
        self.inp = nn.Conv2d(channels, hidden, 3, padding=1)
        self.mid = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
        )
        self.out = nn.Conv2d(hidden, channels, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(),
                                      nn.Linear(hidden, 2 * hidden))
        self.cond_proj = nn.Linear(cond_dim, hidden) if cond_dim else None

    def forward(self, x_t, t, cond=None):
        """x_t: [C, H, W] image at integer timestep t; returns eps_hat."""
        emb = timestep_embedding(t / self.num_steps, self.embed_dim,
                                 train_timesteps=self.num_steps)
        emb = emb.to(x_t.dtype)
        if cond is not None:
            if self.cond_proj is None:
                raise ConfigurationError("teacher built without conditioning")
            emb = emb + self.cond_proj(cond)
        scale, shift = self.time_mlp(emb).chunk(2, dim=-1)
        h = self.inp(x_t.unsqueeze(0))
        h = h * (1.0 + scale.view(1, -1, 1, 1)) + shift.view(1, -1, 1, 1)
        h = self.mid(h)
        return self.out(h).squeeze(0)


class TeacherModel(nn.Module):
    """Frozen noise predictor plus its schedule; the distillation interface."""

    def __init__(self, denoiser=None, schedule=None):
        super().__init__()
        self.schedule = schedule or NoiseSchedule()
        self.denoiser = denoiser or ToyImageDenoiser(num_steps=self.schedule.num_steps)

    def predict_noise(self, x_t, t, cond=None):
        return self.denoiser(x_t, t, cond)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def train_teacher(images, steps=200, lr=1e-3, seed=0, cond=None, hidden=32,
                  log_fn=None):
    """Pre-train the toy denoiser on a list of [C, H, W] images.

    Standard denoising objective: sample a timestep and noise, corrupt an
    image, regress the noise.  Returns the (unfrozen) TeacherModel.
    """
    if not images:
        raise ConfigurationError("teacher training needs at least one image")
    torch.manual_seed(seed)
    teacher = TeacherModel(denoiser=ToyImageDenoiser(
        channels=images[0].shape[0], hidden=hidden, num_steps=256))
    sched = teacher.schedule
    opt = torch.optim.Adam(teacher.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for step in range(steps):
        x0 = images[int(torch.randint(len(images), (1,), generator=g))]
        t = int(torch.randint(sched.num_steps, (1,), generator=g))
        eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        x_t = sched.add_noise(x0, eps, t)
        eps_hat = teacher.predict_noise(x_t, t, cond)
        loss = ((eps_hat - eps) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_fn is not None:
            log_fn(step, loss.item())
        if not math.isfinite(loss.item()):
            from .errors import NumericalError
            raise NumericalError(f"teacher loss diverged at step {step}")
    return teacher
