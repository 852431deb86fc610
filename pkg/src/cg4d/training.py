"""Loss stack and the three-stage training schedule.

Stage 1 learns cognition evolution in two phases (train the predictor with
the action encoder fixed, then train the state path with the predictor
frozen).  Stage 2 aligns pixel appearance through score distillation
against a frozen toy teacher.  Stage 3 fine-tunes everything jointly under
the weighted total objective.  Every declared freeze is audited by
measuring gradient norms, and each step appends one JSON line to the run
log.
"""

import json
import math
import os
from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError, NumericalError
from .gaussians import chamfer, positions_at, render, temporal_smoothness
from .pipeline import Pipeline, load_checkpoint, save_checkpoint
from .synth import SyntheticSceneSpec, default_cameras, make_sample
from .teacher import TeacherModel, train_teacher
from .worldmodel import WorldState, loss_wm


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.5
    gamma: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.5
    w_t: object = None  # timestep weighting; None means constant 1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be nonnegative")

    def weight_at(self, t):
        return 1.0 if self.w_t is None else self.w_t(t)

    @classmethod
    def from_config(cls, cfg):
        return cls(alpha=cfg.loss_alpha, beta=cfg.loss_beta, gamma=cfg.loss_gamma,
                   lambda1=cfg.loss_lambda1, lambda2=cfg.loss_lambda2,
                   lambda3=cfg.loss_lambda3)


def loss_sds(image, teacher, cond=None, seed=0, weights=None):
    """Score-distillation loss on one rendered image [H, W, 3].

    The reported value is w(t)·‖eps_hat - eps‖²; the gradient reaching the
    image is w(t)·sqrt(abar_t)·(eps_hat - eps) per pixel, with the teacher
    treated as a black-box score (its Jacobian is detached).
    """
    sched = teacher.schedule
    g = torch.Generator().manual_seed(seed)
    t = int(torch.randint(sched.num_steps, (1,), generator=g))
    x = image.permute(2, 0, 1)
    eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
    x_t = sched.add_noise(x.detach(), eps, t)
    with torch.no_grad():
        eps_hat = teacher.predict_noise(x_t, t, cond)
    w = (weights or LossWeights()).weight_at(t)
    residual = (eps_hat - eps).detach()
    value = w * (residual ** 2).sum()
    surrogate = (w * sched.sqrt_alphas_bar[t] * residual * x).sum()
    return value + surrogate - surrogate.detach()


def loss_st(pred_scene, gt_scene, cameras, times, weights=None):
    """Structure/appearance supervision between predicted and target scenes.

    Chamfer on canonical positions, weighted deformation smoothness of the
    prediction, and mean pixel MSE over the shared (camera, time) schedule.
    """
    if not cameras or len(times) == 0:
        raise ConfigurationError("loss_st needs a shared camera/time schedule")
    w = weights or LossWeights()
    cd = chamfer(positions_at(pred_scene, 0.0), positions_at(gt_scene, 0.0))
    times_t = torch.as_tensor(times, dtype=pred_scene.positions.dtype)
    smooth = temporal_smoothness(pred_scene, times_t)
    pix = 0.0
    for cam in cameras:
        for t in times:
            diff = render(pred_scene, cam, float(t)) - render(gt_scene, cam, float(t))
            pix = pix + (diff ** 2).mean()
    pix = pix / (len(cameras) * len(times))
    return cd + w.beta * smooth + w.gamma * pix


def loss_total(parts, weights=None):
    """lambda1·L_wm + lambda2·L_sds + lambda3·L_st."""
    w = weights or LossWeights()
    return (w.lambda1 * parts["wm"] + w.lambda2 * parts["sds"]
            + w.lambda3 * parts["st"])


# ---------------------------------------------------------------------------
# Shared training plumbing
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    checkpoint: str
    log_path: str
    losses: list = field(default_factory=list)
    frozen_grad_max: dict = field(default_factory=dict)


class JsonlLogger:
    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._f = open(path, "a", encoding="utf-8")

    def log(self, record):
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def make_dataset(cfg):
    """Deterministic list of ground-truth samples derived from the config."""
    if cfg.train_dataset_scenes < 1:
        raise ConfigurationError("train_dataset_scenes must be >= 1")
    samples = []
    for i in range(cfg.train_dataset_scenes):
        spec = SyntheticSceneSpec(
            seed=cfg.seed * 1000 + i, num_objects=cfg.scene_num_objects,
            gaussians_per_object=cfg.scene_gaussians_per_object,
            motion_family=cfg.scene_motion_family, bounds=cfg.scene_bounds,
            num_frames=cfg.scene_num_frames, num_views=cfg.scene_num_views,
            deform_degree=cfg.scene_deform_degree, image_size=cfg.image_size)
        samples.append(make_sample(spec))
    return samples


def max_grad_norm(params):
    """Largest gradient norm over the parameter iterable; None grads count 0."""
    worst = 0.0
    for p in params:
        if p.grad is not None:
            worst = max(worst, p.grad.norm().item())
    return worst


def set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_finite(loss, stage, step):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at {stage} step {step}")


def lr_at(step, total, base_lr, warmup_frac):
    """Linear warmup to base_lr, then cosine annealing to zero."""
    warmup = max(1, int(total * warmup_frac))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Stage 1: cognition-evolution learning (two phases)
# ---------------------------------------------------------------------------

def _frame_states(pipeline, bundle):
    """Per-frame state slots distilled directly from semantic tokens."""
    distill = pipeline.world.distill
    return [distill.attn(distill.queries, bundle.semantic[f])
            for f in range(bundle.semantic.shape[0])]


def _phase_a_loss(pipeline, sample, weights):
    """Predictor training: next-state prediction over semantic-token states."""
    world = pipeline.world
    bundle = pipeline.encoders(sample.images, sample.view_images, sample.caption)
    action = world.pool_action(bundle.action)
    slots = _frame_states(pipeline, bundle)
    history = []
    preds, targets = [], []
    for f, s in enumerate(slots[:-1]):
        conditioned = world.condition(WorldState(slots=s, time_index=f), action)
        history.append(conditioned)
        pred = world.predictor(history)
        target = world.condition(
            WorldState(slots=slots[f + 1], time_index=f + 1), action)
        preds.append(pred.slots)
        targets.append(target.slots.detach())  # stop-gradient targets
    states_batch = torch.cat([h.slots for h in history], dim=0)
    return loss_wm(torch.stack(preds), torch.stack(targets), states_batch,
                   alpha=weights.alpha)


def _phase_b_loss(pipeline, sample, weights, horizon):
    """State-path training: rollout consistency with the predictor frozen."""
    world = pipeline.world
    bundle, fused, _ = pipeline.perceive(sample.images, sample.view_images,
                                         sample.caption)
    ctx = world.decoder.edge_builder.logical_context(fused.nodes, bundle.logical)
    action = world.pool_action(bundle.action)
    current = fused
    history = []
    preds, targets = [], []
    for _ in range(horizon):
        state = world.distill(current)
        conditioned = world.condition(
            WorldState(slots=state.slots, time_index=len(history)), action)
        history.append(conditioned)
        pred = world.predictor(history)
        current = world.decoder(current, pred, ctx)
        target = world.distill(current)
        preds.append(pred.slots)
        targets.append(target.slots.detach())
    states_batch = torch.cat([h.slots for h in history], dim=0)
    return loss_wm(torch.stack(preds), torch.stack(targets), states_batch,
                   alpha=weights.alpha)


def train_stage1(cfg, out_dir=None, pipeline=None, steps=None):
    torch.manual_seed(cfg.seed)
    out_dir = out_dir or os.path.join(cfg.artifact_root(), "stage1")
    pipeline = pipeline or Pipeline(cfg)
    weights = LossWeights.from_config(cfg)
    dataset = make_dataset(cfg)
    steps = steps if steps is not None else cfg.train_steps
    logger = JsonlLogger(os.path.join(out_dir, "train.jsonl"))
    report = TrainReport(checkpoint=out_dir, log_path=logger.path)

    # phase A: the action encoder stays fixed while the predictor learns
    set_requires_grad(pipeline, False)
    set_requires_grad(pipeline.world, True)
    set_requires_grad(pipeline.encoders.semantic, True)
    set_requires_grad(pipeline.encoders.action, False)
    opt = torch.optim.Adam([p for p in pipeline.parameters() if p.requires_grad],
                           lr=1e-3)
    frozen_a = 0.0
    for step in range(steps):
        sample = dataset[step % len(dataset)]
        loss = _phase_a_loss(pipeline, sample, weights)
        _check_finite(loss, "stage1/phaseA", step)
        opt.zero_grad()
        loss.backward()
        frozen_a = max(frozen_a, max_grad_norm(pipeline.encoders.action.parameters()))
        opt.step()
        logger.log({"stage": "1A", "step": step, "loss_wm": loss.item()})
        report.losses.append(loss.item())

    # phase B: predictor frozen, the cognition-graph state path trains
    pipeline.zero_grad(set_to_none=True)  # drop phase-A gradients before auditing
    set_requires_grad(pipeline, True)
    set_requires_grad(pipeline.world.predictor, False)
    set_requires_grad(pipeline.codec, False)
    set_requires_grad(pipeline.dit, False)
    opt = torch.optim.Adam([p for p in pipeline.parameters() if p.requires_grad],
                           lr=1e-3)
    frozen_b = 0.0
    for step in range(steps):
        sample = dataset[step % len(dataset)]
        loss = _phase_b_loss(pipeline, sample, weights, cfg.wm_horizon)
        _check_finite(loss, "stage1/phaseB", step)
        opt.zero_grad()
        loss.backward()
        frozen_b = max(frozen_b, max_grad_norm(pipeline.world.predictor.parameters()))
        opt.step()
        logger.log({"stage": "1B", "step": step, "loss_wm": loss.item()})
        report.losses.append(loss.item())

    set_requires_grad(pipeline, True)
    logger.close()
    report.frozen_grad_max = {"action_encoder": frozen_a, "predictor": frozen_b}
    save_checkpoint(out_dir, pipeline, cfg, stage=1, step=steps, seed=cfg.seed,
                    extra={"frozen_grad_max": report.frozen_grad_max})
    return report


# ---------------------------------------------------------------------------
# Stage 2: pixel appearance alignment through score distillation
# ---------------------------------------------------------------------------

def train_teacher_from_config(cfg, out_dir=None):
    """Pre-train the toy image teacher on renders of the synthetic dataset."""
    out_dir = out_dir or os.path.join(cfg.artifact_root(), "teacher")
    dataset = make_dataset(cfg)
    images = [s.images[f].permute(2, 0, 1)
              for s in dataset for f in range(s.images.shape[0])]
    logger = JsonlLogger(os.path.join(out_dir, "train.jsonl"))
    losses = []

    def log_fn(step, value):
        logger.log({"stage": "teacher", "step": step, "loss": value})
        losses.append(value)

    teacher = train_teacher(images, steps=cfg.teacher_steps, lr=cfg.teacher_lr,
                            seed=cfg.seed, hidden=cfg.teacher_channels,
                            log_fn=log_fn)
    logger.close()
    save_checkpoint(out_dir, teacher, cfg, stage="teacher",
                    step=cfg.teacher_steps, seed=cfg.seed)
    return TrainReport(checkpoint=out_dir, log_path=logger.path, losses=losses)


def load_teacher(cfg, path=None):
    path = path or os.path.join(cfg.artifact_root(), "teacher")
    from .teacher import NoiseSchedule, ToyImageDenoiser
    teacher = TeacherModel(
        denoiser=ToyImageDenoiser(hidden=cfg.teacher_channels,
                                  num_steps=cfg.teacher_timesteps),
        schedule=NoiseSchedule(num_steps=cfg.teacher_timesteps))
    load_checkpoint(path, teacher)
    return teacher.freeze()


def _sample_scene(pipeline, cfg, seed):
    """Sample latents (detached) and decode them into a candidate scene."""
    with torch.no_grad():
        shape = (cfg.wm_horizon, pipeline.latent_tokens, cfg.codec_latent_dim)
        z = pipeline.dit.sample(shape, steps=cfg.dit_sample_steps_train,
                                generator=torch.Generator().manual_seed(seed))
    return pipeline.codec.decode(z.reshape(-1, cfg.codec_latent_dim))


def train_stage2(cfg, out_dir=None, pipeline=None, teacher=None, steps=None):
    torch.manual_seed(cfg.seed)
    out_dir = out_dir or os.path.join(cfg.artifact_root(), "stage2")
    weights = LossWeights.from_config(cfg)
    if pipeline is None:
        pipeline = Pipeline(cfg)
        load_checkpoint(os.path.join(cfg.artifact_root(), "stage1"), pipeline)
    teacher = teacher or load_teacher(cfg)
    teacher.freeze()
    steps = steps if steps is not None else cfg.train_steps
    cameras = default_cameras(SyntheticSceneSpec(
        seed=cfg.seed, num_views=cfg.scene_num_views, bounds=cfg.scene_bounds,
        image_size=cfg.image_size))
    set_requires_grad(pipeline, False)
    set_requires_grad(pipeline.codec.decoder, True)
    opt = torch.optim.Adam(pipeline.codec.decoder.parameters(), lr=1e-4)
    logger = JsonlLogger(os.path.join(out_dir, "train.jsonl"))
    report = TrainReport(checkpoint=out_dir, log_path=logger.path)
    frozen_t = 0.0
    for step in range(steps):
        scene = _sample_scene(pipeline, cfg, cfg.seed + step)
        cam = cameras[step % len(cameras)]
        t = (step % 4) / 3.0
        image = render(scene, cam, t)
        loss = weights.lambda2 * loss_sds(image, teacher, seed=cfg.seed + step,
                                          weights=weights)
        _check_finite(loss, "stage2", step)
        opt.zero_grad()
        loss.backward()
        frozen_t = max(frozen_t, max_grad_norm(teacher.parameters()))
        opt.step()
        logger.log({"stage": "2", "step": step, "loss_sds": loss.item()})
        report.losses.append(loss.item())
    set_requires_grad(pipeline, True)
    logger.close()
    report.frozen_grad_max = {"teacher": frozen_t}
    save_checkpoint(out_dir, pipeline, cfg, stage=2, step=steps, seed=cfg.seed,
                    extra={"frozen_grad_max": report.frozen_grad_max})
    return report


# ---------------------------------------------------------------------------
# Stage 3: joint spatiotemporal refinement
# ---------------------------------------------------------------------------

def train_stage3(cfg, out_dir=None, pipeline=None, teacher=None, steps=None):
    torch.manual_seed(cfg.seed)
    out_dir = out_dir or os.path.join(cfg.artifact_root(), "stage3")
    weights = LossWeights.from_config(cfg)
    if pipeline is None:
        pipeline = Pipeline(cfg)
        load_checkpoint(os.path.join(cfg.artifact_root(), "stage2"), pipeline)
    teacher = teacher or load_teacher(cfg)
    teacher.freeze()
    dataset = make_dataset(cfg)
    steps = steps if steps is not None else cfg.train_steps
    set_requires_grad(pipeline, True)
    opt = torch.optim.AdamW(pipeline.parameters(), lr=cfg.train_lr,
                            weight_decay=cfg.train_weight_decay)
    logger = JsonlLogger(os.path.join(out_dir, "train.jsonl"))
    report = TrainReport(checkpoint=out_dir, log_path=logger.path)
    times = [f / max(1, cfg.eval_frames - 1) for f in range(cfg.eval_frames)]
    frozen_t = 0.0
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, steps, cfg.train_lr, cfg.train_warmup_frac)
        sample = dataset[step % len(dataset)]

        l_wm = _phase_b_loss(pipeline, sample, weights, cfg.wm_horizon)

        # diffusion keeps learning the latent distribution of real scenes
        with torch.no_grad():
            lat = pipeline.codec.encode(sample.scene)
        l_fm = pipeline.dit.fm_loss(
            lat.z.unsqueeze(0), generator=torch.Generator().manual_seed(cfg.seed + step))

        scene = _sample_scene(pipeline, cfg, cfg.seed + step)
        image = render(scene, sample.cameras[step % len(sample.cameras)],
                       times[step % len(times)])
        l_sds = loss_sds(image, teacher, seed=cfg.seed + step, weights=weights)
        l_st = loss_st(scene, sample.scene, sample.cameras[:1], times, weights)

        loss = loss_total({"wm": l_wm, "sds": l_sds, "st": l_st}, weights) + l_fm
        _check_finite(loss, "stage3", step)
        opt.zero_grad()
        loss.backward()
        frozen_t = max(frozen_t, max_grad_norm(teacher.parameters()))
        opt.step()
        logger.log({"stage": "3", "step": step, "loss": loss.item(),
                    "loss_wm": l_wm.item(), "loss_sds": l_sds.item(),
                    "loss_st": l_st.item(), "loss_fm": l_fm.item(),
                    "lr": opt.param_groups[0]["lr"]})
        report.losses.append(loss.item())
    logger.close()
    report.frozen_grad_max = {"teacher": frozen_t}
    save_checkpoint(out_dir, pipeline, cfg, stage=3, step=steps, seed=cfg.seed,
                    extra={"frozen_grad_max": report.frozen_grad_max})
    return report
