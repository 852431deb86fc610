"""Command-line surface tying the pipeline together.

Subcommands: synth, train --stage {1,2,3}, train-teacher, generate,
render, eval, inspect-graph.  Configuration comes from one JSON file plus
--set key=value overrides; every command is deterministic under --seed.
Exit codes: 0 success, 2 configuration error, 3 data/parse error,
4 numerical failure.
"""

import argparse
import json
import os
import sys

import torch

from .config import RunConfig
from .errors import CG4DError, ConfigurationError
from .gaussians import (chamfer, f_score, load_scene, positions_at, render,
                        save_gif, save_png, save_scene, temporal_smoothness)
from .graphs import graph_to_dot, graph_to_json
from .pipeline import Pipeline, load_checkpoint
from .synth import SyntheticSceneSpec, caption, default_cameras, make_sample


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def _scene_spec(cfg, seed):
    return SyntheticSceneSpec(
        seed=seed, num_objects=cfg.scene_num_objects,
        gaussians_per_object=cfg.scene_gaussians_per_object,
        motion_family=cfg.scene_motion_family, bounds=cfg.scene_bounds,
        num_frames=cfg.scene_num_frames, num_views=cfg.scene_num_views,
        deform_degree=cfg.scene_deform_degree, image_size=cfg.image_size)


def _restore_pipeline(cfg, checkpoint=None):
    torch.manual_seed(cfg.seed)
    pipeline = Pipeline(cfg)
    path = checkpoint or os.path.join(cfg.artifact_root(), "stage3")
    load_checkpoint(path, pipeline)
    pipeline.eval()
    return pipeline


def _load_image_sequence(path):
    """Directory of PNG frames (sorted by name) -> [F, H, W, 3] in [0, 1]."""
    import numpy as np
    from PIL import Image
    from .errors import SceneParseError
    if not os.path.isdir(path):
        raise ConfigurationError(f"prompt image path {path} is not a directory")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise SceneParseError("images", f"no PNG frames found in {path}")
    frames = [np.asarray(Image.open(os.path.join(path, n)).convert("RGB"),
                         dtype=np.float32) / 255.0 for n in names]
    return torch.from_numpy(np.stack(frames))


def cmd_synth(args):
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.artifact_root(), "synth")
    os.makedirs(out, exist_ok=True)
    manifest = []
    for i in range(args.count):
        spec = _scene_spec(cfg, cfg.seed * 1000 + i)
        sample = make_sample(spec)
        scene_path = os.path.join(out, f"scene_{i:03d}.st4d.json")
        save_scene(sample.scene, scene_path)
        if args.renders:
            save_gif(sample.images, os.path.join(out, f"scene_{i:03d}.gif"))
        manifest.append({"scene": os.path.basename(scene_path),
                         "caption": sample.caption, "seed": spec.seed})
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    print(json.dumps({"scenes": len(manifest), "out": out}))
    return 0


def cmd_train_teacher(args):
    from .training import train_teacher_from_config
    cfg = _load_config(args)
    report = train_teacher_from_config(cfg, out_dir=args.out)
    print(json.dumps({"checkpoint": report.checkpoint,
                      "final_loss": report.losses[-1] if report.losses else None}))
    return 0


def cmd_train(args):
    from . import training
    cfg = _load_config(args)
    stage_fn = {1: training.train_stage1, 2: training.train_stage2,
                3: training.train_stage3}[args.stage]
    report = stage_fn(cfg, out_dir=args.out)
    print(json.dumps({"checkpoint": report.checkpoint,
                      "final_loss": report.losses[-1] if report.losses else None,
                      "frozen_grad_max": report.frozen_grad_max}))
    return 0


def cmd_generate(args):
    cfg = _load_config(args)
    if not args.prompt and not args.prompt_images:
        raise ConfigurationError(
            "generate needs --prompt text or --prompt-images dir")
    pipeline = _restore_pipeline(cfg, args.checkpoint)
    images = _load_image_sequence(args.prompt_images) if args.prompt_images else None
    result = pipeline.generate(images=images, text=args.prompt or "",
                               horizon=args.horizon or cfg.wm_horizon,
                               seed=cfg.seed)
    result.scene.validate()
    out = args.out or os.path.join(cfg.artifact_root(), "generate")
    os.makedirs(out, exist_ok=True)
    scene_path = os.path.join(out, "scene.st4d.json")
    save_scene(result.scene, scene_path)
    for i in range(result.frames.shape[0]):
        save_png(result.frames[i], os.path.join(out, f"frame_{i:03d}.png"))
    save_gif(result.frames, os.path.join(out, "scene.gif"))
    print(json.dumps({"scene": scene_path, "frames": int(result.frames.shape[0]),
                      "out": out}))
    return 0


def cmd_render(args):
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    spec = _scene_spec(cfg, cfg.seed)
    cams = default_cameras(spec)
    out = args.out or os.path.join(cfg.artifact_root(), "render")
    os.makedirs(out, exist_ok=True)
    frames = []
    F = args.frames or cfg.scene_num_frames
    for f in range(F):
        t = 0.0 if F == 1 else f / (F - 1)
        img = render(scene, cams[0], t)
        frames.append(img)
        save_png(img, os.path.join(out, f"frame_{f:03d}.png"))
    save_gif(torch.stack(frames), os.path.join(out, "scene.gif"))
    print(json.dumps({"frames": F, "out": out}))
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    pred = load_scene(args.pred)
    gt = load_scene(args.gt)
    spec = _scene_spec(cfg, cfg.seed)
    cams = default_cameras(spec)
    F = cfg.eval_frames
    times = torch.tensor([0.0 if F == 1 else f / (F - 1) for f in range(F)])
    per_frame = []
    for t in times.tolist():
        diff = render(pred, cams[0], t) - render(gt, cams[0], t)
        per_frame.append((diff ** 2).mean().item())
    metrics = {
        "chamfer": chamfer(positions_at(pred, 0.0), positions_at(gt, 0.0)).item(),
        "f_score": f_score(positions_at(pred, 0.0), positions_at(gt, 0.0),
                           cfg.eval_f_tau).item(),
        "temporal_smoothness": temporal_smoothness(pred, times).item(),
        "per_frame_pixel_mse": per_frame,
    }
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    return 0


def cmd_inspect_graph(args):
    cfg = _load_config(args)
    torch.manual_seed(cfg.seed)
    if args.checkpoint:
        pipeline = _restore_pipeline(cfg, args.checkpoint)
    else:
        pipeline = Pipeline(cfg)
        pipeline.eval()
    scene = load_scene(args.scene)
    spec = _scene_spec(cfg, cfg.seed)
    cams = default_cameras(spec)
    from .synth import render_prompt_sequence
    images = render_prompt_sequence(scene, cams[:1], cfg.scene_num_frames)
    with torch.no_grad():
        _, fused, components = pipeline.perceive(images, text=args.prompt or "")
    out = args.out or os.path.join(cfg.artifact_root(), "graphs")
    os.makedirs(out, exist_ok=True)
    for g in (fused, *components):
        with open(os.path.join(out, f"{g.kind}.json"), "w", encoding="utf-8") as f:
            f.write(graph_to_json(g))
        with open(os.path.join(out, f"{g.kind}.dot"), "w", encoding="utf-8") as f:
            f.write(graph_to_dot(g))
    print(json.dumps({"out": out, "kinds": [fused.kind] + [g.kind for g in components]}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="cg4d",
                                     description="Cognition-guided 4D Gaussian scene generation")
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
    parser.add_argument("--seed", type=int, help="override the run seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic ground-truth scenes")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--renders", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-teacher", help="pre-train the toy image teacher")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="prompt-to-scene generation")
    p.add_argument("--prompt", help="text prompt")
    p.add_argument("--prompt-images", help="directory of PNG prompt frames")
    p.add_argument("--checkpoint", help="pipeline checkpoint directory")
    p.add_argument("--horizon", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("render", help="render a scene file to PNG/GIF")
    p.add_argument("scene")
    p.add_argument("--frames", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics between two scene files")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-graph", help="dump cognition graphs for a scene")
    p.add_argument("scene")
    p.add_argument("--prompt", default="")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_inspect_graph)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CG4DError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
