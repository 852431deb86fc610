"""FastAPI wrapper over the stateless pipeline operations.

The service exposes scene synthesis, rendering, evaluation, graph
inspection, and (given a checkpoint) generation.  Training stays on the
CLI: it is a long-running, stateful job that does not fit a request/
response surface.
"""

import base64
import io

import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..config import RunConfig
from ..errors import CG4DError, ConfigurationError, NumericalError, SceneParseError
from ..gaussians import (chamfer, f_score, image_to_uint8, positions_at,
                         render, scene_from_dict, scene_to_dict,
                         temporal_smoothness)
from ..graphs import graph_to_dot
from ..pipeline import Pipeline, load_checkpoint
from ..synth import (SyntheticSceneSpec, default_cameras, make_sample,
                     render_prompt_sequence)
from . import schemas


def _png_b64(img):
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(image_to_uint8(img)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _parse_scene(doc):
    return scene_from_dict(doc.model_dump()).validate()


def _status_for(exc):
    if isinstance(exc, SceneParseError):
        return 422
    if isinstance(exc, ConfigurationError):
        return 400
    if isinstance(exc, NumericalError):
        return 500
    return 500


def create_app(config=None):
    cfg = config or RunConfig()
    app = FastAPI(title="cg4d", version="0.1.0")

    @app.exception_handler(CG4DError)
    async def _handle(request: Request, exc: CG4DError):
        return JSONResponse(status_code=_status_for(exc),
                            content={"error": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        base = cfg.with_overrides({k: v for k, v in req.overrides.items()})
        scenes, captions = [], []
        for i in range(req.count):
            spec = SyntheticSceneSpec(
                seed=req.seed * 1000 + i, num_objects=base.scene_num_objects,
                gaussians_per_object=base.scene_gaussians_per_object,
                motion_family=base.scene_motion_family, bounds=base.scene_bounds,
                num_frames=base.scene_num_frames, num_views=base.scene_num_views,
                deform_degree=base.scene_deform_degree,
                image_size=base.image_size)
            sample = make_sample(spec)
            scenes.append(scene_to_dict(sample.scene))
            captions.append(sample.caption)
        return {"scenes": scenes, "captions": captions}

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        pred = _parse_scene(req.pred)
        gt = _parse_scene(req.gt)
        spec = SyntheticSceneSpec(seed=0, bounds=cfg.scene_bounds,
                                  image_size=cfg.image_size)
        cam = default_cameras(spec)[0]
        F = req.frames
        times = torch.tensor([0.0 if F == 1 else f / (F - 1) for f in range(F)])
        per_frame = [((render(pred, cam, t) - render(gt, cam, t)) ** 2).mean().item()
                     for t in times.tolist()]
        return {
            "chamfer": chamfer(positions_at(pred, 0.0), positions_at(gt, 0.0)).item(),
            "f_score": f_score(positions_at(pred, 0.0), positions_at(gt, 0.0),
                               req.f_tau).item(),
            "temporal_smoothness": temporal_smoothness(pred, times).item(),
            "per_frame_pixel_mse": per_frame,
        }

    @app.post("/render", response_model=schemas.RenderResponse)
    def render_scene(req: schemas.RenderRequest):
        scene = _parse_scene(req.scene)
        spec = SyntheticSceneSpec(seed=0, bounds=cfg.scene_bounds,
                                  image_size=req.image_size)
        cam = default_cameras(spec)[0]
        F = req.frames
        frames = [render(scene, cam, 0.0 if F == 1 else f / (F - 1))
                  for f in range(F)]
        return {"frames_png": [_png_b64(f) for f in frames]}

    @app.post("/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        torch.manual_seed(req.seed)
        pipeline = Pipeline(cfg)
        if req.checkpoint:
            load_checkpoint(req.checkpoint, pipeline)
        pipeline.eval()
        result = pipeline.generate(text=req.prompt, horizon=req.horizon,
                                   seed=req.seed)
        result.scene.validate()
        return {"scene": scene_to_dict(result.scene),
                "frames_png": [_png_b64(result.frames[i])
                               for i in range(result.frames.shape[0])]}

    @app.post("/inspect-graph", response_model=schemas.InspectGraphResponse)
    def inspect_graph(req: schemas.InspectGraphRequest):
        scene = _parse_scene(req.scene)
        torch.manual_seed(req.seed)
        pipeline = Pipeline(cfg)
        pipeline.eval()
        spec = SyntheticSceneSpec(seed=req.seed, bounds=cfg.scene_bounds,
                                  image_size=cfg.image_size)
        cams = default_cameras(spec)
        images = render_prompt_sequence(scene, cams[:1], cfg.scene_num_frames)
        with torch.no_grad():
            _, fused, components = pipeline.perceive(images, text=req.prompt)
        graphs = (fused, *components)
        return {"dot": {g.kind: graph_to_dot(g) for g in graphs},
                "edge_counts": {g.kind: int((g.edge_gate > 0).sum())
                                for g in graphs}}

    return app
