"""Pydantic request/response models for the HTTP service."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class SceneDocument(BaseModel):
    """A scene payload matching the .st4d.json schema."""

    version: int = 1
    K: int
    D: int
    positions: List[List[float]]
    scales: List[List[float]]
    rotations: List[List[float]]
    opacities: List[float]
    colors: List[List[float]]
    deform: List[List[List[float]]]


class SynthRequest(BaseModel):
    seed: int = 0
    count: int = Field(default=1, ge=1, le=64)
    overrides: Dict[str, object] = Field(default_factory=dict)


class SynthResponse(BaseModel):
    scenes: List[SceneDocument]
    captions: List[str]


class EvalRequest(BaseModel):
    pred: SceneDocument
    gt: SceneDocument
    f_tau: float = 0.1
    frames: int = Field(default=4, ge=3)  # smoothness needs >= 3 time samples


class EvalResponse(BaseModel):
    chamfer: float
    f_score: float
    temporal_smoothness: float
    per_frame_pixel_mse: List[float]


class RenderRequest(BaseModel):
    scene: SceneDocument
    frames: int = Field(default=4, ge=1)
    image_size: int = Field(default=64, ge=16)


class RenderResponse(BaseModel):
    frames_png: List[str]  # base64-encoded PNGs


class GenerateRequest(BaseModel):
    prompt: str
    seed: int = 0
    horizon: Optional[int] = None
    checkpoint: Optional[str] = None


class GenerateResponse(BaseModel):
    scene: SceneDocument
    frames_png: List[str]


class InspectGraphRequest(BaseModel):
    scene: SceneDocument
    prompt: str = ""
    seed: int = 0


class InspectGraphResponse(BaseModel):
    dot: Dict[str, str]        # graph kind -> DOT text
    edge_counts: Dict[str, int]
