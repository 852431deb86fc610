import pytest
import torch
from fastapi.testclient import TestClient

from cg4d.config import RunConfig
from cg4d.service import create_app


@pytest.fixture(scope="module")
def client():
    cfg = RunConfig(scene_num_frames=4, scene_num_views=2, image_size=32,
                    graph_nodes=16, wm_horizon=2, codec_resolution=8,
                    codec_gaussians=16, dit_blocks=1, dit_width=32,
                    dit_heads=2, dit_sample_steps=4)
    return TestClient(create_app(cfg))


@pytest.fixture(scope="module")
def scene_doc(client):
    r = client.post("/synth", json={"seed": 0, "count": 1})
    assert r.status_code == 200
    return r.json()["scenes"][0]


class TestHealth:
    def test_ok(self, client):
        assert client.get("/health").json() == {"status": "ok"}


class TestSynth:
    def test_scene_schema(self, client, scene_doc):
        assert scene_doc["version"] == 1
        assert len(scene_doc["positions"]) == scene_doc["K"]
        assert len(scene_doc["deform"][0][0]) == scene_doc["D"]

    def test_caption_present(self, client):
        r = client.post("/synth", json={"seed": 1, "count": 2})
        body = r.json()
        assert len(body["captions"]) == 2
        assert "object" in body["captions"][0]

    def test_deterministic(self, client):
        a = client.post("/synth", json={"seed": 5, "count": 1}).json()
        b = client.post("/synth", json={"seed": 5, "count": 1}).json()
        assert a == b

    def test_override_rejected(self, client):
        r = client.post("/synth", json={"seed": 0, "count": 1,
                                        "overrides": {"bogus": 3}})
        assert r.status_code == 400


class TestEval:
    def test_identity_metrics(self, client, scene_doc):
        r = client.post("/eval", json={"pred": scene_doc, "gt": scene_doc})
        assert r.status_code == 200
        body = r.json()
        assert body["chamfer"] == pytest.approx(0.0, abs=1e-6)
        assert body["f_score"] == pytest.approx(1.0)
        assert len(body["per_frame_pixel_mse"]) == 4

    def test_malformed_scene_422(self, client, scene_doc):
        bad = dict(scene_doc)
        bad["opacities"] = bad["opacities"][:-1]
        r = client.post("/eval", json={"pred": bad, "gt": scene_doc})
        assert r.status_code == 422

    def test_invalid_values_400(self, client, scene_doc):
        bad = dict(scene_doc)
        bad["opacities"] = [1.5] * scene_doc["K"]
        r = client.post("/eval", json={"pred": bad, "gt": scene_doc})
        assert r.status_code == 400


class TestRender:
    def test_base64_frames(self, client, scene_doc):
        import base64
        r = client.post("/render", json={"scene": scene_doc, "frames": 3,
                                         "image_size": 32})
        frames = r.json()["frames_png"]
        assert len(frames) == 3
        png = base64.b64decode(frames[0])
        assert png[:8] == b"\x89PNG\r\n\x1a\n"


class TestGenerate:
    def test_text_prompt(self, client):
        r = client.post("/generate", json={"prompt": "one object, static",
                                           "seed": 0, "horizon": 2})
        assert r.status_code == 200
        body = r.json()
        assert len(body["frames_png"]) == 2
        assert body["scene"]["K"] == 16

    def test_missing_checkpoint_400(self, client, tmp_path):
        r = client.post("/generate", json={"prompt": "x", "seed": 0,
                                           "checkpoint": str(tmp_path / "no")})
        assert r.status_code == 400


class TestInspectGraph:
    def test_dot_for_every_kind(self, client, scene_doc):
        r = client.post("/inspect-graph", json={"scene": scene_doc})
        body = r.json()
        assert set(body["dot"]) == {"fused", "semantic", "global", "local"}
        assert all(v.startswith("digraph") for v in body["dot"].values())
        assert all(c > 0 for c in body["edge_counts"].values())
