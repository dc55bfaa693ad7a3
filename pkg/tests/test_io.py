import json

import numpy as np
import pytest

from conftest import make_camera, random_scene
from decosplat import io
from decosplat.scene import UnicycleTrack
from decosplat.unicycle import NoisyBoxTrack


def gaussians_equal(a, b):
    return all(np.array_equal(getattr(a, k), getattr(b, k))
               for k in ("mu", "quat", "log_scale", "opacity_logit", "sh", "logits"))


def test_scene_round_trip_is_exact(tmp_path):
    scene = random_scene(np.random.default_rng(0), 12, 5, sh_degree=2)
    io.save_scene(tmp_path / "s.json", scene)
    back = io.load_scene(tmp_path / "s.json")
    assert back.class_count == scene.class_count and back.sh_degree == 2
    assert np.array_equal(back.background, scene.background)
    assert gaussians_equal(back.static, scene.static)
    assert gaussians_equal(back.objects[0].canonical, scene.objects[0].canonical)
    for k in ("timestamps", "states", "heights", "velocities"):
        assert np.array_equal(getattr(back.objects[0].track, k), getattr(scene.objects[0].track, k))


def test_empty_static_set_round_trip(tmp_path):
    scene = random_scene(np.random.default_rng(1), 0, 3)
    io.save_scene(tmp_path / "s.json", scene)
    assert len(io.load_scene(tmp_path / "s.json").static) == 0


def test_camera_round_trip(tmp_path):
    cam = make_camera(40, 30, timestamp=2.5)
    cam.A = np.diag([1.1, 0.9, 1.0])
    cam.b = np.array([0.01, -0.02, 0.0])
    io.save_cameras(tmp_path / "c.json", [cam, make_camera()])
    back = io.load_cameras(tmp_path / "c.json")
    assert len(back) == 2
    for k in ("K", "R", "t", "A", "b"):
        assert np.array_equal(getattr(back[0], k), getattr(cam, k))
    assert (back[0].width, back[0].height, back[0].timestamp) == (40, 30, 2.5)


def test_track_and_boxes_documents(tmp_path):
    tr = UnicycleTrack.from_velocities(np.arange(4.0), 1.0, 2.0, 0.1, [(1.0, 0.1)] * 3, np.full(4, 0.7))
    io.save_track(tmp_path / "t.json", tr)
    kind, back = io.load_track_or_boxes(tmp_path / "t.json")
    assert kind == "track" and np.array_equal(back.states, tr.states)
    boxes = NoisyBoxTrack.from_track(tr)
    boxes.valid[1] = False
    io.save_boxes(tmp_path / "b.json", boxes)
    kind, back = io.load_track_or_boxes(tmp_path / "b.json")
    assert kind == "boxes" and np.array_equal(back.obs, boxes.obs) and not back.valid[1]


def test_malformed_documents_raise_format_error(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(io.FormatError):
        io.load_scene(tmp_path / "bad.json")
    (tmp_path / "partial.json").write_text(json.dumps({"static_gaussians": []}))
    with pytest.raises(io.FormatError):
        io.load_scene(tmp_path / "partial.json")
    (tmp_path / "cams.json").write_text(json.dumps({"cameras": [{"K": np.eye(3).tolist()}]}))
    with pytest.raises(io.FormatError):
        io.load_cameras(tmp_path / "cams.json")


def test_ppm_round_trip_quantises_to_8_bits(tmp_path):
    img = np.random.default_rng(0).uniform(-0.2, 1.2, (7, 9, 3))
    io.write_ppm(tmp_path / "a.ppm", img)
    back = io.read_ppm(tmp_path / "a.ppm")
    assert back.shape == (7, 9, 3)
    assert np.allclose(back, np.round(np.clip(img, 0, 1) * 255) / 255, atol=1e-12)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n9 7\n255\n")


def test_raster_layout_and_round_trip(tmp_path):
    a = np.random.default_rng(1).normal(size=(5, 6, 2))
    a[0, 0, 0] = np.nan
    io.write_raster(tmp_path / "r.gsr", a)
    raw = (tmp_path / "r.gsr").read_bytes()
    assert raw[:4] == b"GSRF" and len(raw) == 16 + 5 * 6 * 2 * 4
    back = io.read_raster(tmp_path / "r.gsr")
    assert np.isnan(back[0, 0, 0])
    assert np.allclose(back[~np.isnan(back)], a[~np.isnan(a)].astype(np.float32), atol=0)
    io.write_raster(tmp_path / "d.gsr", np.ones((3, 4)))
    assert io.read_raster(tmp_path / "d.gsr").shape == (3, 4, 1)


def test_raster_bad_magic(tmp_path):
    (tmp_path / "x.gsr").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(io.FormatError):
        io.read_raster(tmp_path / "x.gsr")
