"""File formats: scene / camera / track JSON documents, 8-bit PPM images, float rasters.

The layouts are described in docs/formats.md.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .scene import DynamicObject, FrameCamera, GaussianSet, SceneGraph, UnicycleTrack
from .unicycle import NoisyBoxTrack

RASTER_MAGIC = b"GSRF"
RASTER_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def _floats(a):
    return np.asarray(a, dtype=np.float64).tolist()


def gaussians_to_doc(gs):
    return [{"mu": _floats(gs.mu[i]), "quat": _floats(gs.quat[i]), "log_scale": _floats(gs.log_scale[i]),
             "opacity_logit": float(gs.opacity_logit[i]), "sh": _floats(gs.sh[i]), "logits": _floats(gs.logits[i])}
            for i in range(len(gs))]


def gaussians_from_doc(items, sh_count, class_count):
    if not items:
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                           np.zeros((0, sh_count, 3)), np.zeros((0, class_count)))
    try:
        return GaussianSet(np.array([g["mu"] for g in items]), np.array([g["quat"] for g in items]),
                           np.array([g["log_scale"] for g in items]), np.array([g["opacity_logit"] for g in items]),
                           np.array([g["sh"] for g in items]), np.array([g["logits"] for g in items]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed Gaussian entry: {exc}") from exc


def track_to_doc(track):
    return {"timestamps": _floats(track.timestamps), "states": _floats(track.states),
            "heights": _floats(track.heights), "velocities": _floats(track.velocities),
            "horizon": float(track.horizon), "interpolation": track.interpolation}


def track_from_doc(doc):
    try:
        return UnicycleTrack(doc["timestamps"], doc["states"], doc["heights"],
                             np.asarray(doc["velocities"], dtype=np.float64).reshape(-1, 2),
                             horizon=doc.get("horizon", 1.0), interpolation=doc.get("interpolation", "unicycle"))
    except KeyError as exc:
        raise FormatError(f"track document lacks field {exc}") from exc


def scene_to_doc(scene):
    return {
        "class_count": int(scene.class_count),
        "sh_degree": int(scene.sh_degree),
        "background_color": _floats(scene.background),
        "static_gaussians": gaussians_to_doc(scene.static),
        "objects": [{"id": int(o.id), "canonical": gaussians_to_doc(o.canonical), "track": track_to_doc(o.track)}
                    for o in scene.objects],
    }


def scene_from_doc(doc):
    try:
        S = int(doc["class_count"])
        K = (int(doc.get("sh_degree", 0)) + 1) ** 2
        static = gaussians_from_doc(doc["static_gaussians"], K, S)
        objects = [DynamicObject(int(o["id"]), gaussians_from_doc(o["canonical"], K, S), track_from_doc(o["track"]))
                   for o in doc.get("objects", [])]
        return SceneGraph(static, objects, S, doc.get("background_color", [0.0, 0.0, 0.0]))
    except KeyError as exc:
        raise FormatError(f"scene document lacks field {exc}") from exc


def camera_to_doc(cam):
    return {"K": _floats(cam.K), "R": _floats(cam.R), "t": _floats(cam.t), "timestamp": float(cam.timestamp),
            "width": int(cam.width), "height": int(cam.height), "A": _floats(cam.A), "b": _floats(cam.b)}


def camera_from_doc(d):
    try:
        return FrameCamera(d["K"], d["R"], d["t"], d["timestamp"], d["width"], d["height"],
                           d.get("A", np.eye(3)), d.get("b", np.zeros(3)))
    except KeyError as exc:
        raise FormatError(f"camera entry lacks field {exc}") from exc


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-precision floats keep 64-bit values exact through a round trip
    path.write_text(json.dumps(doc, indent=1))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_scene(path, scene):
    write_json(path, scene_to_doc(scene))


def load_scene(path):
    return scene_from_doc(read_json(path))


def save_cameras(path, cameras):
    write_json(path, {"cameras": [camera_to_doc(c) for c in cameras]})


def load_cameras(path):
    doc = read_json(path)
    return [camera_from_doc(c) for c in doc["cameras"]]


def save_track(path, track):
    write_json(path, {"track": track_to_doc(track)})


def load_track(path):
    doc = read_json(path)
    return track_from_doc(doc.get("track", doc))


def boxes_to_doc(boxes):
    return {"timestamps": _floats(boxes.timestamps), "obs": _floats(boxes.obs), "valid": [bool(v) for v in boxes.valid]}


def boxes_from_doc(doc):
    try:
        return NoisyBoxTrack(doc["timestamps"], doc["obs"], doc.get("valid"))
    except KeyError as exc:
        raise FormatError(f"box document lacks field {exc}") from exc
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_boxes(path, boxes):
    write_json(path, {"boxes": boxes_to_doc(boxes)})


def load_track_or_boxes(path):
    """("track", UnicycleTrack) or ("boxes", NoisyBoxTrack) depending on the document."""
    doc = read_json(path)
    if "boxes" in doc:
        return "boxes", boxes_from_doc(doc["boxes"])
    return "track", track_from_doc(doc.get("track", doc))


def write_ppm(path, image):
    """8-bit binary PPM (P6); values are clamped to [0, 1] and rounded."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError("PPM needs an (H, W, 3) image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit P6 file")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_raster(path, array):
    """Float32 raster: 16-byte header (b"GSRF", H, W, C as little-endian uint32) then row-major data."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise FormatError("raster needs an (H, W) or (H, W, C) array")
    h, w, c = a.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(RASTER_HEADER.pack(RASTER_MAGIC, h, w, c))
        fh.write(a.astype("<f4").tobytes())


def read_raster(path):
    raw = Path(path).read_bytes()
    magic, h, w, c = RASTER_HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise FormatError(f"{path}: bad raster magic {magic!r}")
    data = np.frombuffer(raw, dtype="<f4", offset=RASTER_HEADER.size, count=h * w * c)
    return data.reshape(h, w, c).astype(np.float64)
