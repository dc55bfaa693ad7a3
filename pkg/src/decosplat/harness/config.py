"""Experiment configuration: nested dataclasses read from / written to JSON documents."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SceneSpec:
    n_ground: int = 600
    n_boxes: int = 3
    n_per_box: int = 120
    n_backdrop: int = 300
    n_objects: int = 1
    n_per_object: int = 150
    sh_degree: int = 1
    class_count: int = 5
    extent: float = 24.0  # metres of road ahead of the first camera
    half_width: float = 7.0
    object_speed: float = 0.5  # metres / frame
    object_yaw_rate: float = 0.03  # rad / frame (magnitude, sign random)
    steady_motion: bool = False  # constant (v, omega) per object instead of a modulated profile
    floaters: int = 0  # spurious Gaussians added to the initialisation, not to the ground truth
    background: tuple = (0.55, 0.65, 0.8)


@dataclass
class CameraSpec:
    speed: float = 0.4  # metres / frame along +x
    lateral_amplitude: float = 0.3
    lateral_period: float = 30.0  # frames
    height: float = 1.5
    focal_factor: float = 0.9  # focal length = factor * width


@dataclass
class NoiseSpec:
    box_scale: float = 0.0  # 0.1 = 10%
    label_flip: float = 0.0
    flow_sigma: float = 0.0  # pixels
    exposure_gain: float = 0.0  # peak per-channel gain deviation
    exposure_bias: float = 0.0
    exposure_period: float = 12.0  # frames


@dataclass
class TrainSpec:
    iterations: int = 300
    lambda_ssim: float = 0.2
    lambda_S: float = 0.01
    lambda_F: float = 0.01
    lambda_t: float = 0.1
    lambda_uni: float = 0.1
    lambda_reg: float = 0.1
    use_semantic: bool = True
    use_flow: bool = True
    use_affine: bool = True
    softmax: str = "3d"  # or "2d"
    optimize_tracks: bool = True
    lrs: dict = field(default_factory=lambda: {
        "mu": 0.002, "quat": 0.002, "log_scale": 0.005, "opacity_logit": 0.05, "sh": 0.005,
        "logits": 0.05, "exposure_A": 0.002, "exposure_b": 0.002,
        "states": 0.005, "heights": 0.002, "velocities": 0.002})
    track_decay: float = 0.999
    # initialisation: ground truth perturbed by these amounts
    init_position_noise: float = 0.05  # metres, isotropic
    init_ray_noise: float = 0.0  # relative error of the distance to the first camera
    init_color_noise: float = 0.05
    init_opacity: float = 0.0  # > 0 replaces every opacity with this value
    random_logits: bool = False  # replace semantic logits with N(0, 1) draws
    eval_every: int = 0  # 0 = evaluate only at the end
    optimizer: str = "adam"  # or "sgd"
    log_every: int = 25


@dataclass
class TrackSpec:
    mode: str = "unicycle"
    solver: str = "gd"
    iterations: int = 3000
    lr: float = 0.02
    lambda_t: float = 0.1
    lambda_uni: float = 0.1
    lambda_reg: float = 0.1
    use_omega: bool = False
    transition: str = "propagated"


@dataclass
class ExperimentConfig:
    seed: int = 0
    width: int = 128
    height: int = 96
    n_frames: int = 30
    holdout_every: int = 2  # every other frame is held out
    scene: SceneSpec = field(default_factory=SceneSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    track: TrackSpec = field(default_factory=TrackSpec)
    output_dir: str = "out"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        if self.n_frames < 3:
            raise ConfigError("need at least 3 frames")
        if self.train.softmax not in ("3d", "2d"):
            raise ConfigError("train.softmax must be '3d' or '2d'")

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        """Copy with dotted-key overrides, e.g. replace(**{"train.iterations": 10})."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_dotted(d, key, value)
        return config_from_dict(d)


def _set_dotted(d, key, value):
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in d or not isinstance(d[p], dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        d = d[p]
    if parts[-1] not in d:
        raise ConfigError(f"unknown config key {key!r}")
    d[parts[-1]] = value


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _SECTIONS.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip("."))
        elif name == "lrs":
            base = TrainSpec().lrs
            base.update(value)
            kwargs[name] = base
        elif name == "background":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {"SceneSpec": SceneSpec, "CameraSpec": CameraSpec, "NoiseSpec": NoiseSpec,
             "TrainSpec": TrainSpec, "TrackSpec": TrackSpec}


def config_from_dict(data):
    return _build(ExperimentConfig, data, "")


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def save_config(path, config):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))
