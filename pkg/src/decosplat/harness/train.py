"""Training loop over all losses and held-out evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..diffsplat import TRACK_FIELDS, Adam, Schedule, backward, sgd_step
from ..losses import loss_flow, loss_image, loss_semantic
from ..metrics import metric_depth, metric_miou, metric_psnr, metric_ssim
from ..render import render
from ..scene import GaussianSet, logit
from ..unicycle import MotionObjective, NoisyBoxTrack, _unflatten, initial_track, pose_errors
from .synth import SH_DC, gen_floaters


@dataclass
class TrainResult:
    scene: object
    cameras: list
    history: list = field(default_factory=list)  # one dict per logged iteration
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0


def split_frames(n_frames, holdout_every=2):
    """(train, held-out) frame indices: every ``holdout_every``-th frame, offset 1, is held out."""
    idx = np.arange(n_frames)
    if holdout_every <= 1:
        return idx, np.array([], dtype=int)
    test = idx[idx % holdout_every == 1]
    return np.setdiff1d(idx, test), test


def semantic_modality(spec):
    return "sem" if spec.softmax == "3d" else "sem2d"


def semantic_buffer(buf, spec):
    return buf.semantic if spec.softmax == "3d" else buf.semantic_2dnorm


def train_boxes(pgt, train):
    """Box observations restricted to the training frames."""
    out = []
    for obs in pgt.boxes:
        valid = obs.valid.copy()
        keep = np.zeros(len(valid), dtype=bool)
        keep[train] = True
        out.append(NoisyBoxTrack(obs.timestamps, obs.obs, valid & keep))
    return out


def init_scene(gt, cameras, pgt, config, rng):
    """Ground truth perturbed per the training config, plus any floaters; object tracks start from the noisy boxes."""
    spec = config.train
    scene = gt.scene.copy()
    origin = cameras[0].center
    for gs in [scene.static] + [o.canonical for o in scene.objects]:
        n = len(gs)
        if n == 0:
            continue
        if spec.init_ray_noise > 0 and gs is scene.static:
            ray = gs.mu - origin
            gs.mu = origin + ray * (1.0 + spec.init_ray_noise * rng.standard_normal(n))[:, None]
        gs.mu = gs.mu + spec.init_position_noise * rng.standard_normal((n, 3))
        gs.sh[:, 0] = gs.sh[:, 0] + spec.init_color_noise / SH_DC * rng.standard_normal((n, 3))
        if spec.init_opacity > 0:
            gs.opacity_logit = np.full(n, float(logit(spec.init_opacity)))
        if spec.random_logits:
            gs.logits = rng.standard_normal(gs.logits.shape)
    if config.scene.floaters:
        sc = config.scene
        fl = gen_floaters(rng, sc.floaters, near=3.0, far=sc.extent * 0.6, half_width=sc.half_width * 0.6,
                          sh_degree=sc.sh_degree, class_count=scene.class_count)
        scene.static = GaussianSet.concat([scene.static, fl])
    train, _ = split_frames(len(cameras), config.holdout_every)
    for obj, obs in zip(scene.objects, train_boxes(pgt, train)):
        init = initial_track(obs, obj.track.horizon)
        obj.track.states = init.states
        obj.track.heights = init.heights
        obj.track.velocities = init.velocities
    cams = [c.copy() for c in cameras]
    for c in cams:
        c.A, c.b = np.eye(3), np.zeros(3)
    return scene, cams


def frame_loss(scene, cams, i, pgt, spec, grad=True):
    """Rendering losses of frame ``i``; returns (total, breakdown, grads)."""
    mods = ["rgb"]
    if spec.use_semantic and spec.lambda_S > 0:
        mods.append(semantic_modality(spec))
    flow_cam = None
    if spec.use_flow and spec.lambda_F > 0 and i + 1 < len(cams):
        flow_cam = cams[i + 1]
        mods.append("flow")
    buf, tape = render(scene, cams[i], flow_cam, modalities=tuple(mods))
    out = {}
    g = {}
    out["I"], g["color_exposed"] = loss_image(buf.color_exposed, pgt.images[i], spec.lambda_ssim, grad=True)
    if "sem" in mods or "sem2d" in mods:
        key = "semantic" if spec.softmax == "3d" else "semantic_2dnorm"
        value, gs = loss_semantic(semantic_buffer(buf, spec), pgt.semantic[i], grad=True)
        out["S"], g[key] = value, spec.lambda_S * gs
    if flow_cam is not None:
        value, gf = loss_flow(buf.flow, pgt.flow[i], pgt.flow_valid[i], grad=True)
        out["F"], g["flow"] = value, spec.lambda_F * gf
    total = out["I"] + spec.lambda_S * out.get("S", 0.0) + spec.lambda_F * out.get("F", 0.0)
    grads = backward(tape, g, camera_index=i) if grad else None
    return total, out, grads


def motion_loss(scene, objectives, grads=None):
    """lambda-weighted L_t + L_uni + L_reg over all objects; gradients are added into ``grads``."""
    total = 0.0
    for k, (obj, objective) in enumerate(zip(scene.objects, objectives)):
        value, g = objective.value_and_grad(obj.track)
        total += value
        if grads is not None:
            ds, dh, dv = _unflatten(obj.track, g)
            tg = grads.objects[k].track
            tg.states += ds
            tg.heights += dh
            tg.velocities += dv
    return total


def interpolate_exposure(cams, train, i):
    """Affine of a held-out frame: mean of the nearest training frames on either side."""
    train = np.asarray(train)
    if i in train:
        return cams[i].A, cams[i].b
    lo = train[train < i]
    hi = train[train > i]
    pick = ([lo[-1]] if len(lo) else []) + ([hi[0]] if len(hi) else [])
    A = np.mean([cams[j].A for j in pick], axis=0)
    b = np.mean([cams[j].b for j in pick], axis=0)
    return A, b


def evaluate(scene, cams, pgt, gt, config, frames, train):
    """Novel-view metrics on ``frames``: PSNR, SSIM, 2D mIoU, depth RMSE and track errors."""
    spec = config.train
    psnr, ssim, depth_err, preds, labels = [], [], [], [], []
    for i in frames:
        cam = cams[i].copy()
        cam.A, cam.b = interpolate_exposure(cams, train, i)
        buf, _ = render(scene, cam, None, modalities=("rgb", semantic_modality(spec), "depth"))
        img = buf.color_exposed
        psnr.append(metric_psnr(np.clip(img, 0.0, 1.0), pgt.images[i]))
        ssim.append(metric_ssim(np.clip(img, 0.0, 1.0), pgt.images[i]))
        valid = np.isfinite(pgt.depth[i])
        if valid.any():
            depth_err.append(metric_depth(buf.depth, pgt.depth[i], valid))
        preds.append(np.argmax(semantic_buffer(buf, spec), axis=-1))
        labels.append(pgt.semantic_clean[i])
    out = {"psnr": float(np.mean(psnr)), "ssim": float(np.mean(ssim)),
           "depth_rmse": float(np.mean(depth_err)) if depth_err else float("nan"),
           "miou_2d": metric_miou(np.stack(preds), np.stack(labels), scene.class_count)["miou"]}
    if scene.objects:
        times = np.array([cams[i].timestamp for i in frames], dtype=np.float64)
        errs = [pose_errors(o.track, g, times) for o, g in zip(scene.objects, gt.tracks)]
        out["e_t"] = float(np.mean([e["mean_e_t"] for e in errs]))
        out["e_R"] = float(np.mean([e["mean_e_R"] for e in errs]))
    return out


def train(gt, cameras, pgt, config, rng=None, scene=None, cams=None, callback=None):
    """Optimise a scene against pseudo ground truth on the training frames.

    Starts from init_scene() unless ``scene`` and ``cams`` are given. Each
    iteration renders one training frame (a fresh permutation per epoch) and adds
    the motion losses of every object.
    """
    spec = config.train
    rng = np.random.default_rng(config.seed + 1) if rng is None else rng
    if scene is None:
        scene, cams = init_scene(gt, cameras, pgt, config, rng)
    train_idx, test_idx = split_frames(len(cameras), config.holdout_every)
    frozen = []
    if not spec.use_affine:
        frozen += ["exposure_A", "exposure_b"]
    if not spec.optimize_tracks:
        frozen += list(TRACK_FIELDS)
    schedule = Schedule(dict(spec.lrs), spec.track_decay, tuple(frozen))
    opt = Adam(schedule) if spec.optimizer == "adam" else None
    objectives = [MotionObjective(obs, spec.lambda_t, spec.lambda_uni, spec.lambda_reg, transition="propagated")
                  for obs in train_boxes(pgt, train_idx)] if spec.optimize_tracks else []
    history = []
    start = time.perf_counter()
    order = []
    for it in range(spec.iterations):
        if not order:
            order = list(rng.permutation(train_idx))
        i = int(order.pop())
        total, parts, grads = frame_loss(scene, cams, i, pgt, spec)
        if objectives:
            m = motion_loss(scene, objectives, grads)
            total += m
            parts["motion"] = m
        if it % max(spec.log_every, 1) == 0 or it == spec.iterations - 1:
            history.append({"iteration": it, "frame": i, "loss": float(total), **{k: float(v) for k, v in parts.items()}})
        if opt is not None:
            opt.step(scene, cams, grads)
        else:
            sgd_step(scene, cams, grads, schedule, it)
        if spec.eval_every and (it + 1) % spec.eval_every == 0 and callback is not None:
            callback(it, scene, cams)
    result = TrainResult(scene, cams, history, seconds=time.perf_counter() - start)
    if len(test_idx):
        result.metrics = evaluate(scene, cams, pgt, gt, config, test_idx, train_idx)
    return result


def total_objective(scene, cams, pgt, config, frames):
    """Sum of per-frame losses over ``frames`` plus the motion losses (no gradients)."""
    spec = config.train
    train_idx, _ = split_frames(len(cams), config.holdout_every)
    total = sum(frame_loss(scene, cams, int(i), pgt, spec, grad=False)[0] for i in frames)
    if spec.optimize_tracks:
        objectives = [MotionObjective(obs, spec.lambda_t, spec.lambda_uni, spec.lambda_reg, transition="propagated")
                      for obs in train_boxes(pgt, train_idx)]
        total += motion_loss(scene, objectives)
    return float(total)
