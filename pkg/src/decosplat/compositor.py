"""Front-to-back alpha compositing of every modality, exposure correction and splat flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .projection import ALPHA_MAX, ALPHA_MIN, NEAR_PLANE, pinhole, softmax, to_camera
from .geometry import yaw_matrix
from .scene import pose_state

T_MIN = _kernels.T_MIN
MODALITIES = ("rgb", "sem", "sem2d", "depth", "flow")


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3), linear, before exposure
    accum_alpha: np.ndarray  # (H, W)
    color_exposed: np.ndarray | None = None
    semantic: np.ndarray | None = None  # (H, W, S), per-Gaussian softmax then blend
    semantic_2dnorm: np.ndarray | None = None  # (H, W, S), blend logits then softmax
    semantic_logits: np.ndarray | None = None  # blended raw logits behind semantic_2dnorm
    depth: np.ndarray | None = None  # (H, W), +inf where nothing was hit
    flow: np.ndarray | None = None  # (H, W, 2)

    @property
    def shape(self):
        return self.color.shape[:2]


def pixel_alpha(splat, x):
    """alpha' of ``splat`` at pixel position ``x``; below 1/255 counts as zero, capped at 0.999."""
    d = np.asarray(x, dtype=np.float64) - splat.mean2d
    a, b, c = splat.conic
    q = a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2
    alpha = splat.opacity * np.exp(-0.5 * q)
    if alpha < ALPHA_MIN:
        return 0.0
    return float(min(alpha, ALPHA_MAX))


def feature_layout(class_count, modalities):
    """Channel slices of the packed per-splat feature matrix."""
    layout = {"rgb": slice(0, 3)}
    pos = 3
    for name, width in (("sem", class_count), ("sem2d", class_count), ("depth", 1), ("flow", 2)):
        if name in modalities:
            layout[name] = slice(pos, pos + width)
            pos += width
    return layout, pos


def pack_features(splats, modalities):
    layout, n_feat = feature_layout(splats.logits.shape[1], modalities)
    feats = np.zeros((len(splats), n_feat))
    feats[:, layout["rgb"]] = splats.color
    if "sem" in layout:
        feats[:, layout["sem"]] = splats.probs
    if "sem2d" in layout:
        feats[:, layout["sem2d"]] = splats.logits
    if "depth" in layout:
        feats[:, layout["depth"]] = splats.depth[:, None]
    if "flow" in layout:
        if splats.flow is None:
            raise ValueError("flow modality requested but splats carry no flow")
        # invalid flows drop out of the weighted sum but still occlude
        feats[:, layout["flow"]] = np.where(splats.flow_valid[:, None], splats.flow, 0.0)
    return feats, layout


def finish_buffers(out, t_final, layout, background):
    color = out[..., layout["rgb"]] + t_final[..., None] * background
    buf = RenderBuffers(color=color, accum_alpha=1.0 - t_final)
    if "sem" in layout:
        buf.semantic = out[..., layout["sem"]].copy()
    if "sem2d" in layout:
        buf.semantic_logits = out[..., layout["sem2d"]].copy()
        buf.semantic_2dnorm = softmax(buf.semantic_logits)
    if "depth" in layout:
        depth = out[..., layout["depth"]][..., 0].copy()
        depth[t_final == 1.0] = np.inf
        buf.depth = depth
    if "flow" in layout:
        buf.flow = out[..., layout["flow"]].copy()
    return buf


def composite(grid, splats, background, width, height, modalities=MODALITIES):
    """Tiled compositing of all requested modalities in one pass.

    Returns (RenderBuffers, tape) where the tape holds what the backward pass replays.
    """
    feats, layout = pack_features(splats, modalities)
    out, t_final, n_proc = _kernels.composite_forward(
        grid.offsets, grid.indices, grid.tiles_x, grid.tile_size, width, height,
        splats.mean2d, splats.conic, splats.opacity, feats)
    buf = finish_buffers(out, t_final, layout, np.asarray(background, dtype=np.float64))
    tape = {"feats": feats, "layout": layout, "t_final": t_final, "n_proc": n_proc}
    return buf, tape


def composite_bruteforce(splats, background, width, height, modalities=MODALITIES, max_entries=2_000_000):
    """Reference compositor: every splat against every pixel in global (depth, index) order."""
    feats, layout = pack_features(splats, modalities)
    order = np.lexsort((np.arange(len(splats)), splats.depth))
    mean = splats.mean2d[order]
    con = splats.conic[order]
    opac = splats.opacity[order]
    F = feats[order]
    ys, xs = np.mgrid[0:height, 0:width]
    px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)
    out = np.zeros((len(px), F.shape[1]))
    t_final = np.ones(len(px))
    step = max(1, max_entries // max(1, len(splats)))
    for lo in range(0, len(px), step):
        p = px[lo:lo + step]
        dx = p[:, None, 0] - mean[None, :, 0]
        dy = p[:, None, 1] - mean[None, :, 1]
        q = con[:, 0] * dx * dx + 2.0 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
        alpha = opac * np.exp(-0.5 * q)
        alpha = np.where(alpha >= ALPHA_MIN, np.minimum(alpha, ALPHA_MAX), 0.0)
        one_minus = 1.0 - alpha
        T = np.cumprod(np.concatenate([np.ones((len(p), 1)), one_minus[:, :-1]], axis=1), axis=1)
        active = T >= T_MIN
        w = np.where(active, alpha * T, 0.0)
        out[lo:lo + step] = w @ F
        t_final[lo:lo + step] = np.where(active, one_minus, 1.0).prod(axis=1)
    out = out.reshape(height, width, -1)
    return finish_buffers(out, t_final.reshape(height, width), layout, np.asarray(background, dtype=np.float64))


def apply_exposure(color, A, b):
    """Per-pixel affine colour correction A @ c + b (no clamping)."""
    return np.asarray(color) @ np.asarray(A).T + np.asarray(b)


def exposure_vjp(color, A, grad):
    """Gradients of A @ c + b w.r.t. (color, A, b)."""
    g = grad.reshape(-1, 3)
    c = color.reshape(-1, 3)
    return (grad @ A), g.T @ c, g.sum(axis=0)


def project_point(cam, point):
    return pinhole(to_camera(point, cam), cam.K)


def splat_flow(mu, cam1, cam2, motion=None):
    """Pixel motion f = mu'_2 - mu'_1 of a world point between two cameras.

    ``motion`` optionally gives the object's rigid change (R_rel, t_rel) mapping the
    point at t1 to its position at t2. Returns None when the point is behind
    either camera.
    """
    mu = np.asarray(mu, dtype=np.float64)
    mu2 = mu if motion is None else motion[0] @ mu + motion[1]
    p1 = to_camera(mu, cam1)
    p2 = to_camera(mu2, cam2)
    if p1[2] <= NEAR_PLANE or p2[2] <= NEAR_PLANE:
        return None
    return pinhole(p2, cam2.K) - pinhole(p1, cam1.K)


def splat_flows(scene, world, splats, cam1, cam2):
    """Per-splat flow towards ``cam2``; fills splats.flow / flow_valid and returns intermediates."""
    idx = splats.index
    mu1 = world.gaussians.mu[idx]
    mu2 = mu1.copy()
    obj_pose2 = []
    for (oi, sl), _ in zip(world.slices, world.poses):
        obj = scene.objects[oi]
        pose2 = pose_state(obj.track, cam2.timestamp)
        obj_pose2.append(pose2)
        sel = (idx >= sl.start) & (idx < sl.stop)
        if np.any(sel):
            mu_c = obj.canonical.mu[idx[sel] - sl.start]
            mu2[sel] = mu_c @ yaw_matrix(pose2[3]).T + pose2[:3]
    p2 = to_camera(mu2, cam2)
    valid = p2[:, 2] > NEAR_PLANE
    p2_safe = np.where(valid[:, None], p2, np.array([0.0, 0.0, 1.0]))
    flow = pinhole(p2_safe, cam2.K) - splats.mean2d
    splats.flow = np.where(valid[:, None], flow, 0.0)
    splats.flow_valid = valid
    return {"mu2": mu2, "p2": p2_safe, "pose2": obj_pose2, "cam2": cam2}
