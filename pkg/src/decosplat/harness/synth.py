"""Synthetic driving scenes, camera paths and noisy pseudo ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import normalize_quat, yaw_matrix
from ..render import render
from ..scene import DynamicObject, FrameCamera, GaussianSet, SceneGraph, UnicycleTrack, sh_coeff_count
from ..sh import sh_basis
from ..unicycle import corrupt_track

CLASS_NAMES = ("road", "building", "vegetation", "vehicle", "pole")
ROAD, BUILDING, VEGETATION, VEHICLE, POLE = range(5)
FORWARD = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])  # x-forward world -> OpenCV camera
SH_DC = float(sh_basis(np.array([[1.0, 0.0, 0.0]]), 0)[0, 0])
LABEL_CONFIDENCE = 6.0  # logit margin of the true class
OBJECT_SIZE = (3.6, 1.7, 1.4)
PALETTE = {ROAD: (0.35, 0.35, 0.37), BUILDING: (0.72, 0.55, 0.42), VEGETATION: (0.25, 0.5, 0.22),
           VEHICLE: (0.75, 0.15, 0.12), POLE: (0.85, 0.8, 0.2)}


@dataclass
class GroundTruth:
    scene: SceneGraph
    labels_static: np.ndarray  # class per static Gaussian
    tracks: list  # UnicycleTrack per object (also stored in the scene)


@dataclass
class PseudoGT:
    images: np.ndarray  # (T, H, W, 3)
    semantic: np.ndarray  # (T, H, W) int, -1 = unsupervised
    semantic_clean: np.ndarray  # the same before label flips
    flow: np.ndarray  # (T, H, W, 2), towards frame t+1
    flow_valid: np.ndarray  # (T, H, W) bool
    depth: np.ndarray  # (T, H, W), nan where no measurement
    boxes: list = field(default_factory=list)  # NoisyBoxTrack per object
    exposures: list = field(default_factory=list)  # (A, b) per frame


# --- building blocks ----------------------------------------------------------

def _quat_z_to(n):
    """Unit quaternions (w, x, y, z) rotating +z onto the unit normals ``n``."""
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    w = 1.0 + n @ z
    q = np.concatenate([w[:, None], axis], axis=1)
    flip = w < 1e-9
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    return normalize_quat(q)


def _texture(points, freq):
    """Smooth deterministic pattern in [0, 1] so that flow and photometric losses have gradients."""
    p = points * freq
    return 0.5 + 0.25 * np.sin(p[:, 0] * 1.3 + np.sin(p[:, 1])) + 0.25 * np.cos(p[:, 1] * 1.7 + p[:, 2] * 0.9)


def _surface(points, normals, cls, size, rng, sh_degree, class_count, opacity=0.97):
    n = len(points)
    K = sh_coeff_count(sh_degree)
    base = np.array(PALETTE[cls])
    shade = 0.75 + 0.25 * _texture(points, 1.1)[:, None]
    color = np.clip(base * shade + rng.normal(0.0, 0.02, (n, 3)), 0.02, 0.95)
    sh = np.zeros((n, K, 3))
    sh[:, 0] = color / SH_DC
    if K > 1:
        sh[:, 1:] = rng.normal(0.0, 0.01, (n, K - 1, 3))
    logits = rng.normal(0.0, 0.3, (n, class_count))
    logits[:, min(cls, class_count - 1)] += LABEL_CONFIDENCE
    s = size * rng.uniform(0.8, 1.2, n)
    log_scale = np.log(np.stack([s, s, 0.15 * s], axis=1))
    op = np.full(n, np.log(opacity / (1.0 - opacity)))
    gs = GaussianSet(points, _quat_z_to(normals), log_scale, op, sh, logits)
    return gs, np.full(n, min(cls, class_count - 1))


def _box_surface(center, half, n, rng):
    """Points and outward normals sampled on the five visible faces of an axis-aligned box."""
    faces = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)]
    area = np.array([4 * half[(a + 1) % 3] * half[(a + 2) % 3] for a, _ in faces])
    pick = rng.choice(len(faces), n, p=area / area.sum())
    u = rng.uniform(-1.0, 1.0, (n, 3)) * half
    normals = np.zeros((n, 3))
    for i, (axis, sign) in enumerate(faces):
        sel = pick == i
        u[sel, axis] = sign * half[axis]
        normals[sel, axis] = sign
    return center + u, normals


def gen_object_track(rng, n_frames, x0, y0, speed, yaw_rate, height, pair=2, steady=False):
    """Exact unicycle trajectory whose (v, omega) stay constant over ``pair`` frames."""
    n_seg = -(-(n_frames - 1) // pair)
    k = np.arange(n_seg)
    v = speed * rng.uniform(0.8, 1.2) * (1.0 + 0.1 * np.sin(k * 0.7 + rng.uniform(0, 6)) * (not steady))
    w = yaw_rate * rng.uniform(0.5, 1.0) * np.sin(k * 2 * np.pi / max(n_seg, 2) * (not steady) + rng.uniform(0, 6))
    vel = np.repeat(np.stack([v, w], axis=1), pair, axis=0)[: n_frames - 1]
    theta0 = rng.uniform(-0.1, 0.1)
    return UnicycleTrack.from_velocities(np.arange(n_frames, dtype=np.float64), x0, y0, theta0, vel,
                                         np.full(n_frames, height))


def gen_curved_track(rng, n_frames, pair=2):
    """Curved trajectory for the tracking ablation: steady turn, speed 0.7 to 0.9 m per frame."""
    n_seg = -(-(n_frames - 1) // pair)
    v = 0.8 + 0.1 * np.sin(np.linspace(0.0, np.pi, n_seg) + rng.uniform(0, 6))
    w = np.full(n_seg, rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.08))
    vel = np.repeat(np.stack([v, w], axis=1), pair, axis=0)[: n_frames - 1]
    return UnicycleTrack.from_velocities(np.arange(n_frames, dtype=np.float64), 0.0, 0.0,
                                         rng.uniform(-np.pi, np.pi), vel, np.full(n_frames, 0.8))


def gen_scene(config, rng=None):
    """Ground plane, roadside boxes, a backdrop wall and moving vehicles."""
    sc = config.scene
    rng = np.random.default_rng(config.seed) if rng is None else rng
    S, deg = sc.class_count, sc.sh_degree
    if S < 2:
        raise ValueError("need at least two classes")
    parts, labels = [], []
    near = -2.0
    far = sc.extent + config.n_frames * config.camera.speed

    pts = np.stack([rng.uniform(near, far, sc.n_ground), rng.uniform(-sc.half_width, sc.half_width, sc.n_ground),
                    np.zeros(sc.n_ground)], axis=1)
    spacing = np.sqrt((far - near) * 2 * sc.half_width / max(sc.n_ground, 1))
    g, lab = _surface(pts, np.tile([0.0, 0.0, 1.0], (sc.n_ground, 1)), ROAD, 0.7 * spacing, rng, deg, S)
    parts.append(g)
    labels.append(lab)

    for i in range(sc.n_boxes):
        side = 1.0 if i % 2 == 0 else -1.0
        half = np.array([rng.uniform(1.5, 3.0), rng.uniform(1.0, 2.0), rng.uniform(1.5, 3.0)])
        cx = near + 4.0 + (far - near - 6.0) * (i + rng.uniform(0.2, 0.8)) / max(sc.n_boxes, 1)
        center = np.array([cx, side * (sc.half_width - half[1] + 0.5), half[2]])
        pts, normals = _box_surface(center, half, sc.n_per_box, rng)
        area = 2 * (half[0] * half[2] + half[1] * half[2]) * 4 + 4 * half[0] * half[1]
        cls = (BUILDING, VEGETATION, POLE)[i % 3]
        g, lab = _surface(pts, normals, cls, 0.8 * np.sqrt(area / sc.n_per_box), rng, deg, S)
        parts.append(g)
        labels.append(lab)

    if sc.n_backdrop:
        hw, top = sc.half_width + 4.0, 8.0
        pts = np.stack([np.full(sc.n_backdrop, far + 2.0), rng.uniform(-hw, hw, sc.n_backdrop),
                        rng.uniform(0.0, top, sc.n_backdrop)], axis=1)
        size = 0.8 * np.sqrt(2 * hw * top / sc.n_backdrop)
        g, lab = _surface(pts, np.tile([-1.0, 0.0, 0.0], (sc.n_backdrop, 1)), VEGETATION, size, rng, deg, S)
        parts.append(g)
        labels.append(lab)

    objects, tracks = [], []
    half = np.array(OBJECT_SIZE) / 2
    for j in range(sc.n_objects):
        pts, normals = _box_surface(np.zeros(3), half, sc.n_per_object, rng)
        area = 2 * (OBJECT_SIZE[0] * OBJECT_SIZE[2] + OBJECT_SIZE[1] * OBJECT_SIZE[2]) + OBJECT_SIZE[0] * OBJECT_SIZE[1]
        canon, _ = _surface(pts, normals, VEHICLE, 0.8 * np.sqrt(area / sc.n_per_object), rng, deg, S)
        lane = 2.0 if j % 2 == 0 else -2.0
        track = gen_object_track(rng, config.n_frames, 6.0 + 5.0 * j, lane, sc.object_speed,
                                 sc.object_yaw_rate, half[2], steady=sc.steady_motion)
        objects.append(DynamicObject(j + 1, canon, track))
        tracks.append(track)

    static = GaussianSet.concat(parts)
    scene = SceneGraph(static, objects, S, sc.background)
    return GroundTruth(scene, np.concatenate(labels), tracks)


def gen_floaters(rng, n, near, far, half_width, sh_degree, class_count):
    """Semi-transparent blobs with random colour and class hanging in free space above the road."""
    K = sh_coeff_count(sh_degree)
    mu = np.stack([rng.uniform(near, far, n), rng.uniform(-half_width, half_width, n), rng.uniform(0.8, 3.0, n)], 1)
    sh = np.zeros((n, K, 3))
    sh[:, 0] = rng.uniform(0.1, 0.9, (n, 3)) / SH_DC
    return GaussianSet(mu, normalize_quat(rng.normal(size=(n, 4))), np.log(rng.uniform(0.15, 0.35, (n, 3))),
                       rng.uniform(-0.5, 1.0, n), sh, rng.normal(0.0, 2.0, (n, class_count)))


# --- cameras ------------------------------------------------------------------

def camera_pose(config, t):
    """World-to-camera (R, t) on a forward path with a gentle lateral sway."""
    c = config.camera
    y = c.lateral_amplitude * np.sin(2 * np.pi * t / c.lateral_period)
    dy = c.lateral_amplitude * 2 * np.pi / c.lateral_period * np.cos(2 * np.pi * t / c.lateral_period)
    yaw = np.arctan2(dy, c.speed) if c.speed else 0.0
    center = np.array([c.speed * t, y, c.height])
    R = FORWARD @ yaw_matrix(yaw).T
    return R, -R @ center


def gen_cameras(config, exposures=None):
    w, h = config.width, config.height
    f = config.camera.focal_factor * w
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for t in range(config.n_frames):
        R, tr = camera_pose(config, float(t))
        A, b = (np.eye(3), np.zeros(3)) if exposures is None else exposures[t]
        cams.append(FrameCamera(K, R, tr, float(t), w, h, A, b))
    return cams


def gen_exposures(config, rng):
    """Smoothly varying per-frame colour gain and bias."""
    nz = config.noise
    phase = rng.uniform(0.0, 2 * np.pi, 3)
    out = []
    for t in range(config.n_frames):
        s = np.sin(2 * np.pi * t / nz.exposure_period + phase)
        common = np.sin(2 * np.pi * t / (1.7 * nz.exposure_period) + phase[0])
        A = np.diag(1.0 + nz.exposure_gain * (0.6 * common + 0.4 * s))
        b = nz.exposure_bias * s
        out.append((A, b))
    return out


# --- pseudo ground truth ------------------------------------------------------

def flip_labels(labels, rate, class_count, rng):
    """Replace each supervised label with a different class with probability ``rate``."""
    labels = np.asarray(labels).copy()
    sup = labels >= 0
    flip = sup & (rng.uniform(size=labels.shape) < rate)
    shift = rng.integers(1, class_count, size=labels.shape)
    labels[flip] = (labels[flip] + shift[flip]) % class_count
    return labels


def gen_pseudo_gt(gt, cameras, noise, rng, box_times=None, depth_fraction=0.3, coverage=0.5):
    """Render the ground-truth scene into noisy supervision.

    Images use each camera's (A, b); pixels whose accumulated alpha is below
    ``coverage`` carry no semantic, flow or depth supervision. Depth is sparse:
    a random ``depth_fraction`` of covered pixels, like a projected lidar sweep.
    """
    scene = gt.scene
    T = len(cameras)
    H, W = cameras[0].height, cameras[0].width
    images = np.zeros((T, H, W, 3))
    sem = np.full((T, H, W), -1, dtype=np.int64)
    flow = np.zeros((T, H, W, 2))
    flow_valid = np.zeros((T, H, W), dtype=bool)
    depth = np.full((T, H, W), np.nan)
    for i, cam in enumerate(cameras):
        nxt = cameras[i + 1] if i + 1 < T else None
        buf, _ = render(scene, cam, nxt, modalities=("rgb", "sem", "depth", "flow"))
        images[i] = np.clip(buf.color_exposed, 0.0, 1.0)
        covered = buf.accum_alpha >= coverage
        lab = np.argmax(buf.semantic, axis=-1)
        sem[i] = np.where(covered, lab, -1)
        if nxt is not None:
            flow[i] = buf.flow + rng.normal(0.0, 1.0, buf.flow.shape) * noise.flow_sigma
            flow_valid[i] = covered
        pick = covered & (rng.uniform(size=(H, W)) < depth_fraction)
        depth[i][pick] = buf.depth[pick]
    clean = sem.copy()
    if noise.label_flip > 0:
        sem = flip_labels(sem, noise.label_flip, scene.class_count, rng)
    times = np.array([c.timestamp for c in cameras]) if box_times is None else box_times
    boxes = [corrupt_track(o.track, noise.box_scale, rng, times) for o in scene.objects]
    return PseudoGT(images, sem, clean, flow, flow_valid, depth, boxes, [(c.A.copy(), c.b.copy()) for c in cameras])


def generate(config):
    """Scene, ground-truth cameras (with exposure) and pseudo ground truth for ``config``."""
    rng = np.random.default_rng(config.seed)
    gt = gen_scene(config, rng)
    exposures = gen_exposures(config, rng) if (config.noise.exposure_gain or config.noise.exposure_bias) else None
    cams = gen_cameras(config, exposures)
    pgt = gen_pseudo_gt(gt, cams, config.noise, rng)
    return gt, cams, pgt
