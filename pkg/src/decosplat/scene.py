"""Scene representation: Gaussians, cameras, object tracks and the static/dynamic decomposition.

Gaussian parameters are kept in unconstrained form: log-scales and pre-sigmoid
opacities. Batches of Gaussians live in :class:`GaussianSet` (struct of arrays);
:class:`Gaussian3D` is the single-splat view used at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kinematics
from .geometry import normalize_quat, quat_multiply, quat_to_rotmat, yaw_matrix, yaw_matrix_deriv, yaw_quat


class PoseRangeError(ValueError):
    """Requested pose lies outside the track and its extrapolation horizon."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sh_coeff_count(degree):
    return (degree + 1) ** 2


@dataclass
class Gaussian3D:
    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # (K, 3)
    logits: np.ndarray  # (S,)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianSet:
    mu: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4), unit
    log_scale: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)
    logits: np.ndarray  # (N, S)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, sh.shape[-2] if sh.ndim == 3 else -1, 3)
        logits = np.asarray(self.logits, dtype=np.float64)
        self.logits = logits.reshape(n, logits.shape[-1] if logits.ndim == 2 else -1)
        k = self.sh.shape[1]
        degree = int(round(np.sqrt(k))) - 1
        if sh_coeff_count(degree) != k:
            raise ValueError(f"SH coefficient count {k} is not a square")

    def __len__(self):
        return len(self.mu)

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def class_count(self):
        return self.logits.shape[1]

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    @property
    def rotation(self):
        return quat_to_rotmat(self.quat)

    def copy(self):
        return GaussianSet(self.mu.copy(), self.quat.copy(), self.log_scale.copy(),
                           self.opacity_logit.copy(), self.sh.copy(), self.logits.copy())

    def subset(self, index):
        return GaussianSet(self.mu[index], self.quat[index], self.log_scale[index],
                           self.opacity_logit[index], self.sh[index], self.logits[index])

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(self.mu[i].copy(), self.quat[i].copy(), self.log_scale[i].copy(),
                          float(self.opacity_logit[i]), self.sh[i].copy(), self.logits[i].copy())

    @classmethod
    def empty(cls, sh_degree=0, class_count=1):
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, k, 3)), np.zeros((0, class_count)))

    @classmethod
    def from_gaussians(cls, items):
        items = list(items)
        return cls(np.array([g.mu for g in items]).reshape(-1, 3),
                   np.array([g.quat for g in items]).reshape(-1, 4),
                   np.array([g.log_scale for g in items]).reshape(-1, 3),
                   np.array([g.opacity_logit for g in items]),
                   np.array([g.sh for g in items]),
                   np.array([g.logits for g in items]))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        return cls(np.concatenate([s.mu for s in sets]),
                   np.concatenate([s.quat for s in sets]),
                   np.concatenate([s.log_scale for s in sets]),
                   np.concatenate([s.opacity_logit for s in sets]),
                   np.concatenate([s.sh for s in sets]),
                   np.concatenate([s.logits for s in sets]))


def covariance_of(g):
    """Sigma = R S S^T R^T for a Gaussian3D (3x3) or a GaussianSet (N, 3, 3)."""
    R = quat_to_rotmat(g.quat)
    M = R * np.exp(np.asarray(g.log_scale))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class UnicycleTrack:
    """Per-timestamp ground-plane states (x, y, theta), heights z and per-interval (v, omega).

    Velocities are expressed per interval between consecutive timestamps; with
    unit-spaced frame indices that is metres and radians per frame.
    """

    timestamps: np.ndarray  # (T,)
    states: np.ndarray  # (T, 3)
    heights: np.ndarray  # (T,)
    velocities: np.ndarray  # (T-1, 2)
    horizon: float = 1.0
    # "unicycle": between timestamps propagate with scaled (v, omega); "linear": lerp states
    interpolation: str = "unicycle"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 3)
        self.heights = np.asarray(self.heights, dtype=np.float64).reshape(-1)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 2)
        n = len(self.timestamps)
        if n == 0:
            raise ValueError("track needs at least one timestamp")
        if len(self.states) != n or len(self.heights) != n:
            raise ValueError("states/heights must match timestamps")
        if len(self.velocities) != n - 1:
            raise ValueError("len(velocities) must equal len(states) - 1")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.interpolation not in ("unicycle", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def __len__(self):
        return len(self.timestamps)

    def copy(self):
        return replace(self, timestamps=self.timestamps.copy(), states=self.states.copy(),
                       heights=self.heights.copy(), velocities=self.velocities.copy())

    @classmethod
    def from_velocities(cls, timestamps, x0, y0, theta0, velocities, heights):
        """Track whose states follow the unicycle recursion exactly."""
        velocities = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
        states = kinematics.rollout(x0, y0, theta0, velocities[:, 0], velocities[:, 1])
        return cls(timestamps, states, heights, velocities)

    def pose_at(self, t):
        return pose_at(self, t)


def _locate(track, t):
    """Return (kind, k, tau): kind in {"obs", "interp", "after", "before"}."""
    ts = track.timestamps
    t = float(t)
    hit = np.nonzero(np.abs(ts - t) <= 1e-9)[0]
    if len(hit):
        return "obs", int(hit[0]), 0.0
    if ts[0] < t < ts[-1]:
        k = int(np.searchsorted(ts, t, side="right") - 1)
        return "interp", k, (t - ts[k]) / (ts[k + 1] - ts[k])
    if t > ts[-1] and t - ts[-1] <= track.horizon + 1e-12:
        if len(ts) < 2:
            return "hold", len(ts) - 1, 0.0
        return "after", len(ts) - 1, (t - ts[-1]) / (ts[-1] - ts[-2])
    if t < ts[0] and ts[0] - t <= track.horizon + 1e-12:
        if len(ts) < 2:
            return "hold", 0, 0.0
        return "before", 0, (t - ts[0]) / (ts[1] - ts[0])
    raise PoseRangeError(f"t={t} outside [{ts[0]}, {ts[-1]}] with horizon {track.horizon}")


def pose_state(track, t):
    """(x, y, z, theta) of the object at (possibly fractional) time t."""
    kind, k, tau = _locate(track, t)
    if kind in ("obs", "hold"):
        x, y, th = track.states[k]
        return np.array([x, y, track.heights[k], th])
    if track.interpolation == "linear":
        j = k + 1 if kind != "after" else k - 1
        u = tau if kind != "after" else -tau
        return (1 - u) * np.append(track.states[k], track.heights[k])[[0, 1, 3, 2]] \
            + u * np.append(track.states[j], track.heights[j])[[0, 1, 3, 2]]
    vk = k if kind != "after" else k - 1
    v, w = track.velocities[vk]
    x, y, th = kinematics.step(*track.states[k], tau * v, tau * w)
    if kind == "interp":
        z = (1 - tau) * track.heights[k] + tau * track.heights[k + 1]
    else:
        z = track.heights[k]
    return np.array([float(x), float(y), z, float(th)])


def pose_state_vjp(track, t, grad):
    """Pull a gradient on (x, y, z, theta) at time t back to the track parameters.

    Returns (d_states (T, 3), d_heights (T,), d_velocities (T-1, 2)).
    """
    grad = np.asarray(grad, dtype=np.float64)
    d_states = np.zeros_like(track.states)
    d_heights = np.zeros_like(track.heights)
    d_vel = np.zeros_like(track.velocities)
    kind, k, tau = _locate(track, t)
    gx, gy, gz, gth = grad
    if kind in ("obs", "hold"):
        d_states[k] += (gx, gy, gth)
        d_heights[k] += gz
        return d_states, d_heights, d_vel
    if track.interpolation == "linear":
        j = k + 1 if kind != "after" else k - 1
        u = tau if kind != "after" else -tau
        g3 = np.array([gx, gy, gth])
        d_states[k] += (1 - u) * g3
        d_states[j] += u * g3
        d_heights[k] += (1 - u) * gz
        d_heights[j] += u * gz
        return d_states, d_heights, d_vel
    vk = k if kind != "after" else k - 1
    v, w = track.velocities[vk]
    th = track.states[k, 2]
    jx, jy = kinematics.step_jacobian(th, tau * v, tau * w)
    # columns: theta, v_scaled, w_scaled; theta' = theta + tau*w
    d_states[k, 0] += gx
    d_states[k, 1] += gy
    d_states[k, 2] += gx * jx[0] + gy * jy[0] + gth
    d_vel[vk, 0] += tau * (gx * jx[1] + gy * jy[1])
    d_vel[vk, 1] += tau * (gx * jx[2] + gy * jy[2] + gth)
    if kind == "interp":
        d_heights[k] += (1 - tau) * gz
        d_heights[k + 1] += tau * gz
    else:
        d_heights[k] += gz
    return d_states, d_heights, d_vel


def pose_at(track, t):
    """Rigid pose (R, translation) of the object frame at time t (yaw-only rotation)."""
    x, y, z, th = pose_state(track, t)
    return yaw_matrix(th), np.array([x, y, z])


@dataclass
class FrameCamera:
    """Pinhole camera with world-to-camera pose and a per-frame exposure affine."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    timestamp: float
    width: int
    height: int
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.A = np.asarray(self.A, dtype=np.float64).reshape(3, 3)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(3)
        self.timestamp = float(self.timestamp)
        self.width = int(self.width)
        self.height = int(self.height)
        if np.any(np.tril(self.K, -1) != 0) or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must be upper-triangular with positive focal lengths")
        if (np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(self.R) - 1.0) > 1e-9):
            raise ValueError("R must be a proper rotation")

    @property
    def center(self):
        return -self.R.T @ self.t

    def copy(self):
        return replace(self, K=self.K.copy(), R=self.R.copy(), t=self.t.copy(),
                       A=self.A.copy(), b=self.b.copy())


@dataclass
class DynamicObject:
    id: int
    canonical: GaussianSet
    track: UnicycleTrack

    def check_centered(self, radius):
        if len(self.canonical) and np.linalg.norm(self.canonical.mu.mean(axis=0)) > radius:
            raise ValueError(f"object {self.id}: canonical centroid farther than {radius} from origin")

    def copy(self):
        return DynamicObject(self.id, self.canonical.copy(), self.track.copy())


@dataclass
class SceneGraph:
    static: GaussianSet
    objects: list = field(default_factory=list)
    class_count: int = 1
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for gs in [self.static] + [o.canonical for o in self.objects]:
            if len(gs) and gs.class_count != self.class_count:
                raise ValueError("every Gaussian needs class_count logits")

    @property
    def sh_degree(self):
        return self.static.sh_degree

    def copy(self):
        return SceneGraph(self.static.copy(), [o.copy() for o in self.objects],
                          self.class_count, self.background.copy())


@dataclass
class WorldInstance:
    """Scene flattened to world-frame Gaussians at one timestamp.

    ``source`` holds -1 for static Gaussians, otherwise the object id. Per object
    the slice into the flat arrays and the (x, y, z, theta) pose are kept so that
    gradients can be routed back to canonical parameters and tracks.
    """

    gaussians: GaussianSet
    source: np.ndarray
    time: float
    slices: list  # [(object index, slice)]
    poses: list  # [(x, y, z, theta)]


def transform_gaussians(gs, pose):
    x, y, z, th = pose
    R = yaw_matrix(th)
    out = gs.copy()
    out.mu = gs.mu @ R.T + np.array([x, y, z])
    out.quat = quat_multiply(yaw_quat(th), gs.quat)
    return out


def instantiate_world(scene, t):
    parts = [scene.static]
    source = [np.full(len(scene.static), -1)]
    slices, poses = [], []
    offset = len(scene.static)
    for idx, obj in enumerate(scene.objects):
        pose = pose_state(obj.track, t)
        parts.append(transform_gaussians(obj.canonical, pose))
        source.append(np.full(len(obj.canonical), obj.id))
        slices.append((idx, slice(offset, offset + len(obj.canonical))))
        poses.append(pose)
        offset += len(obj.canonical)
    return WorldInstance(GaussianSet.concat(parts), np.concatenate(source).astype(np.int64),
                         float(t), slices, poses)


def rigid_vjp(canonical_mu, pose, d_mu_world, d_theta_extra=0.0, d_rot_world=None, rot_canonical=None):
    """Backward of mu_w = R(theta) mu_c + (x, y, z) and R_w = R(theta) R_c.

    Returns (d_mu_canonical, d_pose (4,)).
    """
    x, y, z, th = pose
    R = yaw_matrix(th)
    dR = yaw_matrix_deriv(th)
    d_mu_c = d_mu_world @ R
    d_t = d_mu_world.sum(axis=0)
    d_th = float(np.einsum("ni,ij,nj->", d_mu_world, dR, canonical_mu)) + d_theta_extra
    if d_rot_world is not None:
        # dL/dR_o = sum_n dL/dR_w,n R_c,n^T
        G = np.einsum("nij,nkj->ik", d_rot_world, rot_canonical)
        d_th += float(np.sum(G * dR))
    return d_mu_c, np.array([d_t[0], d_t[1], d_t[2], d_th])
