"""Analytic backward pass of the renderer, finite-difference checking and parameter updates.

Gradients travel buffers -> compositor -> screen-space splats -> EWA projection ->
world Gaussians -> rigid instantiation -> object tracks. Quaternion gradients are
tangent 3-vectors for the right perturbation q * exp(delta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .compositor import exposure_vjp
from .projection import pinhole_jacobian
from .render import contribution_signature, record_tapes
from .geometry import retract_quat, rotmat_grad_to_tangent, yaw_matrix, yaw_matrix_deriv
from .scene import pose_state_vjp, quat_to_rotmat
from .sh import sh_vjp

GAUSSIAN_FIELDS = ("mu", "quat", "log_scale", "opacity_logit", "sh", "logits")
TRACK_FIELDS = ("states", "heights", "velocities")
PARAM_CLASSES = GAUSSIAN_FIELDS + TRACK_FIELDS + ("exposure_A", "exposure_b")


class UsageError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, where):
        super().__init__(f"non-finite gradient in {where}")
        self.where = where


@dataclass
class GaussianGrads:
    mu: np.ndarray
    quat: np.ndarray  # tangent, (N, 3)
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    logits: np.ndarray

    @classmethod
    def zeros(cls, gs):
        n = len(gs)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros_like(gs.sh), np.zeros_like(gs.logits))


@dataclass
class TrackGrads:
    states: np.ndarray
    heights: np.ndarray
    velocities: np.ndarray

    @classmethod
    def zeros(cls, track):
        return cls(np.zeros_like(track.states), np.zeros_like(track.heights), np.zeros_like(track.velocities))


@dataclass
class ObjectGrads:
    canonical: GaussianGrads
    track: TrackGrads


@dataclass
class ParamGrads:
    static: GaussianGrads
    objects: list
    exposure: dict = field(default_factory=dict)  # camera index -> (dA, db)

    @classmethod
    def zeros(cls, scene, n_cameras=0):
        return cls(GaussianGrads.zeros(scene.static),
                   [ObjectGrads(GaussianGrads.zeros(o.canonical), TrackGrads.zeros(o.track)) for o in scene.objects],
                   {k: (np.zeros((3, 3)), np.zeros(3)) for k in range(n_cameras)})

    def arrays(self):
        """(class, location, array) for every gradient array."""
        for name in GAUSSIAN_FIELDS:
            yield name, ("static",), getattr(self.static, name)
        for i, og in enumerate(self.objects):
            for name in GAUSSIAN_FIELDS:
                yield name, ("object", i), getattr(og.canonical, name)
            for name in TRACK_FIELDS:
                yield name, ("object", i), getattr(og.track, name)
        for k in sorted(self.exposure):
            yield "exposure_A", ("camera", k), self.exposure[k][0]
            yield "exposure_b", ("camera", k), self.exposure[k][1]

    def add_(self, other, scale=1.0):
        for (_, _, a), (_, _, b) in zip(self.arrays(), other.arrays()):
            a += scale * b
        for k, (dA, db) in other.exposure.items():
            if k not in self.exposure:
                self.exposure[k] = (scale * dA.copy(), scale * db.copy())
        return self

    def scale_(self, s):
        for _, _, a in self.arrays():
            a *= s
        return self

    def max_abs(self):
        return max((float(np.abs(a).max()) for _, _, a in self.arrays() if a.size), default=0.0)


def _softmax_vjp(p, g):
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


def backward(tape, grads, camera_index=0):
    """Gradients of a scalar loss given its derivatives w.r.t. the render buffers.

    ``grads`` maps buffer names (color_exposed, color, semantic, semantic_2dnorm,
    depth, flow, accum_alpha) to arrays shaped like the buffers; missing keys are
    zero. Exposure gradients are filed under ``camera_index``.
    """
    if tape is None:
        raise UsageError("backward() needs the tape returned by render()")
    scene, cam, buf = tape.scene, tape.cam, tape.buffers
    splats, grid, ctape = tape.splats, tape.grid, tape.composite
    layout = ctape["layout"]
    H, W = buf.shape
    out = ParamGrads.zeros(scene)

    g_color = np.zeros((H, W, 3))
    if grads.get("color") is not None:
        g_color += grads["color"]
    dA, db = np.zeros((3, 3)), np.zeros(3)
    if grads.get("color_exposed") is not None:
        g_c, dA, db = exposure_vjp(buf.color, cam.A, grads["color_exposed"])
        g_color += g_c
    out.exposure[camera_index] = (dA, db)

    g_out = np.zeros((H, W, ctape["feats"].shape[1]))
    g_out[..., layout["rgb"]] = g_color
    grad_t = g_color @ scene.background
    if grads.get("accum_alpha") is not None:
        grad_t = grad_t - grads["accum_alpha"]
    if "sem" in layout and grads.get("semantic") is not None:
        g_out[..., layout["sem"]] = grads["semantic"]
    if "sem2d" in layout and grads.get("semantic_2dnorm") is not None:
        g_out[..., layout["sem2d"]] = _softmax_vjp(buf.semantic_2dnorm, grads["semantic_2dnorm"])
    if "depth" in layout and grads.get("depth") is not None:
        gd = np.where(np.isfinite(buf.depth), grads["depth"], 0.0)
        g_out[..., layout["depth"]] = gd[..., None]
    if "flow" in layout and grads.get("flow") is not None:
        g_out[..., layout["flow"]] = grads["flow"]

    if len(splats) == 0:
        return out

    d_feats, d_opac, d_mean, d_conic = _kernels.composite_backward(
        grid.offsets, grid.indices, grid.tiles_x, grid.tile_size, W, H,
        splats.mean2d, splats.conic, splats.opacity, ctape["feats"], ctape["n_proc"],
        np.ascontiguousarray(g_out), np.ascontiguousarray(grad_t))

    m = len(splats)
    d_color = d_feats[:, layout["rgb"]]
    d_logits = np.zeros_like(splats.logits)
    if "sem" in layout:
        d_logits += _softmax_vjp(splats.probs, d_feats[:, layout["sem"]])
    if "sem2d" in layout:
        d_logits += d_feats[:, layout["sem2d"]]
    d_p = np.zeros((m, 3))
    if "depth" in layout:
        d_p[:, 2] += d_feats[:, layout["depth"]][:, 0]

    # flow: f = pi_2(mu_2) - mean2d
    d_mu2 = None
    if "flow" in layout:
        d_flow = np.where(splats.flow_valid[:, None], d_feats[:, layout["flow"]], 0.0)
        d_mean -= d_flow
        J2 = pinhole_jacobian(tape.flow["p2"], tape.flow["cam2"].K)
        d_mu2 = np.einsum("nij,ni->nj", J2, d_flow) @ tape.flow["cam2"].R

    # conic = inv(cov2d + floor)
    a, b, c = splats.conic[:, 0], splats.conic[:, 1], splats.conic[:, 2]
    Con = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    G = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                  np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2)
    d_cov2 = -Con @ G @ Con
    T = splats.T
    Sigma = splats.cov3d
    d_sigma = np.swapaxes(T, -1, -2) @ d_cov2 @ T
    d_T = 2.0 * d_cov2 @ T @ Sigma
    d_J = d_T @ cam.R.T
    p = splats.p_cam
    K = cam.K
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    z2, z3 = z * z, z * z * z
    d_p[:, 0] += d_J[:, 0, 2] * (-K[0, 0] / z2)
    d_p[:, 1] += d_J[:, 0, 2] * (-K[0, 1] / z2) + d_J[:, 1, 2] * (-K[1, 1] / z2)
    d_p[:, 2] += (d_J[:, 0, 0] * (-K[0, 0] / z2) + d_J[:, 0, 1] * (-K[0, 1] / z2)
                  + d_J[:, 0, 2] * (2 * (K[0, 0] * x + K[0, 1] * y) / z3)
                  + d_J[:, 1, 1] * (-K[1, 1] / z2) + d_J[:, 1, 2] * (2 * K[1, 1] * y / z3))
    J = pinhole_jacobian(p, K)
    d_p += np.einsum("nij,ni->nj", J, d_mean)
    d_mu = d_p @ cam.R

    world = tape.world.gaussians
    idx = splats.index
    d_sh, d_mu_sh = sh_vjp(world.sh[idx], splats.dirs, splats.dist[:, None], d_color)
    d_mu += d_mu_sh

    scale = world.scale[idx]
    R = quat_to_rotmat(world.quat[idx])
    M = R * scale[:, None, :]
    d_M = (d_sigma + np.swapaxes(d_sigma, -1, -2)) @ M
    d_R = d_M * scale[:, None, :]
    d_scale = np.einsum("nij,nij->nj", R, d_M)
    d_logscale = d_scale * scale
    d_quat = rotmat_grad_to_tangent(R, d_R)
    o = splats.opacity
    d_ol = d_opac * o * (1 - o)

    # scatter onto the flat world arrays
    n_world = len(world)
    full = {
        "mu": np.zeros((n_world, 3)), "quat": np.zeros((n_world, 3)), "log_scale": np.zeros((n_world, 3)),
        "opacity_logit": np.zeros(n_world), "sh": np.zeros_like(world.sh), "logits": np.zeros_like(world.logits),
        "rot": np.zeros((n_world, 3, 3)), "mu2": np.zeros((n_world, 3)),
    }
    full["mu"][idx] = d_mu
    full["quat"][idx] = d_quat
    full["log_scale"][idx] = d_logscale
    full["opacity_logit"][idx] = d_ol
    full["sh"][idx] = d_sh
    full["logits"][idx] = d_logits
    full["rot"][idx] = d_R
    if d_mu2 is not None:
        full["mu2"][idx] = d_mu2

    ns = len(scene.static)
    st = out.static
    for name in GAUSSIAN_FIELDS:
        getattr(st, name)[...] = full[name][:ns]
    st.mu += full["mu2"][:ns]

    for (oi, sl), pose in zip(tape.world.slices, tape.world.poses):
        obj = scene.objects[oi]
        og = out.objects[oi]
        for name in ("quat", "log_scale", "opacity_logit", "sh", "logits"):
            getattr(og.canonical, name)[...] = full[name][sl]
        mu_c = obj.canonical.mu
        Ro = yaw_matrix(pose[3])
        dRo = yaw_matrix_deriv(pose[3])
        d_mu_w = full["mu"][sl]
        og.canonical.mu[...] = d_mu_w @ Ro
        d_pose = np.zeros(4)
        d_pose[:3] = d_mu_w.sum(axis=0)
        d_pose[3] = np.einsum("ni,ij,nj->", d_mu_w, dRo, mu_c)
        # R_w = R_o R_c
        Rc = quat_to_rotmat(obj.canonical.quat)
        d_pose[3] += np.sum((np.einsum("nij,nkj->ik", full["rot"][sl], Rc)) * dRo)
        ds, dh, dv = pose_state_vjp(obj.track, tape.world.time, d_pose)
        og.track.states += ds
        og.track.heights += dh
        og.track.velocities += dv
        if d_mu2 is not None:
            pose2 = tape.flow["pose2"][oi]
            d2 = full["mu2"][sl]
            Ro2 = yaw_matrix(pose2[3])
            og.canonical.mu += d2 @ Ro2
            dp2 = np.zeros(4)
            dp2[:3] = d2.sum(axis=0)
            dp2[3] = np.einsum("ni,ij,nj->", d2, yaw_matrix_deriv(pose2[3]), mu_c)
            ds, dh, dv = pose_state_vjp(obj.track, tape.flow["cam2"].timestamp, dp2)
            og.track.states += ds
            og.track.heights += dh
            og.track.velocities += dv
    return out


# --- parameter access -------------------------------------------------------

def param_slots(scene, cameras):
    """(class, location, owner, attribute) for every trainable array."""
    for name in GAUSSIAN_FIELDS:
        yield name, ("static",), scene.static, name
    for i, obj in enumerate(scene.objects):
        for name in GAUSSIAN_FIELDS:
            yield name, ("object", i), obj.canonical, name
        for name in TRACK_FIELDS:
            yield name, ("object", i), obj.track, name
    for k, cam in enumerate(cameras):
        yield "exposure_A", ("camera", k), cam, "A"
        yield "exposure_b", ("camera", k), cam, "b"


def grad_for(grads, cls, loc):
    if loc[0] == "static":
        return getattr(grads.static, cls)
    if loc[0] == "object":
        og = grads.objects[loc[1]]
        return getattr(og.canonical, cls) if cls in GAUSSIAN_FIELDS else getattr(og.track, cls)
    dA, db = grads.exposure.get(loc[1], (None, None))
    return dA if cls == "exposure_A" else db


def _check_finite(grads):
    for cls, loc, g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"{cls} {loc}")


def _apply(owner, attr, cls, delta):
    if cls == "quat":
        moved = np.any(delta != 0.0, axis=-1)  # untouched rows keep their exact bits
        quat = owner.quat.copy()
        quat[moved] = retract_quat(quat[moved], delta[moved])
        owner.quat = quat
    else:
        setattr(owner, attr, getattr(owner, attr) + delta)


@dataclass
class Schedule:
    """Per-class learning rates; track classes decay as lr * decay**step."""

    lrs: dict
    track_decay: float = 1.0
    frozen: tuple = ()

    def lr(self, cls, step):
        base = self.lrs.get(cls, 0.0)
        if cls in self.frozen:
            return 0.0
        if cls in TRACK_FIELDS:
            return base * self.track_decay ** step
        return base


def sgd_step(scene, cameras, grads, schedule, step=0):
    """Plain gradient descent; quaternions are retracted and renormalised."""
    _check_finite(grads)
    for cls, loc, owner, attr in param_slots(scene, cameras):
        g = grad_for(grads, cls, loc)
        lr = schedule.lr(cls, step)
        if g is None or lr == 0.0:
            continue
        _apply(owner, attr, cls, -lr * g)
    return scene, cameras


class Adam:
    """Adam over the same parameter slots, with the same per-class schedule.

    Gradient entries below ``floor`` in magnitude are treated as exactly zero:
    Adam normalises step sizes, so round-off left at a stationary point (SSIM is
    only stationary up to ~1e-17) would otherwise be blown up into real steps.
    """

    def __init__(self, schedule, beta1=0.9, beta2=0.999, eps=1e-8, floor=1e-14):
        self.schedule = schedule
        self.floor = floor
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.t = 0

    def step(self, scene, cameras, grads):
        _check_finite(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for cls, loc, owner, attr in param_slots(scene, cameras):
            g = grad_for(grads, cls, loc)
            lr = self.schedule.lr(cls, self.t - 1)
            if g is None or lr == 0.0:
                continue
            g = np.where(np.abs(g) < self.floor, 0.0, g)
            key = (cls, loc)
            m, v = self.state.get(key, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[key] = (m, v)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            _apply(owner, attr, cls, -lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return scene, cameras


# --- finite differences -----------------------------------------------------

@dataclass
class FDEntry:
    cls: str
    location: tuple
    index: tuple
    analytic: float
    numeric: float
    smooth: bool = True  # False: the stencil crossed a cut-off, clamp or early stop

    @property
    def rel_error(self):
        return abs(self.numeric - self.analytic) / max(abs(self.analytic), 1e-8)


@dataclass
class FDReport:
    entries: list

    def smooth_entries(self, cls=None):
        return [e for e in self.entries if e.smooth and (cls is None or e.cls == cls)]

    def max_error(self, cls=None):
        """Largest relative error over entries whose stencil stayed differentiable."""
        errs = [e.rel_error for e in self.smooth_entries(cls)]
        return max(errs) if errs else 0.0

    def classes(self):
        return sorted({e.cls for e in self.entries})

    def kinks(self, cls=None):
        return sum(1 for e in self.entries if not e.smooth and (cls is None or e.cls == cls))

    def summary(self):
        return {c: {"max_rel_error": self.max_error(c), "checked": len(self.smooth_entries(c)),
                    "non_differentiable": self.kinks(c)} for c in self.classes()}


def fd_check(scene, cameras, objective, classes=PARAM_CLASSES, per_class=6, h=1e-4, seed=0):
    """Compare analytic gradients with central differences (L(p+h) - L(p-h)) / 2h.

    ``objective(scene, cameras, grad)`` returns the loss, or (loss, ParamGrads) when
    ``grad`` is true. Entries are sampled per class with a seeded generator;
    quaternions are perturbed along their tangent directions.

    The renderer is only piecewise smooth: alpha' jumps at the 1/255 cut-off and
    at the 0.999 cap, and compositing stops once transmittance drops below 1e-4.
    Every render issued by the objective is fingerprinted with
    contribution_signature(); an entry whose +h or -h evaluation changes that
    structure is kept but marked ``smooth=False`` and left out of max_error().
    """
    rng = np.random.default_rng(seed)

    def evaluate(grad):
        with record_tapes() as tapes:
            result = objective(scene, cameras, grad)
        return result, tuple(contribution_signature(t) for t in tapes)

    (_, grads), base_sig = evaluate(True)
    slots = [s for s in param_slots(scene, cameras) if s[0] in classes]
    entries = []
    for cls in classes:
        mine = [s for s in slots if s[0] == cls and grad_for(grads, s[0], s[1]) is not None
                and grad_for(grads, s[0], s[1]).size]
        if not mine:
            continue
        picks = []
        for _ in range(per_class):
            slot = mine[rng.integers(len(mine))]
            g = grad_for(grads, slot[0], slot[1])
            picks.append((slot, np.unravel_index(rng.integers(g.size), g.shape)))
        for (c, loc, owner, attr), index in picks:
            g = grad_for(grads, c, loc)
            values = []
            smooth = True
            for sign in (1.0, -1.0):
                saved = getattr(owner, attr).copy()
                if c == "quat":
                    delta = np.zeros((len(saved), 3))
                    delta[index] = sign * h
                    owner.quat = retract_quat(saved, delta)
                else:
                    bumped = saved.copy()
                    bumped[index] += sign * h
                    setattr(owner, attr, bumped)
                value, sig = evaluate(False)
                values.append(value)
                smooth &= sig == base_sig
                setattr(owner, attr, saved)
            numeric = (values[0] - values[1]) / (2 * h)
            entries.append(FDEntry(c, loc, tuple(int(i) for i in index), float(g[index]), float(numeric), smooth))
    return FDReport(entries)
