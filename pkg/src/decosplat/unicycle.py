"""Motion losses and track rectification under the discrete unicycle model.

All three motion losses are weighted sums of absolute residuals, sum_i w_i |r_i|.
They share one residual/Jacobian builder over the flat parameter vector
p = [states (T*3), velocities ((T-1)*2)]; heights are not touched by these losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kinematics
from .geometry import yaw_matrix
from .scene import UnicycleTrack, pose_at, pose_state

MODES = ("none", "per_frame", "unicycle")
HUBER_DELTA = 0.1
SIGN_DEADZONE = 1e-9

# Mean translation / rotation perturbation of the 10% noise setting.
MEAN_TRANSLATION_NOISE = 0.5
MEAN_ROTATION_NOISE = np.deg2rad(5.0)


class UsageError(ValueError):
    pass


class TrackFitError(FloatingPointError):
    def __init__(self, iteration, message="motion loss became non-finite"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class NoisyBoxTrack:
    """Per-frame box observations (x, y, z, theta) with a validity flag."""

    timestamps: np.ndarray
    obs: np.ndarray  # (T, 4)
    valid: np.ndarray = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.obs = np.asarray(self.obs, dtype=np.float64).reshape(-1, 4)
        if self.valid is None:
            self.valid = np.ones(len(self.timestamps), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if not (len(self.obs) == len(self.valid) == len(self.timestamps)):
            raise ValueError("timestamps, obs and valid must have equal length")
        if self.valid.sum() < 2:
            raise ValueError("need at least 2 valid observations")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_track(cls, track, times=None):
        times = track.timestamps if times is None else np.asarray(times, dtype=np.float64)
        poses = np.array([pose_state(track, t) for t in times])
        return cls(times, poses[:, [0, 1, 2, 3]])


# --- noise model -------------------------------------------------------------

def noise_sigmas(scale):
    """Per-axis Gaussian sigmas (sigma_xy, sigma_theta) for a noise scale (0.1 = 10%).

    Chosen so the mean planar displacement is 0.5 m and the mean absolute yaw error
    5 degrees at 10%; both scale linearly with ``scale``.
    """
    f = scale / 0.1
    # E|N2(0, s^2 I)| = s sqrt(pi/2);  E|N(0, s^2)| = s sqrt(2/pi)
    return (f * MEAN_TRANSLATION_NOISE / np.sqrt(np.pi / 2), f * MEAN_ROTATION_NOISE * np.sqrt(np.pi / 2))


def corrupt_track(track, scale, rng, times=None, dropout=0.0):
    """Noisy boxes sampled around ``track`` at ``times`` (default: its timestamps)."""
    clean = NoisyBoxTrack.from_track(track, times)
    s_xy, s_th = noise_sigmas(scale)
    obs = clean.obs.copy()
    n = len(obs)
    obs[:, 0] += rng.normal(0.0, 1.0, n) * s_xy
    obs[:, 1] += rng.normal(0.0, 1.0, n) * s_xy
    obs[:, 3] += rng.normal(0.0, 1.0, n) * s_th
    valid = np.ones(n, dtype=bool)
    if dropout > 0:
        valid = rng.uniform(size=n) >= dropout
        keep = rng.choice(n, 2, replace=False)
        valid[keep] = True
    return NoisyBoxTrack(clean.timestamps, obs, valid)


# --- residual blocks ---------------------------------------------------------

def _n_params(T):
    return 3 * T + 2 * (T - 1)


def _aligned(track, obs):
    idx = {float(t): i for i, t in enumerate(track.timestamps)}
    pairs = [(idx[float(t)], j) for j, t in enumerate(obs.timestamps) if obs.valid[j] and float(t) in idx]
    if not pairs:
        raise UsageError("no valid observation shares a timestamp with the track")
    return pairs


def track_residuals(track, obs):
    """r = (x_t - x_hat_t, y_t - y_hat_t) over valid aligned frames."""
    T = len(track)
    pairs = np.array(_aligned(track, obs))
    t, j = pairs[:, 0], pairs[:, 1]
    r = (track.states[t, :2] - obs.obs[j, :2]).ravel()
    J = np.zeros((len(r), _n_params(T)))
    rows = np.arange(len(r))
    J[rows, (3 * t[:, None] + np.arange(2)).ravel()] = 1.0
    return r, J


TRANSITIONS = ("stored", "propagated")


def unicycle_residuals(track, transition="stored"):
    """Per-interval residuals of the unicycle transition.

    With ``transition="stored"`` the heading terms use the stored theta_{t+1}:
    r_x = x_{t+1} - x_t - v/w (sin th_{t+1} - sin th_t)
    r_y = y_{t+1} - y_t + v/w (cos th_{t+1} - cos th_t)
    r_th = th_{t+1} - th_t - w
    With ``"propagated"`` theta_{t+1} inside r_x, r_y is replaced by th_t + w, so
    (r_x, r_y) is the position error of one exact unicycle step. Both agree
    whenever r_th = 0. The sine/cosine differences are formed as products
    (2 cos(m) sin(d/2)) to avoid cancellation. Below kinematics.OMEGA_EPS the
    second-order expansion of the one-step displacement in w replaces the ratio,
    as in pose propagation.
    """
    if transition not in TRANSITIONS:
        raise UsageError(f"unknown transition {transition!r}")
    T = len(track)
    n = T - 1
    P = _n_params(T)
    st, vel = track.states, track.velocities
    th0, th1 = st[:-1, 2], st[1:, 2]
    v, w = vel[:, 0], vel[:, 1]

    # one exact step: displacement and its partials w.r.t. (th0, v, w); no th1 dependence
    fx, fy, _ = kinematics.step(0.0, 0.0, th0, v, w)
    jx, jy = kinematics.step_jacobian(th0, v, w)
    zero = np.zeros(n)
    gx = np.stack([jx[:, 0], zero, jx[:, 1], jx[:, 2]], axis=-1)
    gy = np.stack([jy[:, 0], zero, jy[:, 1], jy[:, 2]], axis=-1)
    if transition == "stored":
        ratio_form = np.abs(w) >= kinematics.OMEGA_EPS
        ws = np.where(ratio_form, w, 1.0)
        m = 0.5 * (th0 + th1)
        ratio = 2.0 * np.sin(0.5 * (th1 - th0)) / ws
        sx = v * np.cos(m) * ratio
        sy = v * np.sin(m) * ratio
        hx = np.stack([-v * np.cos(th0) / ws, v * np.cos(th1) / ws, np.cos(m) * ratio, -sx / ws], axis=-1)
        hy = np.stack([-v * np.sin(th0) / ws, v * np.sin(th1) / ws, np.sin(m) * ratio, -sy / ws], axis=-1)
        fx = np.where(ratio_form, sx, fx)
        fy = np.where(ratio_form, sy, fy)
        gx = np.where(ratio_form[:, None], hx, gx)
        gy = np.where(ratio_form[:, None], hy, gy)

    r = np.empty((n, 3))
    r[:, 0] = st[1:, 0] - st[:-1, 0] - fx
    r[:, 1] = st[1:, 1] - st[:-1, 1] - fy
    r[:, 2] = th1 - th0 - w
    J = np.zeros((n, 3, P))
    t = np.arange(n)
    for k, g in ((0, gx), (1, gy)):
        J[t, k, 3 * (t + 1) + k] += 1.0
        J[t, k, 3 * t + k] -= 1.0
        J[t, k, 3 * t + 2] -= g[:, 0]
        J[t, k, 3 * (t + 1) + 2] -= g[:, 1]
        J[t, k, 3 * T + 2 * t] -= g[:, 2]
        J[t, k, 3 * T + 2 * t + 1] -= g[:, 3]
    J[t, 2, 3 * (t + 1) + 2] += 1.0
    J[t, 2, 3 * t + 2] -= 1.0
    J[t, 2, 3 * T + 2 * t + 1] -= 1.0
    return r.ravel(), J.reshape(3 * n, P)


def _second_difference(values, columns, P):
    n = len(values) - 2
    if n <= 0:
        return np.zeros(0), np.zeros((0, P))
    r = values[2:] + values[:-2] - 2.0 * values[1:-1]
    J = np.zeros((n, P))
    rows = np.arange(n)
    J[rows, columns[2:]] += 1.0
    J[rows, columns[:-2]] += 1.0
    J[rows, columns[1:-1]] -= 2.0
    return r, J


def smooth_residuals(track, use_omega=False):
    """Second differences of v and of theta (or of omega when ``use_omega``)."""
    T = len(track)
    P = _n_params(T)
    iv = np.arange(T - 1)
    r_v, J_v = _second_difference(track.velocities[:, 0], 3 * T + 2 * iv, P)
    if use_omega:
        r_a, J_a = _second_difference(track.velocities[:, 1], 3 * T + 2 * iv + 1, P)
    else:
        r_a, J_a = _second_difference(track.states[:, 2], 3 * np.arange(T) + 2, P)
    return np.concatenate([r_v, r_a]), np.concatenate([J_v, J_a])


def _sign(r):
    return np.where(np.abs(r) < SIGN_DEADZONE, 0.0, np.sign(r))


def _unflatten(track, g):
    T = len(track)
    return (g[:3 * T].reshape(T, 3), np.zeros(T), g[3 * T:].reshape(T - 1, 2))


def _abs_loss(r, J, track, grad):
    value = float(np.abs(r).sum())
    if not grad:
        return value
    return value, _unflatten(track, J.T @ _sign(r))


def loss_track(track, obs, grad=False):
    """sum_t |x_t - x_hat_t| + |y_t - y_hat_t| over valid frames.

    With ``grad`` returns (value, (d_states, d_heights, d_velocities)); the
    subgradient at an exactly-zero residual is taken as zero.
    """
    r, J = track_residuals(track, obs)
    return _abs_loss(r, J, track, grad)


def loss_unicycle(track, grad=False, transition="stored"):
    r, J = unicycle_residuals(track, transition)
    return _abs_loss(r, J, track, grad)


def loss_smooth(track, use_omega=False, grad=False):
    if len(track) < 3:
        raise UsageError("smoothness needs at least 3 states")
    r, J = smooth_residuals(track, use_omega)
    return _abs_loss(r, J, track, grad)


# --- fitting -----------------------------------------------------------------

@dataclass
class FitResult:
    track: UnicycleTrack
    history: list = field(default_factory=list)  # motion loss per accepted step
    iterations: int = 0
    converged: bool = False


def _params(track):
    return np.concatenate([track.states.ravel(), track.velocities.ravel()])


def _set_params(track, p):
    T = len(track)
    track.states = p[:3 * T].reshape(T, 3).copy()
    track.velocities = p[3 * T:].reshape(T - 1, 2).copy()


def initial_track(obs, horizon=1.0):
    """Track initialised from the observations.

    Invalid frames are filled by linear interpolation of valid neighbours. Yaw rates
    are finite differences of theta; forward speeds are the least-squares fit of the
    observed displacement along the mid-interval heading.
    """
    ts = obs.timestamps
    v = obs.valid
    filled = np.stack([np.interp(ts, ts[v], obs.obs[v, k]) for k in range(4)], axis=-1)
    states = filled[:, [0, 1, 3]]
    heights = filled[:, 2]
    d = np.diff(states, axis=0)
    omega = d[:, 2]
    mid = states[:-1, 2] + 0.5 * omega
    speed = (d[:, 0] * np.cos(mid) + d[:, 1] * np.sin(mid)) / kinematics._sinc(0.5 * omega)
    return UnicycleTrack(ts, states, heights, np.stack([speed, omega], axis=-1), horizon=horizon)


class MotionObjective:
    """lambda_t L_t + lambda_uni L_uni + lambda_reg L_reg, restricted per fitting mode."""

    def __init__(self, obs, lambda_t=0.1, lambda_uni=0.1, lambda_reg=0.1, use_omega=False, motion=True,
                 transition="stored"):
        self.obs = obs
        self.weights = (lambda_t, lambda_uni if motion else 0.0, lambda_reg if motion else 0.0)
        self.use_omega = use_omega
        self.transition = transition

    def residuals(self, track):
        lt, lu, lr = self.weights
        blocks = [(lt, *track_residuals(track, self.obs))]
        if lu > 0:
            blocks.append((lu, *unicycle_residuals(track, self.transition)))
        if lr > 0 and len(track) >= 3:
            blocks.append((lr, *smooth_residuals(track, self.use_omega)))
        r = np.concatenate([b[1] for b in blocks])
        J = np.concatenate([b[2] for b in blocks])
        w = np.concatenate([np.full(len(b[1]), b[0]) for b in blocks])
        return r, J, w

    def value(self, track):
        r, _, w = self.residuals(track)
        return float(np.sum(w * np.abs(r)))

    def value_and_grad(self, track):
        r, J, w = self.residuals(track)
        return float(np.sum(w * np.abs(r))), J.T @ (w * _sign(r))

    def breakdown(self, track):
        out = {"L_t": loss_track(track, self.obs)}
        if len(track) >= 2:
            out["L_uni"] = loss_unicycle(track, transition=self.transition)
        if len(track) >= 3:
            out["L_reg"] = loss_smooth(track, self.use_omega)
        return out


def _fit_gd(track, objective, free, iterations, lr, decay, coupling):
    """Adam on the motion objective (plus an optional coupled loss)."""
    p = _params(track)
    m = np.zeros_like(p)
    s = np.zeros_like(p)
    b1, b2, eps = 0.9, 0.999, 1e-15
    history = []
    best = (np.inf, p.copy())
    for it in range(iterations):
        _set_params(track, p)
        value, g = objective.value_and_grad(track)
        if coupling is not None:
            c_val, (ds, dh, dv) = coupling(track)
            value += c_val
            g = g + np.concatenate([ds.ravel(), dv.ravel()])
            track.heights = track.heights - lr * decay ** it * dh
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            raise TrackFitError(it)
        history.append(value)
        if value < best[0]:
            best = (value, p.copy())
        g = g * free
        if not np.any(g) and not np.any(m):
            # stationary point of the (sub)gradient: nothing left to move
            break
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        step = lr * decay ** it * (m / (1 - b1 ** (it + 1))) / (np.sqrt(s / (1 - b2 ** (it + 1))) + eps)
        p = p - step
    _set_params(track, p)
    final = objective.value(track) + (coupling(track)[0] if coupling is not None else 0.0)
    history.append(final)
    if final > best[0]:
        _set_params(track, best[1])
    return history


def _huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r / delta, a - 0.5 * delta)


def huber_value(objective, track, delta):
    r, _, w = objective.residuals(track)
    return float(np.sum(w * _huber(r, delta)))


def _fit_gauss_newton(track, objective, free, iterations, delta, tol=1e-12, continuation=(1.0, 0.3)):
    """Levenberg-Marquardt on the Huber-smoothed motion loss (IRLS weights).

    Each |r| is replaced by its Huber surrogate (quadratic below ``delta``). A
    step is accepted only when it lowers that surrogate, so the loss being
    optimised never increases. ``continuation`` lists larger deltas solved first
    to steer away from the kinks of the absolute-value loss. The returned
    history holds the surrogate at the final delta after every accepted step.
    """
    p = _params(track)
    idx = np.nonzero(free)[0]
    history = []
    converged = False
    stages = [d for d in continuation if d > delta] + [delta]
    budget = iterations
    for stage, d in enumerate(stages):
        final = stage == len(stages) - 1
        mu = 1e-3
        _set_params(track, p)
        current = huber_value(objective, track, d)
        if final:
            history.append(current)
        for it in range(budget if final else max(1, budget // (2 * len(stages)))):
            r, J, w = objective.residuals(track)
            a = np.abs(r)
            irls = w * np.where(a <= d, 1.0 / d, 1.0 / np.maximum(a, 1e-300))
            Jf = J[:, idx]
            H = Jf.T @ (irls[:, None] * Jf)
            g = Jf.T @ (irls * r)
            accepted = False
            gain = 0.0
            while mu < 1e12:
                A = H + mu * np.diag(np.diag(H) + 1e-9)
                try:
                    dp = -np.linalg.solve(A, g)
                except np.linalg.LinAlgError:
                    mu *= 10
                    continue
                trial = p.copy()
                trial[idx] += dp
                _set_params(track, trial)
                value = huber_value(objective, track, d)
                if not np.isfinite(value):
                    raise TrackFitError(it)
                if value < current:
                    accepted = True
                    gain = current - value
                    p, current = trial, value
                    mu = max(mu / 3, 1e-9)
                    break
                mu *= 4
            _set_params(track, p)
            if accepted and final:
                history.append(current)
            if not accepted or gain < tol * max(1.0, current):
                converged = final
                break
            if final:
                budget -= 1
    return history, converged


def fit_track(obs, mode="unicycle", lambda_t=0.1, lambda_uni=0.1, lambda_reg=0.1, use_omega=False,
              solver="gd", iterations=3000, lr=0.02, decay=0.999, coupling=None, delta=HUBER_DELTA,
              horizon=1.0, transition="propagated"):
    """Rectify noisy boxes into a track.

    mode "none" copies the observations (linear interpolation between frames);
    "per_frame" optimises each state against L_t and the optional ``coupling``
    only, also interpolated linearly; "unicycle" jointly fits states and
    velocities under all three motion losses and propagates poses with the
    unicycle model. ``coupling(track)`` returns (loss, (d_states, d_heights,
    d_velocities)) and ties the fit to e.g. a photometric loss; it is only
    supported by the gradient-descent solver.

    ``transition`` selects the form of the unicycle residual (see
    unicycle_residuals). Fitting defaults to "propagated": with "stored" the
    ratio v/w multiplies a heading change that need not equal w, so shrinking w
    rescales the predicted displacement at the small price of r_th and the fit
    absorbs noise through it.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    if solver not in ("gd", "gauss_newton"):
        raise UsageError(f"unknown solver {solver!r}")
    track = initial_track(obs, horizon)
    if mode == "none":
        track.interpolation = "linear"
        return FitResult(track, [], 0, True)
    motion = mode == "unicycle"
    if not motion:
        track.interpolation = "linear"
    objective = MotionObjective(obs, lambda_t, lambda_uni, lambda_reg, use_omega, motion, transition)
    T = len(track)
    free = np.ones(_n_params(T))
    if not motion:
        free[3 * T:] = 0.0
    if solver == "gauss_newton":
        if coupling is not None:
            raise UsageError("coupled fitting needs the gradient-descent solver")
        history, converged = _fit_gauss_newton(track, objective, free, iterations, delta)
        return FitResult(track, history, len(history) - 1, converged)
    history = _fit_gd(track, objective, free, iterations, lr, decay, coupling)
    return FitResult(track, history, len(history) - 1, True)


# --- pose errors -------------------------------------------------------------

def rotation_error(R_est, R_gt):
    """arccos((tr(R_est R_gt^T) - 1) / 2) with the argument clamped to [-1, 1]."""
    c = (np.trace(R_est @ R_gt.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_error(pose_est, pose_gt):
    (R1, t1), (R2, t2) = pose_est, pose_gt
    return rotation_error(R1, R2), float(np.linalg.norm(np.asarray(t1) - np.asarray(t2)))


def pose_errors(track, gt_track, times=None):
    """Per-frame (e_R, e_t) of ``track`` against ``gt_track`` and their means."""
    times = gt_track.timestamps if times is None else np.asarray(times, dtype=np.float64)
    e_R = np.empty(len(times))
    e_t = np.empty(len(times))
    for i, t in enumerate(times):
        e_R[i], e_t[i] = pose_error(pose_at(track, t), pose_at(gt_track, t))
    return {"times": times, "e_R": e_R, "e_t": e_t, "mean_e_R": float(e_R.mean()), "mean_e_t": float(e_t.mean())}


def transform_track_poses(poses, yaw, translation):
    """Apply a world-frame yaw rotation + translation to a list of (R, t) poses."""
    Rw = yaw_matrix(yaw)
    return [(Rw @ R, Rw @ t + translation) for R, t in poses]
