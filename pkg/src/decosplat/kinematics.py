"""Discrete unicycle transition and its partial derivatives.

The closed form x' = x + v/w (sin(th + w) - sin th) is evaluated through the
equivalent product v * cos(th + w/2) * sinc(w/2), which has no cancellation for
small w. Below ``OMEGA_EPS`` the second-order Taylor expansion in w is used.
"""

import numpy as np

OMEGA_EPS = 1e-6


def _sinc(u):
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0 - u * u / 6.0, np.sin(safe) / safe)


def _dsinc(u):
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < 1e-2
    safe = np.where(small, 1.0, u)
    series = -u / 3.0 + u ** 3 / 30.0 - u ** 5 / 840.0
    return np.where(small, series, (safe * np.cos(safe) - np.sin(safe)) / (safe * safe))


def step(x, y, theta, v, omega):
    """Advance (x, y, theta) by one interval with forward velocity v and yaw rate omega."""
    x, y, theta, v, omega = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, theta, v, omega)))
    taylor = np.abs(omega) < OMEGA_EPS
    mid = theta + 0.5 * omega
    sc = _sinc(0.5 * omega)
    dx = np.where(taylor,
                  v * (np.cos(theta) - 0.5 * omega * np.sin(theta) - omega ** 2 / 6.0 * np.cos(theta)),
                  v * np.cos(mid) * sc)
    dy = np.where(taylor,
                  v * (np.sin(theta) + 0.5 * omega * np.cos(theta) - omega ** 2 / 6.0 * np.sin(theta)),
                  v * np.sin(mid) * sc)
    return x + dx, y + dy, theta + omega


def step_jacobian(theta, v, omega):
    """Partials of (dx, dy) w.r.t. (theta, v, omega); x, y, theta pass through with unit slope.

    Returns two arrays of shape (..., 3) ordered (theta, v, omega).
    """
    theta, v, omega = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (theta, v, omega)))
    taylor = np.abs(omega) < OMEGA_EPS
    c, s = np.cos(theta), np.sin(theta)
    # Taylor branch
    tx = c - 0.5 * omega * s - omega ** 2 / 6.0 * c
    ty = s + 0.5 * omega * c - omega ** 2 / 6.0 * s
    tx_th = -s - 0.5 * omega * c + omega ** 2 / 6.0 * s
    ty_th = c - 0.5 * omega * s - omega ** 2 / 6.0 * c
    tx_w = -0.5 * s - omega / 3.0 * c
    ty_w = 0.5 * c - omega / 3.0 * s
    # closed-form branch
    mid = theta + 0.5 * omega
    sc = _sinc(0.5 * omega)
    dsc = 0.5 * _dsinc(0.5 * omega)
    ex = np.cos(mid) * sc
    ey = np.sin(mid) * sc
    ex_th = -np.sin(mid) * sc
    ey_th = np.cos(mid) * sc
    ex_w = -0.5 * np.sin(mid) * sc + np.cos(mid) * dsc
    ey_w = 0.5 * np.cos(mid) * sc + np.sin(mid) * dsc

    jx = np.stack([v * np.where(taylor, tx_th, ex_th),
                   np.where(taylor, tx, ex),
                   v * np.where(taylor, tx_w, ex_w)], axis=-1)
    jy = np.stack([v * np.where(taylor, ty_th, ey_th),
                   np.where(taylor, ty, ey),
                   v * np.where(taylor, ty_w, ey_w)], axis=-1)
    return jx, jy


def rollout(x0, y0, theta0, v, omega):
    """States generated recursively from an initial state and per-interval velocities."""
    v = np.asarray(v, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    states = np.empty((len(v) + 1, 3))
    states[0] = (x0, y0, theta0)
    for k in range(len(v)):
        states[k + 1] = step(*states[k], v[k], omega[k])
    return states
