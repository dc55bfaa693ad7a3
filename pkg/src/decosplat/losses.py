"""Training losses on rendered buffers, each with its gradient w.r.t. the rendering."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CE_FLOOR = 1e-8
# |residual| below this counts as zero in L1 subgradients, so round-off at an exact
# fit does not turn into a full-size sign step
L1_DEADZONE = 1e-9


def l1_sign(r):
    return np.where(np.abs(r) < L1_DEADZONE, 0.0, np.sign(r))


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_S: float = 0.01
    lambda_F: float = 0.01
    lambda_t: float = 0.1
    lambda_uni: float = 0.1
    lambda_reg: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img):
    """Separable Gaussian filter over the two spatial axes with zero padding."""
    w = gaussian_window()
    out = correlate1d(img, w, axis=0, mode="constant")
    return correlate1d(out, w, axis=1, mode="constant")


def ssim_map(x, y, data_range=1.0):
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim(x, y, data_range=1.0, grad=False):
    """Mean SSIM over pixels and channels; optionally d SSIM / d y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sxx + syy + C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not grad:
        return value
    n = smap.size
    # partials of the map w.r.t. (my, syy, sxy), each divided by n for the mean
    d_my = (2 * mx * A2 / (B1 * B2) - smap * 2 * my / B1) / n
    d_syy = (-smap / B2) / n
    d_sxy = (2 * A1 / (B1 * B2)) / n
    # syy = blur(y^2) - my^2 ; sxy = blur(xy) - mx my
    a = d_my - 2 * my * d_syy - mx * d_sxy
    g = _blur(a) + 2 * y * _blur(d_syy) + x * _blur(d_sxy)
    return value, g


def loss_image(rendered, target, lambda_ssim=0.2, grad=False):
    """(1 - lambda) * mean |target - rendered| + lambda * (1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    if lambda_ssim > 0:
        s = ssim(target, rendered, grad=grad)
        s, g_s = s if grad else (s, None)
    else:
        s, g_s = 1.0, None
    value = (1 - lambda_ssim) * l1 + lambda_ssim * (1 - s)
    if not grad:
        return value
    g = (1 - lambda_ssim) * l1_sign(diff) / diff.size
    if g_s is not None:
        g = g - lambda_ssim * g_s
    return value, g


def loss_semantic(rendered, labels, grad=False):
    """Cross-entropy of rendered class distributions against integer labels (-1 = unsupervised)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    labels = np.asarray(labels)
    S = rendered.shape[-1]
    if np.any(labels >= S):
        raise ValueError(f"label index >= class count {S}")
    mask = labels >= 0
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(rendered)) if grad else 0.0
    lab = np.where(mask, labels, 0)
    p = np.take_along_axis(rendered, lab[..., None], axis=-1)[..., 0]
    pc = np.maximum(p, CE_FLOOR)
    value = float(-np.log(pc)[mask].sum() / n)
    if not grad:
        return value
    g = np.zeros_like(rendered)
    gp = np.where(mask & (p > CE_FLOOR), -1.0 / (pc * n), 0.0)
    np.put_along_axis(g, lab[..., None], gp[..., None], axis=-1)
    return value, g


def loss_flow(rendered, target, valid=None, grad=False):
    """Mean over valid pixels of |du| + |dv|."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    if valid is None:
        valid = np.ones(rendered.shape[:-1], dtype=bool)
    n = int(valid.sum())
    diff = rendered - target
    if n == 0:
        return (0.0, np.zeros_like(rendered)) if grad else 0.0
    value = float(np.abs(diff).sum(axis=-1)[valid].sum() / n)
    if not grad:
        return value
    g = np.where(valid[..., None], l1_sign(diff) / n, 0.0)
    return value, g


def total_loss(components, weights: LossWeights):
    """Weighted sum of named components (I, S, F, t, uni, reg) and the weighted breakdown."""
    w = {"I": 1.0, "S": weights.lambda_S, "F": weights.lambda_F,
         "t": weights.lambda_t, "uni": weights.lambda_uni, "reg": weights.lambda_reg}
    breakdown = {k: w[k] * float(v) for k, v in components.items()}
    return sum(breakdown.values()), breakdown
