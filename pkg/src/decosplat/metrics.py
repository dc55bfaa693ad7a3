"""Evaluation metrics: PSNR, SSIM, mIoU, chamfer accuracy/completeness, masked depth error."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim
from .scene import sigmoid


class UsageError(ValueError):
    pass


def metric_psnr(img, ref, peak=1.0):
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise UsageError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def metric_ssim(img, ref):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    return ssim(ref, img)


def metric_miou(pred, gt, class_count, ignore=-1):
    """Per-class IoU and their mean over classes that occur in either map.

    Pixels whose ground-truth label equals ``ignore`` are not evaluated.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise UsageError("prediction and ground truth differ in size")
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    if np.any((pred < 0) | (pred >= class_count) | (gt < 0) | (gt >= class_count)):
        raise UsageError(f"labels must lie in [0, {class_count})")
    conf = np.bincount(gt * class_count + pred, minlength=class_count ** 2).reshape(class_count, class_count)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    iou = np.full(class_count, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    miou = float(np.nanmean(iou)) if present.any() else float("nan")
    return {"per_class": iou, "miou": miou}


def metric_chamfer(pred, gt):
    """(accuracy, completeness): mean nearest-neighbour distance pred -> gt and gt -> pred."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise UsageError("chamfer needs non-empty point sets")
    acc = float(cKDTree(gt).query(pred)[0].mean())
    comp = float(cKDTree(pred).query(gt)[0].mean())
    return acc, comp


def metric_depth(rendered, gt, valid=None):
    """Root-mean-square depth error over pixels with a ground-truth value and a finite render."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.isfinite(gt) & np.isfinite(rendered)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise UsageError("no valid depth pixels")
    return float(np.sqrt(np.mean((rendered[mask] - gt[mask]) ** 2)))


def extract_semantic_pointcloud(gaussians, threshold=0.5):
    """Centres and argmax labels of Gaussians with sigmoid(opacity) >= threshold."""
    keep = sigmoid(gaussians.opacity_logit) >= threshold
    return gaussians.mu[keep].copy(), np.argmax(gaussians.logits[keep], axis=1)


def semantic_pointcloud_miou(pred_points, pred_labels, gt_points, gt_labels, class_count):
    """3D mIoU: every predicted point is scored against the label of its nearest ground-truth point."""
    if len(pred_points) == 0 or len(gt_points) == 0:
        raise UsageError("3D mIoU needs non-empty point clouds")
    _, nn = cKDTree(gt_points).query(pred_points)
    return metric_miou(pred_labels, np.asarray(gt_labels)[nn], class_count)
