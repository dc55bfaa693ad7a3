import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gaussians
from decosplat.losses import LossWeights, loss_flow, loss_image, loss_semantic, ssim, total_loss
from decosplat.metrics import (UsageError, extract_semantic_pointcloud, metric_chamfer, metric_depth, metric_miou,
                               metric_psnr, metric_ssim, semantic_pointcloud_miou)
from decosplat.scene import sigmoid


def ssim_oracle(x, y):
    """Windowed SSIM by explicit loops: 11x11 Gaussian (sigma 1.5), zero padding, K1 0.01, K2 0.03."""
    r = np.arange(11) - 5
    w1 = np.exp(-r ** 2 / (2 * 1.5 ** 2))
    w = np.outer(w1, w1) / w1.sum() ** 2
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    H, W = x.shape
    pad = lambda a: np.pad(a, 5)
    X, Y = pad(x), pad(y)
    out = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            a, b = X[i:i + 11, j:j + 11], Y[i:i + 11, j:j + 11]
            mx, my = (w * a).sum(), (w * b).sum()
            vx = (w * a * a).sum() - mx * mx
            vy = (w * b * b).sum() - my * my
            cxy = (w * a * b).sum() - mx * my
            out[i, j] = (2 * mx * my + C1) * (2 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return out.mean()


# --- image loss -------------------------------------------------------------------

def test_identical_images_have_zero_image_loss():
    x = np.random.default_rng(0).uniform(size=(20, 24, 3))
    assert abs(loss_image(x, x)) < 1e-15
    assert abs(loss_image(x, x, lambda_ssim=1.0)) < 1e-15


def test_pure_l1_of_ones_against_zeros():
    assert loss_image(np.ones((8, 8, 3)), np.zeros((8, 8, 3)), lambda_ssim=0.0) == 1.0


def test_image_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_image(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_l1_part_is_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 9, 9, 3))
    assert loss_image(a, b, lambda_ssim=0.0) == loss_image(b, a, lambda_ssim=0.0)


@pytest.mark.parametrize("shape", [(13, 17), (12, 15, 3)])
def test_ssim_matches_loop_oracle(shape):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=shape)
    y = np.clip(x + rng.normal(0, 0.2, shape), 0, 1)
    if len(shape) == 2:
        expected = ssim_oracle(x, y)
    else:
        expected = np.mean([ssim_oracle(x[..., c], y[..., c]) for c in range(3)])
    assert np.isclose(ssim(x, y), expected, atol=1e-12)
    assert np.isclose(metric_ssim(y, x), expected, atol=1e-12)


def test_image_loss_gradient_matches_differences():
    rng = np.random.default_rng(3)
    t = rng.uniform(size=(14, 12, 3))
    x = rng.uniform(size=(14, 12, 3))
    _, g = loss_image(x, t, 0.2, grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (5, 6, 1), (13, 11, 2), (7, 2, 0)]:
        e = np.zeros_like(x)
        e[idx] = h
        num = (loss_image(x + e, t, 0.2) - loss_image(x - e, t, 0.2)) / (2 * h)
        assert np.isclose(num, g[idx], rtol=1e-5, atol=1e-10)


# --- semantic loss ------------------------------------------------------------------

def test_certain_true_class_has_zero_cross_entropy():
    p = np.zeros((2, 2, 3))
    p[..., 1] = 1.0
    assert loss_semantic(p, np.ones((2, 2), dtype=int)) == 0.0


def test_half_probability_gives_ln2():
    p = np.full((3, 3, 2), 0.5)
    assert np.isclose(loss_semantic(p, np.zeros((3, 3), dtype=int)), np.log(2), atol=1e-15)


def test_uniform_over_19_classes_gives_ln19():
    p = np.full((2, 5, 19), 1 / 19)
    assert np.isclose(loss_semantic(p, np.full((2, 5), 7)), np.log(19), atol=1e-12)


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        loss_semantic(np.full((1, 1, 3), 1 / 3), np.array([[3]]))


def test_unsupervised_pixels_are_skipped():
    p = np.full((1, 2, 2), 0.5)
    p[0, 1] = (0.0, 1.0)
    assert np.isclose(loss_semantic(p, np.array([[0, -1]])), np.log(2))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 0.999), st.floats(1e-6, 0.999))
def test_cross_entropy_falls_as_true_class_probability_rises(a, b):
    lo, hi = sorted((a, b))

    def ce(q):
        return loss_semantic(np.array([[[q, 1 - q]]]), np.array([[0]]))

    assert ce(hi) <= ce(lo)


# --- flow loss ----------------------------------------------------------------------

def test_flow_offset_1_2_gives_3():
    f = np.random.default_rng(0).normal(size=(5, 6, 2))
    assert loss_flow(f, f) == 0.0
    assert np.isclose(loss_flow(f + (1.0, 2.0), f), 3.0, atol=1e-12)


def test_flow_mask_averages_over_valid_half():
    target = np.zeros((4, 4, 2))
    rendered = np.zeros((4, 4, 2))
    rendered[:2] = (1.0, 1.0)
    rendered[2:] = (100.0, 0.0)
    valid = np.zeros((4, 4), dtype=bool)
    valid[:2] = True
    assert loss_flow(rendered, target, valid) == 2.0


# --- total loss ---------------------------------------------------------------------

def test_total_loss_examples():
    w = LossWeights()
    assert total_loss({k: 0.0 for k in ("I", "S", "F", "t", "uni", "reg")}, w)[0] == 0.0
    assert total_loss({"I": 1.0, "S": 0.0}, w)[0] == 1.0
    value, breakdown = total_loss({"I": 0.0, "S": 1.0, "F": 0.0}, w)
    assert np.isclose(value, 0.01) and breakdown["S"] == 0.01


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_S=-0.1)


# --- image metrics ------------------------------------------------------------------

def test_identical_images_metrics():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert metric_psnr(x, x) == float("inf")
    assert np.isclose(metric_ssim(x, x), 1.0, atol=1e-12)


def test_psnr_of_uniform_error():
    x = np.zeros((4, 4))
    assert np.isclose(metric_psnr(x + 0.1, x), 20.0)


def test_depth_error_is_masked_rms():
    gt = np.array([[1.0, np.nan], [3.0, 4.0]])
    r = np.array([[2.0, 100.0], [3.0, 2.0]])
    assert np.isclose(metric_depth(r, gt), np.sqrt((1 + 0 + 4) / 3))
    assert np.isclose(metric_depth(r, gt, np.array([[True, True], [False, False]])), 1.0)
    with pytest.raises(UsageError):
        metric_depth(r, np.full((2, 2), np.nan))


# --- mIoU ---------------------------------------------------------------------------

def test_inverted_two_class_labels_give_zero_miou():
    gt = np.array([[0, 1, 1], [0, 0, 1]])
    assert metric_miou(1 - gt, gt, 2)["miou"] == 0.0


def test_miou_hand_example():
    gt = np.array([0, 0, 1, 1, 2])
    pred = np.array([0, 1, 1, 1, 2])
    r = metric_miou(pred, gt, 3)
    assert np.allclose(r["per_class"], [0.5, 2 / 3, 1.0])
    assert np.isclose(r["miou"], (0.5 + 2 / 3 + 1.0) / 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_miou_permutation_invariant_and_one_iff_equal(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, 60)
    pred = np.where(rng.uniform(size=60) < 0.3, rng.integers(0, 4, 60), gt)
    perm = rng.permutation(60)
    a, b = metric_miou(pred, gt, 4)["miou"], metric_miou(pred[perm], gt[perm], 4)["miou"]
    assert a == b
    assert (a == 1.0) == bool(np.array_equal(pred, gt))


def test_miou_labels_out_of_range():
    with pytest.raises(UsageError):
        metric_miou(np.array([0, 5]), np.array([0, 1]), 3)


# --- chamfer ------------------------------------------------------------------------

def test_identical_clouds_have_zero_chamfer():
    p = np.random.default_rng(0).normal(size=(50, 3))
    assert metric_chamfer(p, p) == (0.0, 0.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(60, 3)) + 0.3
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    acc, comp = metric_chamfer(a, b)
    assert np.isclose(acc, d.min(1).mean(), atol=1e-12)
    assert np.isclose(comp, d.min(0).mean(), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_accuracy_is_reverse_completeness(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(30, 3))
    assert metric_chamfer(a, b)[0] == metric_chamfer(b, a)[1]


def test_empty_cloud_rejected():
    with pytest.raises(UsageError):
        metric_chamfer(np.zeros((0, 3)), np.zeros((3, 3)))


# --- semantic point clouds -------------------------------------------------------------

def test_extraction_thresholds():
    gs = random_gaussians(np.random.default_rng(0), 40, opacity=(-4.0, 4.0))
    pts, labels = extract_semantic_pointcloud(gs, 0.0)
    assert len(pts) == 40 and np.array_equal(labels, gs.logits.argmax(1))
    assert len(extract_semantic_pointcloud(gs, 1.0)[0]) == 0


def test_extraction_matches_brute_force_filter():
    gs = random_gaussians(np.random.default_rng(1), 60, opacity=(-3.0, 3.0))
    pts, labels = extract_semantic_pointcloud(gs, 0.5)
    expected = [(gs.mu[i], int(np.argmax(gs.logits[i]))) for i in range(60) if sigmoid(gs.opacity_logit[i]) >= 0.5]
    assert len(pts) == len(expected)
    for (p, l), (q, m) in zip(zip(pts, labels), expected):
        assert np.array_equal(p, q) and l == m


def test_pointcloud_miou_labels_from_nearest_ground_truth():
    gt_pts = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    gt_lab = np.array([0, 1])
    pred = np.array([[0.1, 0, 0], [9.0, 0, 0], [1.0, 0, 0]])
    r = semantic_pointcloud_miou(pred, np.array([0, 1, 1]), gt_pts, gt_lab, 2)
    assert np.allclose(r["per_class"], [0.5, 0.5])
