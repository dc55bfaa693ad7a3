"""Experiment drivers for the ablation tables: each returns a JSON-ready report."""

from __future__ import annotations

import time

import numpy as np

from ..metrics import (extract_semantic_pointcloud, metric_chamfer, metric_psnr, metric_ssim,
                       semantic_pointcloud_miou)
from ..render import render
from ..scene import DynamicObject, FrameCamera, GaussianSet, SceneGraph
from ..unicycle import corrupt_track, fit_track, pose_errors
from .config import ExperimentConfig
from .synth import OBJECT_SIZE, VEHICLE, _box_surface, _surface, gen_curved_track, generate
from .train import train

ABLATIONS = ("dynamic_noise", "static_losses", "softmax3d", "exposure")
NOISE_SCALES = (0.05, 0.1, 0.2)
TRACK_MODES = ("none", "per_frame", "unicycle")


class AblationError(ValueError):
    pass


# Scenario settings each ablation runs with unless a config file is given; sized so
# ten seeds finish within minutes on one CPU core.
_SMALL = {"n_frames": 16, "width": 96, "height": 64, "scene.n_objects": 0}
PRESETS = {
    "dynamic_noise": {"n_frames": 60, "width": 96, "height": 64, "track.lambda_uni": 1.0, "track.lambda_reg": 3.0},
    "static_losses": {**_SMALL, "train.init_ray_noise": 0.1, "noise.exposure_gain": 0.15,
                      "noise.exposure_bias": 0.05, "noise.label_flip": 0.1},
    "softmax3d": {**_SMALL, "scene.floaters": 100, "train.iterations": 800, "train.random_logits": True,
                  "train.use_flow": False, "noise.label_flip": 0.1},
    "exposure": {**_SMALL, "noise.exposure_gain": 0.15, "noise.exposure_bias": 0.05, "train.use_flow": False},
}


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "values": a.tolist()}


# --- dynamic objects ----------------------------------------------------------

def overhead_camera(track, width, height, margin=4.0):
    """Downward-looking camera framing the whole trajectory (world x to the image left, y up the image)."""
    xy = track.states[:, :2]
    lo, hi = xy.min(0) - margin, xy.max(0) + margin
    centre = (lo + hi) / 2
    span_u, span_v = hi[1] - lo[1], hi[0] - lo[0]  # image u runs along -y, v along -x
    altitude = 30.0
    f = min(width * altitude / span_u, height * altitude / span_v)
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    R = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    c = np.array([centre[0], centre[1], altitude])
    return K, R, -R @ c


def vehicle_gaussians(rng, n, sh_degree=0, class_count=5):
    half = np.array(OBJECT_SIZE) / 2
    pts, normals = _box_surface(np.zeros(3), half, n, rng)
    area = 2 * (OBJECT_SIZE[0] * OBJECT_SIZE[2] + OBJECT_SIZE[1] * OBJECT_SIZE[2]) + OBJECT_SIZE[0] * OBJECT_SIZE[1]
    gs, _ = _surface(pts, normals, VEHICLE, 0.8 * np.sqrt(area / n), rng, sh_degree, class_count)
    return gs


def _render_track(canonical, track, cams, background):
    scene = SceneGraph(GaussianSet.empty(canonical.sh_degree, canonical.class_count),
                       [DynamicObject(1, canonical, track)], canonical.class_count, background)
    return [np.clip(render(scene, c, None, modalities=("rgb",))[0].color, 0.0, 1.0) for c in cams]


def run_dynamic_noise(config, seeds=range(10), scales=NOISE_SCALES, extra_rows=True):
    """Track rectification at several box-noise scales: e_t / e_R on held-out frames plus PSNR / SSIM.

    Every seed draws a curved ground-truth trajectory, observes it with noisy
    boxes on the even frames and fits it in each mode. Errors are measured on the
    odd frames between observations, which no box covers. PSNR / SSIM compare renders of a
    vehicle placed with the fitted and the true track from an overhead camera.
    """
    tk = config.track
    rows = {m: dict(lambda_t=tk.lambda_t, lambda_uni=tk.lambda_uni, lambda_reg=tk.lambda_reg,
                    transition=tk.transition) for m in TRACK_MODES}
    if extra_rows:
        rows["unicycle_uniform_weights"] = dict(lambda_t=0.1, lambda_uni=0.1, lambda_reg=0.1, transition=tk.transition)
        rows["unicycle_stored_transition"] = dict(lambda_t=tk.lambda_t, lambda_uni=tk.lambda_uni,
                                                  lambda_reg=tk.lambda_reg, transition="stored")
    n = max(config.n_frames, 5)
    cells = {(r, s): {"e_t": [], "e_R": [], "e_t_train": [], "psnr": [], "ssim": []} for r in rows for s in scales}
    tracks = {}
    start = time.perf_counter()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        gt = gen_curved_track(rng, n)
        canonical = vehicle_gaussians(rng, config.scene.n_per_object, 0, config.scene.class_count)
        K, R, t = overhead_camera(gt, config.width, config.height)
        train_times = gt.timestamps[::2]
        test_times = gt.timestamps[1:-1:2]  # interior only: never extrapolated past the last box
        cams = [FrameCamera(K, R, t, ts, config.width, config.height) for ts in test_times]
        reference = _render_track(canonical, gt, cams, config.scene.background)
        for s in scales:
            obs = corrupt_track(gt, s, np.random.default_rng([seed, int(round(s * 1000))]), train_times)
            for name, kw in rows.items():
                mode = name if name in TRACK_MODES else "unicycle"
                fit = fit_track(obs, mode, solver=tk.solver, iterations=tk.iterations, lr=tk.lr,
                                use_omega=tk.use_omega, **kw).track
                err = pose_errors(fit, gt, test_times)
                cell = cells[(name, s)]
                cell["e_t"].append(err["mean_e_t"])
                cell["e_R"].append(err["mean_e_R"])
                cell["e_t_train"].append(pose_errors(fit, gt, train_times)["mean_e_t"])
                imgs = _render_track(canonical, fit, cams, config.scene.background)
                cell["psnr"].append(float(np.mean([metric_psnr(a, b) for a, b in zip(imgs, reference)])))
                cell["ssim"].append(float(np.mean([metric_ssim(a, b) for a, b in zip(imgs, reference)])))
                if seed == min(seeds):
                    tracks[f"{name}@{s}"] = fit
    table = []
    for (name, s), cell in cells.items():
        row = {"mode": name, "scale": s}
        for k, v in cell.items():
            row[k] = float(np.mean(v)) if not np.all(np.isinf(v)) else float("inf")
        row["e_t_values"] = cell["e_t"]
        table.append(row)
    return {"ablation": "dynamic_noise", "seeds": list(seeds), "scales": list(scales), "frames": n,
            "table": table, "seconds": time.perf_counter() - start, "_tracks": tracks}


# --- static scenes ------------------------------------------------------------

STATIC_ROWS = {
    "full": {},
    "no_semantic": {"train.use_semantic": False},
    "no_flow": {"train.use_flow": False},
    "no_affine": {"train.use_affine": False},
}


def _paired_runs(config, seeds, rows, measure):
    """Train every row on the same generated data per seed; ``measure(result, gt)`` -> dict."""
    per_row = {r: [] for r in rows}
    start = time.perf_counter()
    artefacts = {}
    for seed in seeds:
        cfg = config.replace(seed=int(seed))
        gt, cams, pgt = generate(cfg)
        for name, changes in rows.items():
            res = train(gt, cams, pgt, cfg.replace(**changes))
            per_row[name].append(measure(res, gt))
            if seed == seeds[0]:
                artefacts[name] = res
    return per_row, artefacts, time.perf_counter() - start


def _summarise(per_row):
    table = []
    for name, runs in per_row.items():
        row = {"row": name}
        for key in runs[0]:
            row[key] = _mean_std([r[key] for r in runs])
        table.append(row)
    return table


def _wins(per_row, a, b, key, lower_is_better, margin=0.0):
    x = np.array([r[key] for r in per_row[a]])
    y = np.array([r[key] for r in per_row[b]])
    return int(np.sum(x < y - margin) if lower_is_better else np.sum(x > y + margin))


def run_static_losses(config, seeds=range(10), rows=None):
    """Toggle the semantic loss, the flow loss and the exposure affine on a static scene."""
    rows = {r: STATIC_ROWS[r] for r in (rows or STATIC_ROWS)}
    cfg = config.replace(**{"scene.n_objects": 0})
    seeds = list(seeds)

    def measure(res, gt):
        m = res.metrics
        return {"psnr": m["psnr"], "ssim": m["ssim"], "depth_rmse": m["depth_rmse"], "miou_2d": m["miou_2d"]}

    per_row, artefacts, secs = _paired_runs(cfg, seeds, rows, measure)
    report = {"ablation": "static_losses", "seeds": seeds, "table": _summarise(per_row), "seconds": secs,
              "_results": artefacts}
    if "full" in per_row and "no_flow" in per_row:
        report["flow_depth_wins"] = _wins(per_row, "full", "no_flow", "depth_rmse", True)
    return report


def pointcloud_metrics(scene, gt, threshold=0.5):
    pts, labels = extract_semantic_pointcloud(scene.static, threshold)
    out = {"points": int(len(pts))}
    if len(pts) == 0:
        return {**out, "miou_3d": 0.0, "accuracy": float("inf"), "completeness": float("inf")}
    out["miou_3d"] = semantic_pointcloud_miou(pts, labels, gt.scene.static.mu, gt.labels_static,
                                              gt.scene.class_count)["miou"]
    out["accuracy"], out["completeness"] = metric_chamfer(pts, gt.scene.static.mu)
    return out


def run_softmax3d(config, seeds=range(10)):
    """Per-Gaussian softmax (blend probabilities) against blending logits then normalising per pixel.

    Both runs start from the same floater-laden initialisation with random logits;
    the extracted point cloud (opacity >= 0.5) is scored by 3D mIoU and chamfer.
    """
    seeds = list(seeds)
    rows = {"softmax_3d": {"train.softmax": "3d"}, "softmax_2d": {"train.softmax": "2d"}}

    def measure(res, gt):
        return {**pointcloud_metrics(res.scene, gt), "miou_2d": res.metrics["miou_2d"], "psnr": res.metrics["psnr"]}

    per_row, artefacts, secs = _paired_runs(config.replace(**{"scene.n_objects": 0}), seeds, rows, measure)
    return {"ablation": "softmax3d", "seeds": seeds, "table": _summarise(per_row), "seconds": secs,
            "miou_wins": _wins(per_row, "softmax_3d", "softmax_2d", "miou_3d", False),
            "accuracy_wins": _wins(per_row, "softmax_3d", "softmax_2d", "accuracy", True),
            "joint_wins": int(sum(a["miou_3d"] > b["miou_3d"] and a["accuracy"] < b["accuracy"]
                                  for a, b in zip(per_row["softmax_3d"], per_row["softmax_2d"]))),
            "_results": artefacts}


def run_exposure(config, seeds=range(10)):
    """Held-out PSNR with and without the per-frame affine on exposure-corrupted targets."""
    seeds = list(seeds)
    rows = {"affine": {"train.use_affine": True}, "no_affine": {"train.use_affine": False}}

    def measure(res, gt):
        return {"psnr": res.metrics["psnr"], "ssim": res.metrics["ssim"]}

    per_row, artefacts, secs = _paired_runs(config.replace(**{"scene.n_objects": 0}), seeds, rows, measure)
    gains = [a["psnr"] - b["psnr"] for a, b in zip(per_row["affine"], per_row["no_affine"])]
    return {"ablation": "exposure", "seeds": seeds, "table": _summarise(per_row), "seconds": secs,
            "psnr_gain": _mean_std(gains), "wins_1db": int(sum(g >= 1.0 for g in gains)), "_results": artefacts}


def ablation_config(name, base=None):
    """``base`` (default: ExperimentConfig()) with the ablation's preset applied."""
    if name not in PRESETS:
        raise AblationError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return (base or ExperimentConfig()).replace(**PRESETS[name])


def run_ablation(name, config, seeds=range(10), **kwargs):
    drivers = {"dynamic_noise": run_dynamic_noise, "static_losses": run_static_losses,
               "softmax3d": run_softmax3d, "exposure": run_exposure}
    if name not in drivers:
        raise AblationError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return drivers[name](config, seeds=seeds, **kwargs)
