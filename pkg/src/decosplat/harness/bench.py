"""Timing harness: incremental per-stage breakdown and tiled against brute-force compositing."""

from __future__ import annotations

import time

import numpy as np

from ..compositor import apply_exposure, composite, composite_bruteforce, splat_flows
from ..geometry import normalize_quat
from ..projection import TILE_SIZE, bin_tiles, project
from ..render import render
from ..scene import FrameCamera, GaussianSet, SceneGraph, instantiate_world, sh_coeff_count
from .synth import FORWARD

STAGES = ("preparation", "rgb", "affine", "semantic", "flow")


def bench_scene(n, width, height, rng, class_count=5, sh_degree=1):
    """``n`` random Gaussians filling the view of bench_cameras()[0]."""
    K = sh_coeff_count(sh_degree)
    depth = rng.uniform(4.0, 30.0, n)
    half_w = depth * 0.5 * width / (0.9 * width)
    half_h = depth * 0.5 * height / (0.9 * width)
    mu = np.stack([depth, rng.uniform(-1, 1, n) * half_w, 1.5 + rng.uniform(-1, 1, n) * half_h], axis=1)
    gs = GaussianSet(mu, normalize_quat(rng.normal(size=(n, 4))), np.log(rng.uniform(0.03, 0.25, (n, 3))),
                     rng.normal(0.0, 1.5, n), rng.normal(0.0, 0.4, (n, K, 3)), rng.normal(0.0, 1.0, (n, class_count)))
    return SceneGraph(gs, [], class_count, (0.5, 0.6, 0.7))


def bench_cameras(width, height):
    f = 0.9 * width
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for t, x in enumerate((0.0, 0.3)):
        c = np.array([x, 0.0, 1.5])
        cams.append(FrameCamera(K, FORWARD, -FORWARD @ c, float(t), width, height))
    return cams


def _best(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def stage_breakdown(scene, cam, flow_cam, repeats=5, tile_size=TILE_SIZE):
    """Cumulative seconds per frame as components are switched on one after another.

    Each figure is the best of ``repeats`` runs. The semantic and flow channels
    share the compositing pass with colour, so their increments are measured as
    the growth of that pass (and, for flow, of the preparation that computes
    per-splat motion).
    """
    world = instantiate_world(scene, cam.timestamp)

    def prepare(flow):
        splats = project(world.gaussians, cam, world.source)
        if flow:
            splat_flows(scene, world, splats, cam, flow_cam)
        return splats, bin_tiles(splats, cam.width, cam.height, tile_size)

    t_pre, (splats, grid) = _best(lambda: prepare(False), repeats)
    t_rgb, (buf, _) = _best(lambda: composite(grid, splats, scene.background, cam.width, cam.height, ("rgb",)),
                            repeats)
    t_aff, _ = _best(lambda: apply_exposure(buf.color, cam.A, cam.b), repeats)
    t_sem, _ = _best(lambda: composite(grid, splats, scene.background, cam.width, cam.height, ("rgb", "sem")),
                     repeats)
    t_pre_f, (splats_f, grid_f) = _best(lambda: prepare(True), repeats)
    t_flow, _ = _best(lambda: composite(grid_f, splats_f, scene.background, cam.width, cam.height,
                                        ("rgb", "sem", "flow")), repeats)
    increments = {
        "preparation": t_pre,
        "rgb": t_rgb,
        "affine": t_aff,
        "semantic": max(t_sem - t_rgb, 0.0),
        "flow": max(t_flow - t_sem, 0.0) + max(t_pre_f - t_pre, 0.0),
    }
    cumulative = dict(zip(STAGES, np.cumsum([increments[s] for s in STAGES]).tolist()))
    return {"increments": increments, "cumulative": cumulative, "fps": 1.0 / cumulative["flow"],
            "splats": int(len(splats))}


def compare_bruteforce(scene, cam, repeats=1, modalities=("rgb", "sem", "depth")):
    """Wall time of tiled and brute-force compositing of the same splats, and their largest difference."""
    splats = project(instantiate_world(scene, cam.timestamp).gaussians, cam)
    grid = bin_tiles(splats, cam.width, cam.height)
    t_tiled, (tiled, _) = _best(lambda: composite(grid, splats, scene.background, cam.width, cam.height,
                                                  modalities), max(repeats, 2))
    t_brute, brute = _best(lambda: composite_bruteforce(splats, scene.background, cam.width, cam.height,
                                                        modalities), repeats)
    diff = 0.0
    for name in ("color", "accum_alpha", "semantic", "depth"):
        a, b = getattr(tiled, name), getattr(brute, name)
        if a is None:
            continue
        both = np.isfinite(a) & np.isfinite(b)
        if not np.array_equal(np.isfinite(a), np.isfinite(b)):
            diff = np.inf
        diff = max(diff, float(np.abs(a[both] - b[both]).max(initial=0.0)))
    return {"splats": int(len(splats)), "tiled_seconds": t_tiled, "brute_seconds": t_brute,
            "speedup": t_brute / t_tiled, "max_abs_diff": diff}


def rgb_isolation(scene, cam, flow_cam):
    """True when switching on semantic and flow channels leaves the colour bits untouched."""
    a, _ = render(scene, cam, None, modalities=("rgb",))
    b, _ = render(scene, cam, flow_cam, modalities=("rgb", "sem", "flow"))
    return bool(np.array_equal(a.color, b.color))


def run_bench(n_splats=20000, width=256, height=256, seed=0, repeats=5, brute=True):
    rng = np.random.default_rng(seed)
    scene = bench_scene(n_splats, width, height, rng)
    cam, flow_cam = bench_cameras(width, height)
    render(scene, cam, flow_cam)  # compile kernels before timing
    report = {"n_gaussians": n_splats, "width": width, "height": height,
              "stages": stage_breakdown(scene, cam, flow_cam, repeats),
              "rgb_bits_unchanged": rgb_isolation(scene, cam, flow_cam)}
    if brute:
        report["bruteforce"] = compare_bruteforce(scene, cam)
    return report
