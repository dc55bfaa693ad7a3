import numpy as np
import pytest

from decosplat.geometry import normalize_quat
from decosplat.harness.synth import FORWARD
from decosplat.scene import (DynamicObject, FrameCamera, GaussianSet, SceneGraph, UnicycleTrack,
                             sh_coeff_count)


def make_camera(width=32, height=24, f=30.0, center=(0.0, 0.0, 1.5), R=FORWARD, timestamp=0.0):
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    R = np.asarray(R, dtype=np.float64)
    return FrameCamera(K, R, -R @ np.asarray(center, dtype=np.float64), timestamp, width, height)


def random_gaussians(rng, n, sh_degree=1, class_count=3, depth=(3.0, 8.0), spread=0.6,
                     scale=(0.08, 0.4), opacity=(-1.0, 2.0)):
    """Gaussians in front of a FORWARD camera at the origin (x is depth)."""
    K = sh_coeff_count(sh_degree)
    d = rng.uniform(*depth, n)
    mu = np.stack([d, rng.uniform(-spread, spread, n) * d, 1.5 + rng.uniform(-spread, spread, n) * d * 0.7], 1)
    sh = rng.normal(0.0, 0.3, (n, K, 3))
    sh[:, 0] += 1.2
    return GaussianSet(mu, normalize_quat(rng.normal(size=(n, 4))), np.log(rng.uniform(*scale, (n, 3))),
                       rng.uniform(*opacity, n), sh, rng.normal(0.0, 1.0, (n, class_count)))


def random_track(rng, n=6, x0=5.0, y0=0.0):
    v = np.stack([rng.uniform(0.2, 0.5, n - 1), rng.uniform(-0.2, 0.2, n - 1)], 1)
    return UnicycleTrack.from_velocities(np.arange(n, dtype=float), x0, y0, rng.uniform(-0.3, 0.3), v,
                                         np.full(n, 1.2))


def random_scene(rng, n_static=14, n_object=6, sh_degree=1, class_count=3, background=(0.2, 0.3, 0.4)):
    static = random_gaussians(rng, n_static, sh_degree, class_count)
    objects = []
    if n_object:
        canonical = random_gaussians(rng, n_object, sh_degree, class_count, depth=(-0.4, 0.4), spread=0.0)
        canonical.mu = rng.uniform(-0.5, 0.5, (n_object, 3))
        objects.append(DynamicObject(1, canonical, random_track(rng)))
    return SceneGraph(static, objects, class_count, background)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_problem(seed, n_static=14, n_object=6, width=40, height=30):
    """A randomised 20-splat scene, two exposed cameras and a smooth loss on every buffer.

    Returns (scene, cameras, objective) in the form fd_check expects.
    """
    from decosplat.diffsplat import backward
    from decosplat.render import render

    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n_static, n_object)
    cams = []
    for k, ts in enumerate((1.5, 2.5)):
        cam = make_camera(width, height, f=28.0, center=(0.0, 0.1 * k, 1.4), timestamp=ts)
        cam.A = np.eye(3) + rng.normal(0.0, 0.05, (3, 3))
        cam.b = rng.normal(0.0, 0.02, 3)
        cams.append(cam)
    S = scene.class_count
    tgt = rng.uniform(0, 1, (height, width, 3))
    tsem = rng.dirichlet(np.ones(S), (height, width))
    tdep = rng.uniform(2, 6, (height, width))
    tflow = rng.normal(0, 1, (height, width, 2))
    n = width * height

    def objective(scene, cams, grad):
        buf, tape = render(scene, cams[0], cams[1])
        d = np.where(np.isfinite(buf.depth), buf.depth, 0.0)
        r = {"color_exposed": buf.color_exposed - tgt, "semantic": buf.semantic - tsem,
             "semantic_2dnorm": buf.semantic_2dnorm - tsem, "depth": 0.1 * (d - tdep), "flow": 0.1 * (buf.flow - tflow)}
        L = sum(float((v ** 2).sum()) for v in r.values()) / n
        if not grad:
            return L
        g = {k: 2 * v / n for k, v in r.items()}
        g["depth"] = g["depth"] * 0.1
        g["flow"] = g["flow"] * 0.1
        return L, backward(tape, g, 0)

    return scene, cams, objective


ACCEPTANCE = {}  # criterion number -> (verdict, detail), filled by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
