"""Forward render of a decomposed scene for one camera, recording a tape for backward()."""

from __future__ import annotations

import contextvars
import hashlib
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import _kernels

from .compositor import MODALITIES, RenderBuffers, apply_exposure, composite, splat_flows
from .projection import TILE_SIZE, Splats, TileGrid, bin_tiles, project
from .scene import SceneGraph, WorldInstance, instantiate_world


@dataclass
class RenderTape:
    scene: SceneGraph
    cam: object
    flow_cam: object
    world: WorldInstance
    splats: Splats
    grid: TileGrid
    composite: dict
    flow: dict | None
    buffers: RenderBuffers
    modalities: tuple


_RECORDER = contextvars.ContextVar("decosplat_tape_recorder", default=None)


@contextmanager
def record_tapes():
    """Collect the tape of every render() issued inside the block."""
    tapes = []
    token = _RECORDER.set(tapes)
    try:
        yield tapes
    finally:
        _RECORDER.reset(token)


def contribution_signature(tape):
    """Digest of the discrete structure of a render.

    Covers the surviving splats, flow validity and, per pixel, how many splats were
    visited, passed the 1/255 cut-off and hit the alpha cap. Two renders with equal
    signatures differ only smoothly in their parameters.
    """
    s, g, cam = tape.splats, tape.grid, tape.cam
    counts = _kernels.contribution_counts(g.offsets, g.indices, g.tiles_x, g.tile_size,
                                          cam.width, cam.height, s.mean2d, s.conic, s.opacity)
    h = hashlib.sha1()
    h.update(s.index.tobytes())
    if s.flow_valid is not None:
        h.update(s.flow_valid.tobytes())
    h.update(np.ascontiguousarray(counts).tobytes())
    return h.hexdigest()


def render(scene, cam, flow_cam=None, modalities=MODALITIES, tile_size=TILE_SIZE, timings=None):
    """Render every requested modality of ``scene`` seen from ``cam``.

    Flow is rendered towards ``flow_cam`` and silently dropped when it is None.
    ``timings`` (a dict) receives wall-clock seconds per stage when given.
    """
    clock = time.perf_counter()
    modalities = tuple(m for m in modalities if m != "flow" or flow_cam is not None)
    world = instantiate_world(scene, cam.timestamp)
    splats = project(world.gaussians, cam, world.source)
    flow = None
    if "flow" in modalities:
        flow = splat_flows(scene, world, splats, cam, flow_cam)
    grid = bin_tiles(splats, cam.width, cam.height, tile_size)
    t_prep = time.perf_counter()
    buf, ctape = composite(grid, splats, scene.background, cam.width, cam.height, modalities)
    t_comp = time.perf_counter()
    buf.color_exposed = apply_exposure(buf.color, cam.A, cam.b)
    t_exp = time.perf_counter()
    if timings is not None:
        timings["prepare"] = timings.get("prepare", 0.0) + t_prep - clock
        timings["composite"] = timings.get("composite", 0.0) + t_comp - t_prep
        timings["affine"] = timings.get("affine", 0.0) + t_exp - t_comp
    tape = RenderTape(scene, cam, flow_cam, world, splats, grid, ctape, flow, buf, modalities)
    recorder = _RECORDER.get()
    if recorder is not None:
        recorder.append(tape)
    return buf, tape
