"""Per-frame geometric stage: EWA projection, culling and tile binning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import GaussianSet, Gaussian3D, covariance_of
from .sh import evaluate_sh, view_dirs

NEAR_PLANE = 0.01
COV_FLOOR = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
TILE_SIZE = 16
GUARD_BAND = 0.3  # fraction of the image size a projected centre may lie outside it
# slack on the squared cut-off radius so binning never drops a pixel the compositor keeps
_R2_SLACK = 1e-9


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def to_camera(points, cam):
    return np.asarray(points, dtype=np.float64) @ cam.R.T + cam.t


def pinhole(p_cam, K):
    """Pixel coordinates of camera-space points (pixel centres sit at integer + 0.5)."""
    z = p_cam[..., 2]
    u = (K[0, 0] * p_cam[..., 0] + K[0, 1] * p_cam[..., 1]) / z + K[0, 2]
    v = K[1, 1] * p_cam[..., 1] / z + K[1, 2]
    return np.stack([u, v], axis=-1)


def pinhole_jacobian(p_cam, K):
    """d(u, v)/d(p_cam): shape (..., 2, 3)."""
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    J = np.zeros(p_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = K[0, 0] / z
    J[..., 0, 1] = K[0, 1] / z
    J[..., 0, 2] = -(K[0, 0] * x + K[0, 1] * y) / (z * z)
    J[..., 1, 1] = K[1, 1] / z
    J[..., 1, 2] = -K[1, 1] * y / (z * z)
    return J


def conic_of(cov2d, floor=COV_FLOOR):
    """Inverse of the floored 2D covariance, packed (a, b, c) for [[a, b], [b, c]]."""
    a = cov2d[..., 0, 0] + floor
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1] + floor
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=-1)


def cutoff_radius2(opacity):
    """Squared Mahalanobis radius beyond which alpha' < 1/255 (negative: never visible)."""
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(255.0 * np.asarray(opacity, dtype=np.float64))


def ellipse_hits_rect(mean, conic, r2, x0, x1, y0, y1):
    """Exact test whether {d : d^T Q d <= r2} around ``mean`` meets the box [x0,x1]x[y0,y1].

    All arguments broadcast. The quadratic is convex, so its minimum over the box is
    either zero (centre inside) or attained on one of the four edges.
    """
    mx, my = mean[..., 0], mean[..., 1]
    a, b, c = conic[..., 0], conic[..., 1], conic[..., 2]
    inside = (mx >= x0) & (mx <= x1) & (my >= y0) & (my <= y1)

    def q(dx, dy):
        return a * dx * dx + 2 * b * dx * dy + c * dy * dy

    best = np.full(np.broadcast(mx, x0).shape, np.inf)
    for X in (x0, x1):
        dx = X - mx
        dy = np.clip(-b * dx / c, y0 - my, y1 - my)
        best = np.minimum(best, q(dx, dy))
    for Y in (y0, y1):
        dy = Y - my
        dx = np.clip(-b * dy / a, x0 - mx, x1 - mx)
        best = np.minimum(best, q(dx, dy))
    return inside | (best <= r2)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    logits: np.ndarray
    flow: np.ndarray
    source: int = -1

    @property
    def conic(self):
        return conic_of(self.cov2d)


@dataclass
class Splats:
    """Screen-space Gaussians for one frame plus what the backward pass needs."""

    index: np.ndarray  # (M,) into the world Gaussian arrays
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2), before the floor
    conic: np.ndarray  # (M, 3)
    depth: np.ndarray  # (M,)
    opacity: np.ndarray  # (M,)
    color: np.ndarray  # (M, 3)
    logits: np.ndarray  # (M, S)
    probs: np.ndarray  # (M, S)
    radius2: np.ndarray  # (M,)
    source: np.ndarray  # (M,)
    # intermediates
    p_cam: np.ndarray
    T: np.ndarray  # J W, (M, 2, 3)
    cov3d: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    flow: np.ndarray | None = None  # (M, 2)
    flow_valid: np.ndarray | None = None

    def __len__(self):
        return len(self.index)

    def splat(self, i) -> Splat2D:
        flow = self.flow[i] if self.flow is not None else np.zeros(2)
        return Splat2D(self.mean2d[i], self.cov2d[i], float(self.depth[i]), float(self.opacity[i]),
                       self.color[i], self.logits[i], flow, int(self.source[i]))


def project(world: GaussianSet, cam, source=None, near=NEAR_PLANE, floor=COV_FLOOR):
    """Project world Gaussians into ``cam``; culled ones are dropped.

    Culled: camera-space depth <= near, opacity too low to ever reach 1/255, a
    projected centre outside the image widened by GUARD_BAND on every side (near,
    far off-axis points would otherwise smear across the frame), or an
    alpha >= 1/255 ellipse that misses every pixel centre of the image.
    """
    n = len(world)
    if source is None:
        source = np.full(n, -1)
    p_all = to_camera(world.mu, cam)
    opac_all = world.opacity
    r2_all = cutoff_radius2(opac_all)
    keep = (p_all[:, 2] > near) & (r2_all > 0)
    idx = np.nonzero(keep)[0]

    p = p_all[idx]
    cov3d = covariance_of(world.subset(idx))
    J = pinhole_jacobian(p, cam.K)
    T = J @ cam.R
    cov2d = T @ cov3d @ np.swapaxes(T, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    conic = conic_of(cov2d, floor)
    mean2d = pinhole(p, cam.K)
    r2 = r2_all[idx] + _R2_SLACK

    gx, gy = GUARD_BAND * cam.width, GUARD_BAND * cam.height
    in_band = ((mean2d[:, 0] >= -gx) & (mean2d[:, 0] <= cam.width + gx)
               & (mean2d[:, 1] >= -gy) & (mean2d[:, 1] <= cam.height + gy))
    on_screen = in_band & ellipse_hits_rect(mean2d, conic, r2, 0.5, cam.width - 0.5, 0.5, cam.height - 0.5)
    sel = np.nonzero(on_screen)[0]
    idx, p, cov3d, T, cov2d, conic, mean2d, r2 = (a[sel] for a in (idx, p, cov3d, T, cov2d, conic, mean2d, r2))

    dirs, dist = view_dirs(world.mu[idx], cam.center)
    color = evaluate_sh(world.sh[idx], dirs)
    logits = world.logits[idx]
    return Splats(index=idx, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=p[:, 2].copy(),
                  opacity=opac_all[idx], color=color, logits=logits, probs=softmax(logits),
                  radius2=r2, source=np.asarray(source)[idx], p_cam=p, T=T, cov3d=cov3d,
                  dirs=dirs, dist=dist[:, 0])


def project_gaussian(g: Gaussian3D, cam):
    """Single-Gaussian projection; returns None when culled."""
    s = project(GaussianSet.from_gaussians([g]), cam)
    if len(s) == 0:
        return None
    return s.splat(0)


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (tiles + 1,)
    indices: np.ndarray  # splat indices, grouped by tile, front-to-back

    @property
    def n_tiles(self):
        return self.tiles_x * self.tiles_y

    def bin(self, tile):
        return self.indices[self.offsets[tile]:self.offsets[tile + 1]]

    @property
    def bins(self):
        return [self.bin(k) for k in range(self.n_tiles)]

    def tile_rect(self, tile, width, height):
        """Pixel-centre hull (x0, x1, y0, y1) of a tile."""
        ty, tx = divmod(tile, self.tiles_x)
        x0 = tx * self.tile_size
        y0 = ty * self.tile_size
        x1 = min(x0 + self.tile_size, width)
        y1 = min(y0 + self.tile_size, height)
        return x0 + 0.5, x1 - 0.5, y0 + 0.5, y1 - 0.5


def bin_tiles(splats: Splats, width, height, tile_size=TILE_SIZE):
    """Assign splats to every tile their alpha >= 1/255 ellipse reaches, sorted by (depth, index)."""
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    m = len(splats)
    if m == 0:
        return TileGrid(tile_size, tiles_x, tiles_y, np.zeros(tiles_x * tiles_y + 1, dtype=np.int64),
                        np.zeros(0, dtype=np.int64))
    a, c = splats.conic[:, 0], splats.conic[:, 2]
    det = a * c - splats.conic[:, 1] ** 2
    # half-extents of the ellipse: r * sqrt(cov_xx), cov = conic^-1
    ex = np.sqrt(splats.radius2 * c / det)
    ey = np.sqrt(splats.radius2 * a / det)
    mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
    tx0 = np.clip(np.floor((mx - ex) / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mx + ex) / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((my - ey) / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((my + ey) / tile_size), 0, tiles_y - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    sid = np.repeat(np.arange(m), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[sid] + local % nx[sid]
    ty = ty0[sid] + local // nx[sid]

    x0 = tx * tile_size + 0.5
    x1 = np.minimum((tx + 1) * tile_size, width) - 0.5
    y0 = ty * tile_size + 0.5
    y1 = np.minimum((ty + 1) * tile_size, height) - 0.5
    hit = ellipse_hits_rect(splats.mean2d[sid], splats.conic[sid], splats.radius2[sid], x0, x1, y0, y1)
    sid, tile = sid[hit], (ty * tiles_x + tx)[hit]
    order = np.lexsort((sid, splats.depth[sid], tile))
    sid, tile = sid[order], tile[order]
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=offsets[1:])
    return TileGrid(tile_size, tiles_x, tiles_y, offsets, sid.astype(np.int64))
