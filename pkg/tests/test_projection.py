import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from conftest import make_camera, random_gaussians
from decosplat.projection import (ALPHA_MIN, COV_FLOOR, GUARD_BAND, bin_tiles, conic_of, cutoff_radius2,
                                  ellipse_hits_rect, project, project_gaussian)
from decosplat.scene import FrameCamera, GaussianSet, covariance_of, logit
from decosplat.sh import C0, evaluate_sh, sh_basis, sh_basis_grad


def cam_identity(f=1.0, width=4, height=4, cx=0.0, cy=0.0):
    K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    return FrameCamera(K, np.eye(3), np.zeros(3), 0.0, width, height)


def single(mu, scale=1.0, opacity=0.99, quat=(1.0, 0.0, 0.0, 0.0)):
    return GaussianSet(np.array([mu], dtype=float), np.array([quat]), np.log(np.full((1, 3), scale)),
                       [float(logit(opacity))], np.zeros((1, 1, 3)), np.zeros((1, 2)))


# --- EWA projection -----------------------------------------------------------

def test_projection_on_axis():
    s = project(single((0.0, 0.0, 5.0)), cam_identity())
    assert len(s) == 1
    assert np.allclose(s.mean2d[0], (0.0, 0.0), atol=1e-15)
    assert np.allclose(s.cov2d[0], np.diag([1 / 25, 1 / 25]), atol=1e-15)
    assert np.isclose(s.depth[0], 5.0)


def test_behind_camera_is_culled():
    assert len(project(single((0.0, 0.0, -1.0)), cam_identity())) == 0
    assert project_gaussian(single((0.0, 0.0, -1.0))[0], cam_identity()) is None


def test_doubling_focal_length():
    g = single((0.4, 0.1, 5.0))
    a = project(g, cam_identity(f=1.0))
    b = project(g, cam_identity(f=2.0))
    assert np.isclose(b.mean2d[0, 0], 2 * a.mean2d[0, 0], rtol=1e-14)
    assert np.isclose(b.cov2d[0, 0, 0], 4 * a.cov2d[0, 0, 0], rtol=1e-14)


def test_mean_is_pinhole_projection():
    rng = np.random.default_rng(2)
    cam = make_camera(64, 48, f=50.0)
    gs = random_gaussians(rng, 50)
    s = project(gs, cam)
    p = gs.mu[s.index] @ cam.R.T + cam.t
    u = cam.K[0, 0] * p[:, 0] / p[:, 2] + cam.K[0, 2]
    v = cam.K[1, 1] * p[:, 1] / p[:, 2] + cam.K[1, 2]
    assert np.allclose(s.mean2d, np.stack([u, v], 1), atol=1e-12)


def test_cov2d_matches_numerical_jacobian():
    """J from central differences of the pinhole map, then J W Sigma W^T J^T."""
    rng = np.random.default_rng(5)
    cam = make_camera(64, 48, f=50.0)
    gs = random_gaussians(rng, 10)
    s = project(gs, cam)

    def proj(x):
        p = cam.R @ x + cam.t
        return np.array([cam.K[0, 0] * p[0] / p[2] + cam.K[0, 2], cam.K[1, 1] * p[1] / p[2] + cam.K[1, 2]])

    for k, i in enumerate(s.index):
        mu = gs.mu[i]
        J = np.stack([(proj(mu + e * 1e-6) - proj(mu - e * 1e-6)) / 2e-6 for e in np.eye(3)], axis=1)
        expected = J @ covariance_of(gs[i]) @ J.T
        assert np.allclose(s.cov2d[k], expected, rtol=1e-6, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 50.0), st.floats(1e-4, 50.0), st.floats(-0.99, 0.99))
def test_floored_covariance(a, c, rho):
    cov = np.array([[a, rho * np.sqrt(a * c)], [rho * np.sqrt(a * c), c]])
    conic = conic_of(cov)
    Q = np.array([[conic[0], conic[1]], [conic[1], conic[2]]])
    floored = np.linalg.inv(Q)
    assert np.allclose(floored, cov + COV_FLOOR * np.eye(2), rtol=1e-9, atol=1e-12)
    ev0, ev1 = np.linalg.eigvalsh(cov), np.linalg.eigvalsh(floored)
    assert np.all(ev1 >= ev0 - 1e-12)
    assert np.all(np.linalg.eigvalsh(floored) > 0)


def test_well_conditioned_cov2d_is_stored_unchanged():
    rng = np.random.default_rng(9)
    cam = make_camera(64, 48, f=50.0)
    gs = random_gaussians(rng, 20)
    s = project(gs, cam)
    unfloored = s.T @ covariance_of(gs)[s.index] @ np.swapaxes(s.T, -1, -2)
    assert np.allclose(s.cov2d, unfloored, atol=1e-12)


def test_guard_band_culls_far_off_screen_centres():
    cam = make_camera(64, 48, f=50.0, center=(0.0, 0.0, 0.0))
    # camera looks along +x; a huge splat whose centre projects far to the left of the image
    far_left = (2.0, 2.0 * (32 + 64 * (GUARD_BAND + 0.2)) / 50.0, 0.0)
    big = single(far_left, scale=5.0)
    assert len(project(big, cam)) == 0
    near_edge = (2.0, 2.0 * (32 + 64 * (GUARD_BAND - 0.1)) / 50.0, 0.0)
    assert len(project(single(near_edge, scale=5.0), cam)) == 1


def test_invisible_opacity_is_culled():
    assert cutoff_radius2(ALPHA_MIN * 0.5) < 0
    cam = make_camera(64, 48)
    assert len(project(single((5.0, 0.0, 1.5), opacity=ALPHA_MIN * 0.5), cam)) == 0


# --- spherical harmonics --------------------------------------------------------

def real_sh_oracle(dirs, degree):
    """Real SH from scipy's complex harmonics (Condon-Shortley phase), ordered m = -l..l."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    polar = np.arccos(np.clip(z, -1, 1))
    azimuth = np.arctan2(y, x)
    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), polar, azimuth)
            if m < 0:
                cols.append(np.sqrt(2) * Y.imag)
            elif m == 0:
                cols.append(Y.real)
            else:
                cols.append(np.sqrt(2) * Y.real)
    return np.stack(cols, axis=-1)


def test_degree_zero_is_constant():
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    coeffs = np.tile(np.array([[[0.3, -1.0, 2.0]]]), (20, 1, 1))
    assert np.allclose(evaluate_sh(coeffs, dirs), 0.28209479 * np.array([0.3, -1.0, 2.0]), atol=1e-8)
    assert np.isclose(C0, 0.28209479177387814)


def test_degree_one_z_coefficient_is_odd():
    coeffs = np.zeros((1, 4, 3))
    coeffs[0, 2] = (1.0, 0.5, -2.0)  # the Y_1^0 (z) slot
    up = evaluate_sh(coeffs, np.array([[0.0, 0.0, 1.0]]))
    down = evaluate_sh(coeffs, np.array([[0.0, 0.0, -1.0]]))
    assert np.allclose(up, -down) and np.all(np.abs(up) > 0)


def test_degree_one_seed_seven_against_scipy():
    coeffs = np.random.default_rng(7).normal(size=(1, 4, 3))
    d = np.array([[1.0, 0.0, 0.0]])
    expected = np.einsum("nk,nkc->nc", real_sh_oracle(d, 1), coeffs)
    assert np.allclose(evaluate_sh(coeffs, d), expected, atol=1e-12)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_basis_matches_scipy(degree):
    rng = np.random.default_rng(degree)
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.allclose(sh_basis(d, degree), real_sh_oracle(d, degree), atol=1e-12)


def test_basis_gradient_matches_differences():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(30, 3))
    g = sh_basis_grad(d, 3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        num = (sh_basis(d + e, 3) - sh_basis(d - e, 3)) / 2e-6
        assert np.allclose(g[..., k], num, atol=1e-7)


def test_degree_above_three_rejected():
    with pytest.raises(ValueError):
        sh_basis(np.array([[0.0, 0.0, 1.0]]), 4)


# --- tile binning ------------------------------------------------------------------

def splat_at(u, v, cam, sigma_px, opacity=0.9):
    """A round Gaussian placed so that it projects to pixel position (u, v) with about ``sigma_px`` spread."""
    depth = 10.0
    f = cam.K[0, 0]
    y = -(u - cam.K[0, 2]) * depth / f
    z = 1.5 - (v - cam.K[1, 2]) * depth / f
    return single((depth, y, z), scale=sigma_px * depth / f, opacity=opacity)


def test_centered_small_splat_lands_in_one_bin():
    cam = make_camera(64, 64, f=60.0)
    s = project(splat_at(24.0, 40.0, cam, 0.8), cam)
    grid = bin_tiles(s, 64, 64)
    nonempty = [k for k in range(grid.n_tiles) if len(grid.bin(k))]
    assert nonempty == [2 * grid.tiles_x + 1]


def test_corner_splat_lands_in_four_bins():
    cam = make_camera(64, 64, f=60.0)
    s = project(splat_at(32.0, 32.0, cam, 1.5), cam)
    grid = bin_tiles(s, 64, 64)
    nonempty = sorted(k for k in range(grid.n_tiles) if len(grid.bin(k)))
    tx = grid.tiles_x
    assert nonempty == sorted([1 * tx + 1, 1 * tx + 2, 2 * tx + 1, 2 * tx + 2])


def test_bins_match_brute_force_intersection():
    rng = np.random.default_rng(11)
    cam = make_camera(96, 80, f=70.0)
    gs = random_gaussians(rng, 1000, scale=(0.01, 0.5))
    s = project(gs, cam)
    grid = bin_tiles(s, cam.width, cam.height)
    for k in range(grid.n_tiles):
        x0, x1, y0, y1 = grid.tile_rect(k, cam.width, cam.height)
        expected = set(np.nonzero(ellipse_hits_rect(s.mean2d, s.conic, s.radius2, x0, x1, y0, y1))[0])
        # independent check of the same set: dense sampling of the tile's pixel centres
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        px = np.stack([xs.ravel(), ys.ravel()], 1)
        d = px[None] - s.mean2d[:, None]
        q = (s.conic[:, None, 0] * d[..., 0] ** 2 + 2 * s.conic[:, None, 1] * d[..., 0] * d[..., 1]
             + s.conic[:, None, 2] * d[..., 1] ** 2)
        touched = set(np.nonzero((q <= s.radius2[:, None]).any(axis=1))[0])
        assert touched <= expected
        assert set(grid.bin(k).tolist()) == expected


def test_bins_sorted_front_to_back():
    rng = np.random.default_rng(4)
    cam = make_camera(64, 48, f=50.0)
    s = project(random_gaussians(rng, 300), cam)
    grid = bin_tiles(s, cam.width, cam.height)
    for b in grid.bins:
        keys = list(zip(s.depth[b], b))
        assert keys == sorted(keys)


def test_binning_is_deterministic():
    rng = np.random.default_rng(4)
    cam = make_camera(64, 48, f=50.0)
    s = project(random_gaussians(rng, 300), cam)
    a, b = bin_tiles(s, 64, 48), bin_tiles(s, 64, 48)
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.offsets, b.offsets)
