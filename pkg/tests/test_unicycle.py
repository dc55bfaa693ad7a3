import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decosplat.geometry import yaw_matrix
from decosplat.harness.synth import gen_curved_track, gen_object_track
from decosplat.scene import UnicycleTrack, pose_at
from decosplat.unicycle import (MEAN_ROTATION_NOISE, MEAN_TRANSLATION_NOISE, MODES, MotionObjective, NoisyBoxTrack,
                                TrackFitError, UsageError, corrupt_track, fit_track, huber_value, loss_smooth,
                                loss_track, loss_unicycle, pose_error, pose_errors, rotation_error,
                                transform_track_poses)


def generated(n=8, seed=0):
    rng = np.random.default_rng(seed)
    vel = np.stack([rng.uniform(0.3, 1.5, n - 1), rng.uniform(-0.4, 0.4, n - 1)], 1)
    return UnicycleTrack.from_velocities(np.arange(n, dtype=float), rng.normal(), rng.normal(), rng.uniform(-3, 3),
                                         vel, rng.uniform(0.5, 1.0, n))


def raw(states, velocities, heights=None):
    states = np.asarray(states, dtype=float)
    n = len(states)
    return UnicycleTrack(np.arange(n, dtype=float), states, np.zeros(n) if heights is None else heights,
                         np.asarray(velocities, dtype=float).reshape(-1, 2))


# --- L_t ------------------------------------------------------------------------

def test_track_equal_to_observations_has_zero_l_t():
    tr = generated()
    assert loss_track(tr, NoisyBoxTrack.from_track(tr)) == 0.0


def test_single_frame_off_by_3_4_gives_7():
    tr = generated()
    obs = NoisyBoxTrack.from_track(tr)
    obs.obs[3, :2] += (3.0, 4.0)
    assert np.isclose(loss_track(tr, obs), 7.0, atol=1e-12)


def test_invalid_frames_contribute_nothing():
    tr = generated()
    obs = NoisyBoxTrack.from_track(tr)
    obs.obs[2, :2] += (10.0, -10.0)
    obs.valid[2] = False
    assert loss_track(tr, obs) == 0.0


def test_no_overlap_is_usage_error():
    tr = generated()
    obs = NoisyBoxTrack(tr.timestamps + 0.5, np.zeros((len(tr), 4)))
    with pytest.raises(UsageError):
        loss_track(tr, obs)


def test_box_track_needs_two_valid_frames():
    with pytest.raises(ValueError):
        NoisyBoxTrack([0.0, 1.0], np.zeros((2, 4)), [True, False])


# --- L_uni ------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 20))
def test_generated_track_has_zero_l_uni(seed, n):
    """Tracks propagated from their own (v, w) satisfy the transition exactly."""
    tr = generated(n, seed)
    for transition in ("stored", "propagated"):
        assert loss_unicycle(tr, transition=transition) < 1e-12


def test_straight_line_with_zero_omega():
    tr = raw([(t, 0.0, 0.0) for t in range(5)], [(1.0, 0.0)] * 4)
    assert loss_unicycle(tr) == 0.0


def test_straight_line_with_tiny_omega_uses_taylor_branch():
    w = 1e-8
    tr = UnicycleTrack.from_velocities(np.arange(5.0), 0.0, 0.0, 0.3, [(1.0, w)] * 4, np.zeros(5))
    assert loss_unicycle(tr) < 1e-12


def test_perturbing_one_x_adds_two_delta():
    tr = generated(8, 4)
    for delta in (0.3, -0.05):
        moved = tr.copy()
        moved.states[3, 0] += delta
        assert np.isclose(loss_unicycle(moved) - loss_unicycle(tr), 2 * abs(delta), atol=1e-12)


# --- L_reg ------------------------------------------------------------------------

def test_constant_velocity_and_heading_is_smooth():
    tr = raw([(t, 0.0, 0.4) for t in range(5)], [(1.0, 0.0)] * 4)
    assert loss_smooth(tr) == 0.0


def test_linear_theta_ramp_is_smooth():
    tr = raw([(0.0, 0.0, 0.1 * t) for t in range(6)], [(2.0, 0.1)] * 5)
    assert np.isclose(loss_smooth(tr), 0.0, atol=1e-15)


def test_speed_1_2_4_gives_1():
    tr = raw([(0.0, 0.0, 0.0)] * 4, [(1.0, 0.0), (2.0, 0.0), (4.0, 0.0)])
    assert np.isclose(loss_smooth(tr), 1.0, atol=1e-15)


def test_omega_variant_uses_yaw_rate():
    tr = raw([(0.0, 0.0, 0.0)] * 4, [(1.0, 0.1), (1.0, 0.3), (1.0, 0.2)])
    assert np.isclose(loss_smooth(tr, use_omega=True), abs(0.2 + 0.1 - 0.6), atol=1e-15)
    assert loss_smooth(tr) == 0.0


def test_smooth_needs_three_states():
    with pytest.raises(UsageError):
        loss_smooth(raw([(0, 0, 0), (1, 0, 0)], [(1.0, 0.0)]))


@pytest.mark.parametrize("name", ["track", "unicycle", "smooth"])
def test_loss_gradients_match_differences(name):
    rng = np.random.default_rng(1)
    tr = generated(7, 2)
    tr.states += rng.normal(0, 0.2, tr.states.shape)
    tr.velocities += rng.normal(0, 0.1, tr.velocities.shape)
    obs = NoisyBoxTrack.from_track(generated(7, 3))
    fn = {"track": lambda t, grad=False: loss_track(t, obs, grad=grad),
          "unicycle": lambda t, grad=False: loss_unicycle(t, grad=grad),
          "smooth": lambda t, grad=False: loss_smooth(t, grad=grad)}[name]
    _, (ds, _, dv) = fn(tr, grad=True)
    h = 1e-7
    for attr, g in (("states", ds), ("velocities", dv)):
        base = getattr(tr, attr)
        for idx in np.ndindex(base.shape):
            vals = []
            for s in (1, -1):
                bumped = base.copy()
                bumped[idx] += s * h
                setattr(tr, attr, bumped)
                vals.append(fn(tr))
            setattr(tr, attr, base)
            assert np.isclose((vals[0] - vals[1]) / (2 * h), g[idx], atol=1e-6), (attr, idx)


# --- pose errors ----------------------------------------------------------------

def test_identical_poses_have_zero_error():
    R, t = yaw_matrix(0.7), np.array([1.0, 2.0, 3.0])
    assert pose_error((R, t), (R, t)) == (0.0, 0.0)


def test_quarter_turn_and_3_4_offset():
    e_R, e_t = pose_error((yaw_matrix(np.pi / 2), np.array([0.0, 3.0, 4.0])), (np.eye(3), np.zeros(3)))
    assert np.isclose(e_R, np.pi / 2, atol=1e-12) and np.isclose(e_t, 5.0, atol=1e-12)


def test_half_turn_is_pi():
    assert np.isclose(rotation_error(yaw_matrix(np.pi), np.eye(3)), np.pi, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi),
       st.lists(st.floats(-20, 20), min_size=9, max_size=9))
def test_errors_invariant_under_rigid_frame_change(a, b, yaw, xs):
    xs = np.array(xs)
    est, gt = (yaw_matrix(a), xs[:3]), (yaw_matrix(b), xs[3:6])
    (e1, e2), = [transform_track_poses([est, gt], yaw, xs[6:])]
    before, after = pose_error(est, gt), pose_error(e1, e2)
    assert np.isclose(before[0], after[0], atol=1e-7) and np.isclose(before[1], after[1], atol=1e-9)


# --- fitting ----------------------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("solver", ["gd", "gauss_newton"])
def test_zero_noise_fit_is_exact(mode, solver):
    """A steady turn zeroes all three losses, so clean boxes are a fixed point of every mode."""
    gt = gen_object_track(np.random.default_rng(5), 15, 0.0, 0.0, 0.8, 0.06, 0.8, steady=True)
    assert loss_smooth(gt) < 1e-12
    fit = fit_track(NoisyBoxTrack.from_track(gt), mode, solver=solver, iterations=200).track
    err = pose_errors(fit, gt)
    assert err["mean_e_t"] < 1e-9 and err["mean_e_R"] < 1e-9


def test_mode_none_interpolates_linearly_between_boxes():
    obs = NoisyBoxTrack([0.0, 1.0, 2.0], [(0, 0, 1, 0), (2, 0, 1, 0.5), (2, 2, 1, 1.0)])
    fit = fit_track(obs, "none").track
    R, t = pose_at(fit, 0.5)
    assert np.allclose(t, (1.0, 0.0, 1.0)) and np.allclose(R, yaw_matrix(0.25))


def test_unicycle_beats_none_and_per_frame_on_curved_tracks():
    """20% noise, boxes on even frames, scored on the odd frames in between."""
    errs = {m: [] for m in MODES}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        gt = gen_curved_track(rng, 31)
        obs = corrupt_track(gt, 0.2, rng, gt.timestamps[::2])
        for m in MODES:
            fit = fit_track(obs, m, lambda_t=0.1, lambda_uni=1.0, lambda_reg=3.0).track
            errs[m].append(pose_errors(fit, gt, gt.timestamps[1:-1:2])["mean_e_t"])
    mean = {m: np.mean(v) for m, v in errs.items()}
    assert mean["unicycle"] < mean["none"] and mean["unicycle"] < mean["per_frame"]


def test_gradient_descent_lowers_motion_objective():
    gt = gen_curved_track(np.random.default_rng(2), 21)
    obs = corrupt_track(gt, 0.2, np.random.default_rng(3))
    res = fit_track(obs, "unicycle", iterations=500)
    assert res.history[-1] < res.history[0]


def test_gauss_newton_surrogate_never_increases():
    gt = gen_curved_track(np.random.default_rng(4), 21)
    obs = corrupt_track(gt, 0.2, np.random.default_rng(5))
    res = fit_track(obs, "unicycle", solver="gauss_newton", lambda_t=0.1, lambda_uni=1.0, lambda_reg=3.0,
                    iterations=100)
    h = np.array(res.history)
    assert len(h) > 2 and np.all(np.diff(h) <= 0)
    assert np.isclose(h[-1], huber_value(MotionObjective(obs, 0.1, 1.0, 3.0, transition="propagated"), res.track,
                                         0.1), rtol=1e-12)


def test_divergence_reports_iteration():
    obs = NoisyBoxTrack.from_track(generated(6))

    def bad(track):
        z = np.zeros_like
        return np.nan, (z(track.states), z(track.heights), z(track.velocities))

    with pytest.raises(TrackFitError) as err:
        fit_track(obs, "unicycle", coupling=bad)
    assert err.value.iteration == 0


def test_unknown_mode_and_solver():
    obs = NoisyBoxTrack.from_track(generated(6))
    with pytest.raises(UsageError):
        fit_track(obs, "bicycle")
    with pytest.raises(UsageError):
        fit_track(obs, solver="newton")


def test_noise_calibration_at_ten_percent():
    gt = UnicycleTrack.from_velocities(np.arange(40001.0), 0.0, 0.0, 0.0, np.tile([0.5, 0.0], (40000, 1)),
                                       np.zeros(40001))
    clean = NoisyBoxTrack.from_track(gt).obs
    for scale in (0.1, 0.2):
        noisy = corrupt_track(gt, scale, np.random.default_rng(0)).obs
        f = scale / 0.1
        planar = np.linalg.norm(noisy[:, :2] - clean[:, :2], axis=1).mean()
        yaw = np.abs(noisy[:, 3] - clean[:, 3]).mean()
        assert np.isclose(planar, f * MEAN_TRANSLATION_NOISE, rtol=0.02)
        assert np.isclose(yaw, f * MEAN_ROTATION_NOISE, rtol=0.02)
    assert np.isclose(MEAN_ROTATION_NOISE, np.deg2rad(5.0))
