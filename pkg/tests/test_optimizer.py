from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handtrack.errors import InvalidInputError, NoDataError
from handtrack.optimizer import (
    EnergyWeights,
    Observation,
    TrackerState,
    energy,
    energy_breakdown,
    energy_value,
    gradient_check,
    optimize_pose,
    track_frame,
    track_sequence,
    variant_weights,
)
from handtrack.skeleton import NUM_DOF, NUM_JOINTS, forward_kinematics, load_skeleton, random_pose

W = EnergyWeights()


def exact_observation(skeleton, camera, pose, mask=None):
    pos = forward_kinematics(skeleton, pose)
    r = pos[skeleton.root_joint].copy()
    uv = np.column_stack([camera.fx * pos[:, 0] / pos[:, 2] + camera.cx,
                          camera.fy * pos[:, 1] / pos[:, 2] + camera.cy])
    mask = np.ones(NUM_JOINTS, bool) if mask is None else mask
    return Observation(local_positions=pos - r, root_3d=r, validity_mask=mask, joint_maxima=uv)


def oracle_energy(skeleton, camera, pose, obs, state, w):
    """Straight loop over joints and DOF, written from the term definitions."""
    pos = forward_kinematics(skeleton, pose)
    e3 = e2 = 0.0
    for j in range(NUM_JOINTS):
        if not obs.validity_mask[j]:
            continue
        target = obs.local_positions[j] + obs.root_3d
        e3 += sum((pos[j, c] - target[c]) ** 2 for c in range(3))
        u = camera.fx * pos[j, 0] / pos[j, 2] + camera.cx
        v = camera.fy * pos[j, 1] / pos[j, 2] + camera.cy
        e2 += (u - obs.joint_maxima[j, 0]) ** 2 + (v - obs.joint_maxima[j, 1]) ** 2
    el = 0.0
    for d in range(20):
        th = pose[6 + d]
        if th < skeleton.limits_lower[d]:
            el += (skeleton.limits_lower[d] - th) ** 2
        elif th > skeleton.limits_upper[d]:
            el += (th - skeleton.limits_upper[d]) ** 2
    et = 0.0
    if state is not None and state.theta_prev2 is not None:
        for i in range(NUM_DOF):
            et += ((pose[i] - state.theta_prev[i]) - (state.theta_prev[i] - state.theta_prev2[i])) ** 2
    return w.w_p3 * e3 + w.w_p2 * e2 + w.w_l * el + w.w_t * et


def noisy_setup(skeleton, camera, rng, outside_limits=False):
    pose = random_pose(skeleton, rng)
    if outside_limits:
        pose[6:] += rng.uniform(-0.3, 0.3, 20)
    other = random_pose(skeleton, rng)
    target = forward_kinematics(skeleton, other) + rng.uniform(-25, 25, (NUM_JOINTS, 3))
    target[:, 2] = np.maximum(target[:, 2], 1.0)
    r = target[skeleton.root_joint].copy()
    obs = Observation(local_positions=target - r, root_3d=r,
                      validity_mask=rng.uniform(size=NUM_JOINTS) < 0.8,
                      joint_maxima=rng.uniform(0, 300, (NUM_JOINTS, 2)))
    obs.validity_mask[0] = True
    state = TrackerState(other + rng.normal(0, 0.05, NUM_DOF), other)
    return pose, obs, state


def relative_error(g, g_ref):
    scale = np.abs(g_ref).max()
    if scale == 0:
        return 0.0 if np.abs(g).max() == 0 else np.inf
    return np.abs(g - g_ref).max() / scale


def central_difference(f, pose):
    g = np.zeros(NUM_DOF)
    for i in range(NUM_DOF):
        h = 1e-3 if i < 3 else 1e-6
        e = np.zeros(NUM_DOF)
        e[i] = h
        g[i] = (f(pose + e) - f(pose - e)) / (2 * h)
    return g


def test_default_weights():
    assert (W.w_p3, W.w_p2, W.w_l, W.w_t) == (0.01, 5e-7, 0.03, 1e-3)
    with pytest.raises(InvalidInputError):
        EnergyWeights(w_p3=-1)


def test_global_minimum(skeleton, camera, rng):
    pose = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, pose)
    prev = pose - 0.01
    state = TrackerState(prev, 2 * prev - pose)
    value, grad = energy(skeleton, pose, obs, state, camera, W)
    assert value == pytest.approx(0.0, abs=1e-18)
    np.testing.assert_allclose(grad, 0.0, atol=1e-9)


def test_limit_penalty_arithmetic(skeleton, camera, rng):
    pose = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, pose)
    d = 7
    pose[6 + d] = skeleton.limits_upper[d] + 0.1
    obs = exact_observation(skeleton, camera, pose)
    assert energy_breakdown(skeleton, pose, obs, None, camera, W)["limits"] == pytest.approx(0.01)
    assert energy_value(skeleton, pose, obs, None, camera, W) == pytest.approx(3e-4, abs=1e-15)


def test_limit_term_zero_inside(skeleton, camera, rng):
    for _ in range(20):
        pose = random_pose(skeleton, rng)
        obs = exact_observation(skeleton, camera, pose)
        assert energy_breakdown(skeleton, pose, obs, None, camera, W)["limits"] == 0.0


def test_energy_matches_loop_oracle(skeleton, camera, rng):
    for outside in (False, True):
        for _ in range(10):
            pose, obs, state = noisy_setup(skeleton, camera, rng, outside)
            assert energy_value(skeleton, pose, obs, state, camera, W) == pytest.approx(
                oracle_energy(skeleton, camera, pose, obs, state, W), rel=1e-12)


@pytest.mark.parametrize("term", ["w_p3", "w_p2", "w_l", "w_t", None])
def test_gradient_matches_oracle_finite_differences(skeleton, camera, rng, term):
    w = W if term is None else EnergyWeights(**{k: (1.0 if k == term else 0.0)
                                                for k in ("w_p3", "w_p2", "w_l", "w_t")})
    worst = 0.0
    for i in range(20):
        pose, obs, state = noisy_setup(skeleton, camera, rng, outside_limits=(i % 2 == 1))
        _, g = energy(skeleton, pose, obs, state, camera, w)
        g_fd = central_difference(lambda p: oracle_energy(skeleton, camera, p, obs, state, w), pose)
        worst = max(worst, relative_error(g, g_fd))
    assert worst < 1e-4


def test_gradient_check_helper(skeleton, camera):
    worst = gradient_check(skeleton, camera, configs=5, seed=3)
    assert set(worst) == {"pos3d", "pos2d", "limits", "temporal", "total"}
    assert max(worst.values()) < 1e-4


def test_no_data(skeleton, camera, rng):
    pose = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, pose, mask=np.zeros(NUM_JOINTS, bool))
    with pytest.raises(NoDataError):
        energy(skeleton, pose, obs, None, camera, W)
    with pytest.raises(NoDataError):
        optimize_pose(skeleton, obs, None, camera, W, pose)


def test_observation_validation():
    with pytest.raises(InvalidInputError):
        Observation(np.zeros((20, 3)), np.zeros(3), np.ones(21, bool))
    bad = np.zeros((21, 3))
    bad[3] = np.nan
    mask = np.ones(21, bool)
    with pytest.raises(InvalidInputError):
        Observation(bad, np.zeros(3), mask)
    mask[3] = False
    Observation(bad, np.zeros(3), mask)  # masked joints may carry junk


def test_stationary_point(skeleton, camera, rng):
    pose = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, pose)
    for method in ("gauss-newton", "diagonal"):
        out = optimize_pose(skeleton, obs, None, camera, W, pose, method=method)
        np.testing.assert_allclose(out, pose, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["gauss-newton", "diagonal"]))
def test_monotone_descent(seed, method):
    from handtrack.camera import default_camera

    skeleton, camera = load_skeleton(), default_camera()
    rng = np.random.default_rng(seed)
    pose, obs, state = noisy_setup(skeleton, camera, rng, outside_limits=True)
    out, info = optimize_pose(skeleton, obs, state, camera, W, pose, method=method, return_info=True)
    assert energy_value(skeleton, out, obs, state, camera, W) <= energy_value(skeleton, pose, obs, state, camera, W)
    assert np.all(np.diff(info.energies) <= 0)
    assert all(h is None or 0 <= h <= 8 for h in info.halvings)
    assert len(info.halvings) <= 20


def test_perturbed_angles_recovered(skeleton, camera, rng):
    errors = []
    for _ in range(20):
        truth = random_pose(skeleton, rng)
        obs = exact_observation(skeleton, camera, truth)
        init = truth.copy()
        init[6:] += rng.uniform(-0.05, 0.05, 20)
        out = optimize_pose(skeleton, obs, None, camera, W, init)
        errors.append(np.linalg.norm(forward_kinematics(skeleton, out) - forward_kinematics(skeleton, truth), axis=1).mean())
    assert max(errors) < 2.0


def test_masked_fingertip_is_hallucinated_consistently(skeleton, camera, rng):
    truth = random_pose(skeleton, rng)
    mask = np.ones(NUM_JOINTS, bool)
    mask[8] = False
    obs = exact_observation(skeleton, camera, truth, mask)
    init = truth.copy()
    init[6:] += rng.uniform(-0.05, 0.05, 20)
    out = optimize_pose(skeleton, obs, None, camera, W, init)
    pos = forward_kinematics(skeleton, out)
    np.testing.assert_allclose(np.linalg.norm(pos[1:] - pos[skeleton.parents[1:]], axis=1),
                               skeleton.bone_lengths, atol=1e-9)
    angles = out[6:]
    # the limit prior is soft; violations stay tiny
    assert np.all(angles >= skeleton.limits_lower - 1e-3)
    assert np.all(angles <= skeleton.limits_upper + 1e-3)


def test_constant_observations_converge(skeleton, camera, rng):
    truth = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, truth)
    state = TrackerState()
    poses = []
    for _ in range(10):
        pose, state = track_frame(skeleton, obs, state, camera, W)
        poses.append(pose)
    assert np.linalg.norm(poses[-1] - poses[-2]) < 1e-6


def _step_sequence(skeleton, camera, rng):
    a = random_pose(skeleton, rng)
    b = a.copy()
    b[:3] += [20.0, -10.0, 15.0]
    b[6:] = np.clip(b[6:] + 0.2, skeleton.limits_lower, skeleton.limits_upper)
    noise = np.random.default_rng(5)
    seq = []
    for t in range(16):
        pose = a if t < 8 else b
        o = exact_observation(skeleton, camera, pose)
        jitter = noise.uniform(-5, 5, (NUM_JOINTS, 3))
        seq.append(Observation(o.local_positions + jitter, o.root_3d, o.validity_mask, joint_maxima=o.joint_maxima))
    return seq


def test_temporal_term_reduces_acceleration(skeleton, camera, rng):
    seq = _step_sequence(skeleton, camera, rng)
    smooth = track_sequence(skeleton, seq, camera, W)
    rough = track_sequence(skeleton, seq, camera, replace(W, w_t=0.0))
    acc = lambda P: np.abs(np.diff(P, 2, axis=0)).sum()
    assert acc(smooth) < acc(rough)


def test_first_frames_have_no_temporal_term(skeleton, camera, rng):
    pose = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, pose)
    assert "temporal" not in energy_breakdown(skeleton, pose, obs, TrackerState(), camera, W)
    one = TrackerState().shifted(pose)
    assert "temporal" not in energy_breakdown(skeleton, pose, obs, one, camera, W)
    assert "temporal" in energy_breakdown(skeleton, pose, obs, one.shifted(pose), camera, W)


def test_first_frame_initialisation_recovers_pose(skeleton, camera, rng):
    truth = random_pose(skeleton, rng)
    obs = exact_observation(skeleton, camera, truth)
    pose, state = track_frame(skeleton, obs, TrackerState(), camera, W)
    err = np.linalg.norm(forward_kinematics(skeleton, pose) - forward_kinematics(skeleton, truth), axis=1)
    assert err.mean() < 1.0
    assert state.frame_index == 1


def test_coasting_without_data(skeleton, camera, rng):
    truth = random_pose(skeleton, rng)
    empty = exact_observation(skeleton, camera, truth, mask=np.zeros(NUM_JOINTS, bool))
    with pytest.raises(NoDataError):
        track_frame(skeleton, empty, TrackerState(), camera, W)
    pose, state = track_frame(skeleton, exact_observation(skeleton, camera, truth), TrackerState(), camera, W)
    held, state2 = track_frame(skeleton, empty, state, camera, W)
    np.testing.assert_array_equal(held, pose)
    assert state2.frame_index == 2


def test_variants():
    assert variant_weights(W, "3d-only").w_p2 == 0 and variant_weights(W, "3d-only").w_p3 == W.w_p3
    assert variant_weights(W, "2d-only").w_p3 == 0
    with pytest.raises(InvalidInputError):
        variant_weights(W, "nothing")


def test_unknown_method(skeleton, camera, rng):
    pose = random_pose(skeleton, rng)
    with pytest.raises(InvalidInputError):
        optimize_pose(skeleton, exact_observation(skeleton, camera, pose), None, camera, W, pose, method="adam")


def test_warm_start_recovers_exact_pose(skeleton, camera):
    from handtrack.synth import default_motion

    motion = default_motion(skeleton, 0)
    truth = [motion.at(t) for t in range(12)]
    for p in truth:
        p[6:] = np.clip(p[6:], skeleton.limits_lower, skeleton.limits_upper)
        p[:3] = [0.0, -15.0, 520.0]
    for prev, cur in zip(truth, truth[1:]):
        out = optimize_pose(skeleton, exact_observation(skeleton, camera, cur), None, camera, W, prev)
        np.testing.assert_allclose(out, cur, atol=1e-6)
