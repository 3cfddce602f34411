import numpy as np
import pytest

from handtrack.camera import Camera, project
from handtrack.errors import FormatError, InvalidInputError, VersionMismatchError
from handtrack.localization import argmax
from handtrack.optimizer import EnergyWeights, track_sequence
from handtrack.skeleton import forward_kinematics
from handtrack.synth import (
    SynthConfig,
    gaussian_heatmap,
    generate_sequence,
    read_observation_stream,
    write_observation_stream,
)


def test_gaussian_value():
    hm = gaussian_heatmap((30, 40), (10, 10), 2.0)
    assert hm[10, 12] == pytest.approx(np.exp(-4 / 8))
    assert hm[10, 12] == pytest.approx(0.6065, abs=1e-4)
    assert hm[10, 10] == 1.0


def test_config_validation():
    for bad in (dict(occlusion_rate=1.5), dict(heatmap_outlier_rate=-0.1), dict(heatmap_sigma=0),
                dict(shape_scale=1.3), dict(shape_scale=0.7), dict(position_noise=-1)):
        with pytest.raises(InvalidInputError):
            SynthConfig(**bad)


def test_deterministic(skeleton, camera, tmp_path):
    cfg = SynthConfig(sequence_length=20, occlusion_rate=0.2, heatmap_outlier_rate=0.2, seed=9)
    for name in ("a", "b"):
        obs, gt = generate_sequence(skeleton, camera, cfg)
        write_observation_stream(tmp_path / name, obs, gt, camera)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    obs2, _ = generate_sequence(skeleton, camera, SynthConfig(sequence_length=20, seed=10))
    assert not np.array_equal(obs[0].local_positions, obs2[0].local_positions)


def test_noiseless_observations_reproduce_truth(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig.noiseless(sequence_length=30))
    for o, g in zip(obs, gt):
        pos = forward_kinematics(skeleton, g.pose)
        np.testing.assert_allclose(pos, g.positions, atol=1e-3)
        # float32 storage: exact up to single-precision rounding
        np.testing.assert_allclose(o.global_positions, g.positions, atol=1e-4)
        np.testing.assert_allclose(o.local_positions, g.positions - g.positions[skeleton.root_joint], atol=1e-4)
        assert o.validity_mask.all()


def test_noise_bound(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=100, seed=4))
    dev = np.array([np.abs(o.global_positions - g.positions).max() for o, g in zip(obs, gt)])
    assert dev.max() <= 50.0 + 1e-3
    assert dev.max() > 30.0


def test_ground_truth_consistency(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=20, seed=2))
    for o, g in zip(obs, gt):
        root = g.positions[skeleton.root_joint]
        np.testing.assert_allclose(forward_kinematics(skeleton, g.pose) - root,
                                   g.positions - root, atol=1e-3)
        np.testing.assert_allclose(g.root_uv, project(camera, root), atol=1e-3)


def test_heatmap_peaks_near_projection(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=30, occlusion_rate=0.3, seed=1))
    for o, g in zip(obs, gt):
        uv = project(camera, g.positions)
        for j in np.flatnonzero(o.validity_mask):
            hm = o.joint_heatmaps[j]
            u, v, like = argmax(hm)
            assert abs(u - uv[j, 0]) <= 0.5 * hm.scale + 1e-6
            assert abs(v - uv[j, 1]) <= 0.5 * hm.scale + 1e-6
            assert like > 0.5
            np.testing.assert_allclose(o.joint_maxima[j], uv[j], atol=1e-2)


def test_occlusion(skeleton, camera):
    obs, _ = generate_sequence(skeleton, camera, SynthConfig(sequence_length=100, occlusion_rate=0.3, seed=5))
    masks = np.array([o.validity_mask for o in obs])
    tips = skeleton.fingertips
    rate = 1 - masks[:, tips].mean()
    assert 0.2 < rate < 0.4
    assert masks[:, np.setdiff1d(np.arange(21), tips)].all()
    for o in obs:
        for j in tips[~o.validity_mask[tips]]:
            assert o.joint_heatmaps[j].values.max() < 0.1


def test_root_outliers(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=100, heatmap_outlier_rate=0.3, seed=6))
    low = [argmax(o.root_heatmap)[2] < 0.1 for o in obs]
    assert 15 < sum(low) < 45


def test_shape_scale(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig.noiseless(sequence_length=3, shape_scale=1.2))
    pos = gt[0].positions
    bones = np.linalg.norm(pos[1:] - pos[skeleton.parents[1:]], axis=1)
    np.testing.assert_allclose(bones, 1.2 * skeleton.bone_lengths, rtol=1e-5)


def test_supplied_trajectory(skeleton, camera):
    poses = np.tile(np.r_[0, 0, 500, 0.3, 0, np.pi, np.zeros(20)], (5, 1))
    poses[:, 6 + 9] = 3.0  # far beyond the limit
    obs, gt = generate_sequence(skeleton, camera, SynthConfig.noiseless(sequence_length=5, pose_trajectory=poses))
    assert gt[0].pose[6 + 9] == pytest.approx(skeleton.limits_upper[9], abs=1e-6)


def test_noiseless_tracking_recovers_pose(skeleton, camera):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig.noiseless(sequence_length=30))
    poses = track_sequence(skeleton, obs, camera, EnergyWeights(w_t=0.0))
    for p, g in zip(poses[2:], gt[2:]):
        np.testing.assert_allclose(p, g.pose, atol=1e-4)


def test_stream_round_trip(skeleton, camera, tmp_path):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=8, occlusion_rate=0.3,
                                                              heatmap_outlier_rate=0.3, seed=3))
    gt[3] = None
    path = tmp_path / "s.bin"
    write_observation_stream(path, obs, gt, camera)
    obs2, gt2, cam2 = read_observation_stream(path, camera)
    assert cam2 == camera
    for a, b, ga, gb in zip(obs, obs2, gt, gt2):
        np.testing.assert_array_equal(a.local_positions, b.local_positions)
        np.testing.assert_array_equal(a.root_3d, b.root_3d)
        np.testing.assert_array_equal(a.validity_mask, b.validity_mask)
        np.testing.assert_array_equal(a.root_heatmap.values, b.root_heatmap.values)
        for ha, hb in zip(a.joint_heatmaps, b.joint_heatmaps):
            np.testing.assert_array_equal(ha.values, hb.values)
        np.testing.assert_array_equal(a.joint_maxima, b.joint_maxima)
        assert a.root == b.root
        if ga is None:
            assert gb is None
        else:
            np.testing.assert_array_equal(ga.pose, gb.pose)
            np.testing.assert_array_equal(ga.positions, gb.positions)
    # rewriting what was read gives the same bytes
    write_observation_stream(tmp_path / "t.bin", obs2, gt2, cam2)
    assert (tmp_path / "t.bin").read_bytes() == path.read_bytes()


def test_empty_stream(camera, tmp_path):
    path = tmp_path / "e.bin"
    write_observation_stream(path, [], [], camera)
    obs, gt, cam = read_observation_stream(path)
    assert obs == [] and gt == [] and cam == camera


def test_stream_errors(skeleton, camera, tmp_path):
    obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=2))
    path = tmp_path / "s.bin"
    write_observation_stream(path, obs, gt, camera)
    good = path.read_bytes()
    other = Camera(500.0, 500.0, 160.0, 120.0, 320, 240)
    with pytest.raises(FormatError):
        read_observation_stream(path, other)
    for data in (good[:-3], good + b"\0", good[:12], b"XXXXXXXX" + good[8:]):
        path.write_bytes(data)
        with pytest.raises(FormatError):
            read_observation_stream(path)
    bad = bytearray(good)
    bad[8] = 2
    path.write_bytes(bytes(bad))
    with pytest.raises(VersionMismatchError):
        read_observation_stream(path)
    with pytest.raises(InvalidInputError):
        write_observation_stream(path, obs, gt[:1], camera)
    with pytest.raises(OSError):
        read_observation_stream(tmp_path / "missing.bin")
