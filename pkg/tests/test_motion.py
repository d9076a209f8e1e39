import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvhtok.bvh_io import axis_rotation
from bvhtok.motion import (
    DegenerateRot6DError,
    MotionTheta,
    augment_rest_pose,
    pose_sequence_from_theta,
    rot6d_from_matrix,
    rot6d_to_matrix,
    theta_from_pose_sequence,
)
from bvhtok.skeleton import PoseSequence, Skeleton, forward_kinematics
from conftest import random_poses, random_rotations, random_skeleton


def test_rot6d_examples():
    assert np.array_equal(rot6d_from_matrix(np.eye(3)), [1, 0, 0, 0, 1, 0])
    assert np.allclose(rot6d_from_matrix(axis_rotation("Z", np.pi / 2)), [0, 1, 0, -1, 0, 0], atol=1e-15)
    assert np.allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3), atol=0)
    assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=0)


def test_rot6d_round_trip(rng):
    R = random_rotations(rng, (100,))
    assert np.abs(rot6d_to_matrix(rot6d_from_matrix(R)) - R).max() <= 1e-9


def test_rot6d_noisy_columns_orthonormal(rng):
    R = random_rotations(rng, (200,))
    v = rot6d_from_matrix(R)
    noise = rng.normal(size=v.shape)
    noise *= 0.05 * rng.uniform(size=(200, 1)) / np.linalg.norm(noise, axis=1, keepdims=True)
    out = rot6d_to_matrix(v + noise)
    err = np.abs(np.swapaxes(out, -1, -2) @ out - np.eye(3)).max()
    assert err <= 1e-9
    assert np.allclose(np.linalg.det(out), 1, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_rot6d_scale_invariant(a, b):
    R = axis_rotation("X", 0.3) @ axis_rotation("Y", 1.1)
    v = rot6d_from_matrix(R)
    scaled = np.concatenate([a * v[:3], b * v[3:]])
    assert np.abs(rot6d_to_matrix(scaled) - R).max() <= 1e-9


def test_rot6d_degenerate_inputs():
    with pytest.raises(DegenerateRot6DError):
        rot6d_to_matrix([0, 0, 0, 0, 1, 0])
    with pytest.raises(DegenerateRot6DError):
        rot6d_to_matrix([1, 2, 3, 2, 4, 6])


def test_theta_static_and_deltas():
    skel = Skeleton(["r", "a"], [-1, 0], [[0, 0, 0], [1, 0, 0]])
    rots = np.tile(np.eye(3), (3, 2, 1, 1))
    poses = PoseSequence(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], float), rots)
    th = theta_from_pose_sequence(skel, poses)
    assert np.array_equal(th.data[:, 0, :3], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert np.all(th.data[:, 1, :3] == 0)
    assert np.all(th.data[:, :, 3:] == [1, 0, 0, 0, 1, 0])
    back = pose_sequence_from_theta(skel, th, [0, 0, 0])
    assert np.array_equal(back.root_positions, poses.root_positions)
    th.check()


def test_zero_theta_is_rest_pose():
    skel = Skeleton(["r", "a"], [-1, 0], [[0, 0, 0], [1, 0, 0]])
    data = np.zeros((4, 2, 9))
    data[..., 3:] = [1, 0, 0, 0, 1, 0]
    poses = pose_sequence_from_theta(skel, MotionTheta(data, "", 1 / 30), [5, 6, 7])
    assert np.all(poses.root_positions == [5, 6, 7])
    assert np.allclose(poses.local_rotations, np.eye(3))


def test_theta_round_trips(rng):
    skel = random_skeleton(rng, 9)
    poses = random_poses(rng, skel, 12)
    th = theta_from_pose_sequence(skel, poses)
    back = pose_sequence_from_theta(skel, th, poses.root_positions[0])
    assert np.abs(back.root_positions - poses.root_positions).max() <= 1e-6
    assert np.abs(back.local_rotations - poses.local_rotations).max() <= 1e-6
    again = theta_from_pose_sequence(skel, back)
    assert np.abs(again.data - th.data).max() <= 1e-6


def test_degenerate_block_names_frame_and_joint(rng):
    skel = random_skeleton(rng, 4)
    th = theta_from_pose_sequence(skel, random_poses(rng, skel, 5))
    th.data[3, 2, 3:] = 0
    with pytest.raises(DegenerateRot6DError) as exc:
        pose_sequence_from_theta(skel, th, np.zeros(3))
    assert exc.value.index == (3, 2)


def test_theta_check_rejects_non_root_translation(rng):
    skel = random_skeleton(rng, 3)
    th = theta_from_pose_sequence(skel, random_poses(rng, skel, 2))
    th.data[0, 1, 0] = 0.1
    with pytest.raises(ValueError):
        th.check()


def test_augment_preserves_world_motion(rng):
    for _ in range(10):
        skel = random_skeleton(rng, int(rng.integers(2, 20)))
        poses = random_poses(rng, skel, 8)
        anchor = int(rng.integers(8))
        new_skel, new_poses = augment_rest_pose(skel, poses, anchor)
        p_old, _ = forward_kinematics(skel, poses)
        p_new, _ = forward_kinematics(new_skel, new_poses)
        assert np.abs(p_old - p_new).max() <= 1e-9
        par = skel.parents
        for j in range(1, skel.num_joints):
            d = np.linalg.norm(p_old[anchor, j] - p_old[anchor, par[j]])
            assert abs(np.linalg.norm(new_skel.rest_offsets[j]) - d) <= 1e-6
        assert np.allclose(new_poses.local_rotations[anchor, 1:], np.eye(3), atol=1e-9)


def test_augment_at_rest_frame_keeps_offsets(rng):
    skel = random_skeleton(rng, 7)
    poses = random_poses(rng, skel, 4)
    poses.local_rotations[2] = np.eye(3)
    new_skel, _ = augment_rest_pose(skel, poses, 2)
    assert np.abs(new_skel.rest_offsets - skel.rest_offsets).max() <= 1e-9


def test_augment_bad_anchor(rng):
    skel = random_skeleton(rng, 3)
    with pytest.raises(IndexError):
        augment_rest_pose(skel, random_poses(rng, skel, 2), 5)
