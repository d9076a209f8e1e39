import numpy as np
import pytest

from bvhtok.bvh_io import BvhDocument, BvhJoint, axis_rotation, parse_bvh, write_bvh
from bvhtok.skeleton import (
    CanonConfig,
    CanonicalizationRejected,
    InconsistentLCAError,
    PoseFrame,
    PoseSequence,
    Skeleton,
    canonicalize,
    document_to_motion,
    forward_kinematics,
    lca,
    lca_matrix,
    motion_to_document,
    reconstruct_tree_from_lca,
    reroot,
    rest_positions,
    skeleton_diameter,
)
from conftest import path_fk_oracle, random_poses, random_rotations, random_skeleton


def ancestors(skel, v):
    out = [v]
    while skel.parents[out[-1]] >= 0:
        out.append(skel.parents[out[-1]])
    return out


def test_invalid_skeletons_rejected():
    with pytest.raises(ValueError):
        Skeleton(["a", "b"], [-1, 2], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Skeleton(["a", "b"], [0, -1], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Skeleton(["a"], [-1], np.zeros((2, 3)))


def test_fk_identity_is_path_sum():
    skel = Skeleton(["r", "a", "b", "c"], [-1, 0, 1, 0], [[0, 0, 0], [1, 2, 3], [0, 1, 0], [5, 0, 0]])
    pos, _ = forward_kinematics(skel, PoseFrame(np.zeros(3), np.tile(np.eye(3), (4, 1, 1))))
    assert np.allclose(pos, [[0, 0, 0], [1, 2, 3], [1, 3, 3], [5, 0, 0]], atol=0)


def test_fk_two_bone_chain_rotated_root():
    skel = Skeleton(["r", "a", "b"], [-1, 0, 1], [[0, 0, 0], [1, 0, 0], [1, 0, 0]])
    local = np.tile(np.eye(3), (3, 1, 1))
    local[0] = axis_rotation("Z", np.pi / 2)
    pos, _ = forward_kinematics(skel, PoseFrame(np.zeros(3), local))
    assert np.allclose(pos[2], [0, 2, 0], atol=1e-6)


def test_fk_matches_path_oracle(rng):
    for _ in range(20):
        skel = random_skeleton(rng, int(rng.integers(1, 25)))
        poses = random_poses(rng, skel, 3)
        pos, _ = forward_kinematics(skel, poses)
        for t in range(3):
            oracle = path_fk_oracle(skel, poses.root_positions[t], poses.local_rotations[t])
            assert np.abs(pos[t] - oracle).max() <= 1e-9


def test_fk_rotation_equivariance(rng):
    skel = random_skeleton(rng, 10)
    poses = random_poses(rng, skel, 1)
    R = random_rotations(rng, ())
    pos, _ = forward_kinematics(skel, poses)
    rotated = poses.local_rotations.copy()
    rotated[:, 0] = R @ rotated[:, 0]
    pos2, _ = forward_kinematics(skel, PoseSequence(poses.root_positions, rotated))
    rel = pos - pos[:, :1]
    rel2 = pos2 - pos2[:, :1]
    assert np.abs(rel2 - rel @ R.T).max() <= 1e-9


def test_lca_basics(rng):
    skel = random_skeleton(rng, 12)
    for v in range(12):
        assert lca(skel, 0, v) == 0
        assert lca(skel, v, v) == v


def test_lca_matches_ancestor_sets(rng):
    for _ in range(20):
        skel = random_skeleton(rng, int(rng.integers(1, 51)))
        table = lca_matrix(skel)
        depth = skel.depths()
        for i in range(skel.num_joints):
            anc_i = set(ancestors(skel, i))
            for j in range(skel.num_joints):
                common = anc_i & set(ancestors(skel, j))
                expected = max(common, key=lambda v: depth[v])
                assert table[i, j] == expected
                if i < 5 and j < 5:
                    assert lca(skel, i, j) == expected


def test_reconstruct_single_and_star():
    assert reconstruct_tree_from_lca(["x"], lambda a, b: a) == {}
    k = 6
    star = Skeleton(["r"] + [f"l{i}" for i in range(k)], [-1] + [0] * k, np.zeros((k + 1, 3)))
    table = lca_matrix(star)
    assert reconstruct_tree_from_lca(range(k + 1), lambda a, b: table[a, b]) == {i: 0 for i in range(1, k + 1)}


def test_reconstruct_random_trees_with_shuffled_labels(rng):
    for _ in range(200):
        n = int(rng.integers(1, 51))
        skel = random_skeleton(rng, n)
        table = lca_matrix(skel)
        labels = [f"n{v}" for v in rng.permutation(n)]
        back = {lab: v for v, lab in enumerate(labels)}
        parent = reconstruct_tree_from_lca(set(labels), lambda a, b: labels[table[back[a], back[b]]])
        assert parent == {labels[j]: labels[skel.parents[j]] for j in range(1, n)}


def test_reconstruct_inconsistent_oracle():
    # a 3-cycle of "ancestors": no node is the LCA of itself with all others
    answers = {(0, 1): 0, (1, 2): 1, (0, 2): 2}
    with pytest.raises(InconsistentLCAError) as exc:
        reconstruct_tree_from_lca([0, 1, 2], lambda a, b: a if a == b else answers[tuple(sorted((a, b)))])
    assert sorted(exc.value.group) == [0, 1, 2]


def test_diameter_examples():
    assert skeleton_diameter(Skeleton(["r"], [-1], [[3, 4, 5]])) == 0.0
    chain = Skeleton(list("rabc"), [-1, 0, 1, 2], [[9, 9, 9], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    assert skeleton_diameter(chain) == 3.0
    y = Skeleton(list("rab"), [-1, 0, 0], [[0, 0, 0], [2.5, 0, 0], [0, 1.7, 0]])
    assert skeleton_diameter(y) == 2.5


def make_doc(offsets, parents, frames, channels=None, end_sites=()):
    joints = []
    for j, (o, p) in enumerate(zip(offsets, parents)):
        ch = channels[j] if channels else (["Xposition", "Yposition", "Zposition"] if j == 0 else []) + \
            ["Zrotation", "Xrotation", "Yrotation"]
        joints.append(BvhJoint(f"j{j}", None if p < 0 else p, np.array(o, float), ch))
    for p, o in end_sites:
        joints.append(BvhJoint(f"j{p}_end", p, np.array(o, float), [], True))
    return BvhDocument(joints, 1 / 30, np.asarray(frames, float))


def test_canonicalize_root_only_translation(rng):
    skel = random_skeleton(rng, 6)
    poses = random_poses(rng, skel, 5)
    doc = motion_to_document(skel, poses, 1 / 30)
    canon = canonicalize(doc)
    assert abs(skeleton_diameter(canon.skeleton) - 1.0) <= 1e-9
    _, ref = document_to_motion(doc)
    assert np.allclose(canon.poses.local_rotations, ref.local_rotations, atol=1e-12)
    assert np.allclose(canon.poses.root_positions, ref.root_positions * canon.scale, atol=1e-12)


def test_canonicalize_folds_constant_mid_chain_translation():
    channels = [["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"],
                ["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"],
                ["Zrotation", "Xrotation", "Yrotation"]]
    frames = np.zeros((4, 15))
    frames[:, 6:9] = [0.5, 0, 0]
    frames[:, 9:12] = np.arange(4)[:, None] * [10, 5, 0]
    doc = make_doc([[0, 0, 0], [1, 0, 0], [1, 0, 0]], [-1, 0, 1], frames, channels)
    canon = canonicalize(doc)
    pos, _ = forward_kinematics(canon.skeleton, canon.poses)
    lengths = np.linalg.norm(pos[:, 1] - pos[:, 0], axis=-1)
    assert np.abs(lengths - lengths[0]).max() <= 1e-6
    assert np.allclose(canon.skeleton.rest_offsets[1] / canon.scale, [1.5, 0, 0])


def test_canonicalize_rejects_varying_mid_chain_translation():
    channels = [["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"],
                ["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"],
                ["Zrotation", "Xrotation", "Yrotation"]]
    frames = np.zeros((4, 15))
    frames[:, 6] = np.linspace(0, 1, 4)  # bone stretch
    doc = make_doc([[0, 0, 0], [1, 0, 0], [1, 0, 0]], [-1, 0, 1], frames, channels)
    with pytest.raises(CanonicalizationRejected) as exc:
        canonicalize(doc)
    assert exc.value.step == "translation"
    canon = canonicalize(doc, CanonConfig(translation_policy="fold_mean"))
    assert np.allclose(canon.skeleton.rest_offsets[1] / canon.scale, [1.5, 0, 0])
    with pytest.raises(CanonicalizationRejected):
        canonicalize(make_doc([[0, 0, 0], [1, 0, 0], [1, 0, 0]], [-1, 0, 1], np.zeros((4, 15)), channels),
                     CanonConfig(translation_policy="reject"))


def test_canonicalize_rejects_abnormal_bone(rng):
    skel = random_skeleton(rng, 8)
    offsets = skel.rest_offsets.copy()
    offsets[3] *= 100 * skeleton_diameter(skel) / np.linalg.norm(offsets[3])
    bad = Skeleton(skel.joint_names, skel.parents, offsets)
    doc = motion_to_document(bad, random_poses(rng, bad, 2), 1 / 30)
    with pytest.raises(CanonicalizationRejected) as exc:
        canonicalize(doc)
    assert exc.value.step == "bone_length"


def test_canonicalize_bone_lengths_conserved(rng):
    skel = random_skeleton(rng, 9)
    canon = canonicalize(motion_to_document(skel, random_poses(rng, skel, 6), 1 / 30))
    pos, _ = forward_kinematics(canon.skeleton, canon.poses)
    par = canon.skeleton.parents
    for j in range(1, canon.skeleton.num_joints):
        d = np.linalg.norm(pos[:, j] - pos[:, par[j]], axis=-1)
        assert np.abs(d - np.linalg.norm(canon.skeleton.rest_offsets[j])).max() <= 1e-6


def test_canonicalize_empty_skeleton_rejected():
    doc = BvhDocument([BvhJoint("r_end", None, np.zeros(3), [], True)], 1 / 30, np.zeros((1, 0)))
    with pytest.raises(CanonicalizationRejected) as exc:
        canonicalize(doc)
    assert exc.value.step == "prune"


def test_motion_document_round_trip(rng):
    skel = random_skeleton(rng, 7)
    poses = random_poses(rng, skel, 4)
    skel2, poses2 = document_to_motion(parse_bvh(write_bvh(motion_to_document(skel, poses, 1 / 30))))
    p1, _ = forward_kinematics(skel, poses)
    p2, _ = forward_kinematics(skel2, poses2)
    # the document lists joints depth-first, so compare by name
    idx = [skel2.joint_names.index(n) for n in skel.joint_names]
    assert np.abs(p1 - p2[:, idx]).max() <= 1e-4


def test_smoothing_window_averages_rotations():
    frames = np.zeros((5, 6))
    frames[2, 3] = 3.0
    doc = make_doc([[0, 0, 0]], [-1], frames)
    _, poses = document_to_motion(doc, CanonConfig(smoothing_window=3))
    angle = np.degrees(np.arctan2(poses.local_rotations[:, 0, 1, 0], poses.local_rotations[:, 0, 0, 0]))
    assert np.allclose(angle, [0, 1, 1, 1, 0], atol=1e-9)


def test_reroot_at_chain_end_is_exact(rng):
    names = list("abcde")
    skel = Skeleton(names, [-1, 0, 1, 2, 3], rng.normal(size=(5, 3)))
    poses = random_poses(rng, skel, 4)
    new, new_poses = reroot(skel, poses, "e")
    assert new.joint_names == list("edcba")
    p_old, _ = forward_kinematics(skel, poses)
    p_new, _ = forward_kinematics(new, new_poses)
    idx = [new.joint_names.index(n) for n in names]
    assert np.abs(p_old - p_new[:, idx]).max() <= 1e-9


def test_reroot_mid_chain_keeps_rest_pose_and_bone_lengths(rng):
    names = list("abcde")
    skel = Skeleton(names, [-1, 0, 1, 2, 3], rng.normal(size=(5, 3)))
    new, _ = reroot(skel, random_poses(rng, skel, 3), "c")
    assert new.joint_names[0] == "c"
    idx = [new.joint_names.index(n) for n in names]
    assert np.allclose(rest_positions(new)[idx], rest_positions(skel), atol=1e-12)
    old_len = sorted(np.linalg.norm(skel.rest_offsets[1:], axis=1))
    assert np.allclose(sorted(np.linalg.norm(new.rest_offsets[1:], axis=1)), old_len, atol=1e-12)


def test_reroot_unknown_joint(rng):
    skel = random_skeleton(rng, 3)
    with pytest.raises(CanonicalizationRejected):
        reroot(skel, random_poses(rng, skel, 1), "nope")


def test_rest_positions_match_fk(rng):
    skel = random_skeleton(rng, 10)
    pos, _ = forward_kinematics(skel, PoseSequence.rest(skel, 1))
    assert np.allclose(pos[0], rest_positions(skel), atol=1e-12)
