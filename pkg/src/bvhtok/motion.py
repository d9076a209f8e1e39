"""Per-frame motion features (T, J, 9) and rest-pose randomization.

Each row is ``[dx, dy, dz, rot6d]``. The root row holds the frame-to-frame
root displacement and the global root orientation; every other row holds
zeros and the parent-relative rotation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import PoseSequence, Skeleton, forward_kinematics


class DegenerateRot6DError(ValueError):
    def __init__(self, message: str, index=None):
        self.index = index
        super().__init__(message)


def rot6d_from_matrix(rot: np.ndarray) -> np.ndarray:
    """First two columns, column-major: (r00, r10, r20, r01, r11, r21)."""
    rot = np.asarray(rot, dtype=np.float64)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def rot6d_to_matrix(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Gram-Schmidt decode of a 6-vector (or a batch of them).

    Raises :class:`DegenerateRot6DError` for a zero first column or parallel
    columns; ``index`` carries the offending batch position.
    """
    v = np.asarray(v, dtype=np.float64)
    a1, a2 = v[..., 0:3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    bad = n1[..., 0] <= eps
    b1 = a1 / np.where(n1 > eps, n1, 1.0)
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    bad |= n2[..., 0] <= eps * np.maximum(1.0, np.linalg.norm(a2, axis=-1))
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0]) if bad.ndim else ()
        raise DegenerateRot6DError(f"degenerate rot6d at index {idx}: zero or parallel columns", idx)
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


@dataclass
class MotionTheta:
    data: np.ndarray
    skeleton_id: str
    frame_time: float

    @property
    def num_frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.data.shape[1])

    def check(self, tol: float = 1e-4) -> None:
        """Assert the structural invariants (zero non-root translation, decodable rotations)."""
        if self.data.ndim != 3 or self.data.shape[2] != 9:
            raise ValueError(f"theta must be (T, J, 9), got {self.data.shape}")
        if np.any(self.data[:, 1:, :3] != 0):
            raise ValueError("non-root rows carry translation")
        R = rot6d_to_matrix(self.data[..., 3:])
        err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"orthonormality error {err:.3g} exceeds {tol}")


def theta_from_pose_sequence(skel: Skeleton, poses: PoseSequence, frame_time: float = 1 / 30) -> MotionTheta:
    T, J = poses.local_rotations.shape[:2]
    if J != skel.num_joints:
        raise ValueError(f"pose has {J} joints, skeleton has {skel.num_joints}")
    if T < 1:
        raise ValueError("need at least one frame")
    data = np.zeros((T, J, 9))
    data[1:, 0, :3] = np.diff(poses.root_positions, axis=0)
    # root has no parent, so its local rotation is its global orientation
    data[:, :, 3:] = rot6d_from_matrix(poses.local_rotations)
    return MotionTheta(data, skel.identity(), float(frame_time))


def pose_sequence_from_theta(skel: Skeleton, theta: MotionTheta, initial_root) -> PoseSequence:
    data = np.asarray(theta.data if isinstance(theta, MotionTheta) else theta, dtype=np.float64)
    if data.shape[1] != skel.num_joints:
        raise ValueError(f"theta has {data.shape[1]} joints, skeleton has {skel.num_joints}")
    try:
        rots = rot6d_to_matrix(data[..., 3:])
    except DegenerateRot6DError as exc:
        t, j = exc.index[:2]
        raise DegenerateRot6DError(f"degenerate rot6d block at frame {t}, joint {j}", (t, j)) from None
    root = np.asarray(initial_root, dtype=np.float64) + np.cumsum(data[:, 0, :3], axis=0)
    return PoseSequence(root, rots)


def augment_rest_pose(skel: Skeleton, poses: PoseSequence, anchor_frame: int) -> tuple[Skeleton, PoseSequence]:
    """Re-express a motion with frame ``anchor_frame`` as the new rest pose.

    New offsets are the anchor frame's world-space bone vectors. New global
    rotations are ``G_t @ inv(G_anchor)`` per joint, which leaves every
    joint's world trajectory unchanged; local rotations follow from the
    parent chain.
    """
    T = len(poses)
    if not 0 <= anchor_frame < T:
        raise IndexError(f"anchor frame {anchor_frame} outside [0, {T})")
    pos, rot = forward_kinematics(skel, poses)
    offsets = skel.rest_offsets.copy()
    par = np.asarray(skel.parents)
    offsets[1:] = pos[anchor_frame, 1:] - pos[anchor_frame, par[1:]]
    new_global = rot @ np.swapaxes(rot[anchor_frame], -1, -2)[None]
    local = np.empty_like(new_global)
    local[:, 0] = new_global[:, 0]
    local[:, 1:] = np.swapaxes(new_global[:, par[1:]], -1, -2) @ new_global[:, 1:]
    # end sites ride along rigidly with their parent
    end_sites = [(p, rot[anchor_frame, p] @ np.asarray(o)) for p, o in skel.end_sites]
    new_skel = Skeleton(list(skel.joint_names), list(skel.parents), offsets, end_sites)
    return new_skel, PoseSequence(poses.root_positions.copy(), local)
