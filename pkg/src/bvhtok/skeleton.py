"""Kinematic trees: forward kinematics, LCA queries and BVH canonicalization."""
from __future__ import annotations

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Iterator, Optional, Union

import numpy as np

from .bvh_io import (
    POSITION_CHANNELS,
    ROTATION_CHANNELS,
    BvhDocument,
    BvhJoint,
    euler_to_matrix_batch,
    matrix_to_euler_batch,
)

log = logging.getLogger(__name__)


@dataclass
class Skeleton:
    """Rest pose of an articulated tree.

    ``parents[0] == -1`` and ``parents[j] < j`` for every other joint, so index
    order is always a valid top-down traversal. ``rest_offsets[j]`` is the
    offset from the parent (for the root: its rest position). End sites are
    kept only so that BVH output can reproduce them.
    """

    joint_names: list[str]
    parents: list[int]
    rest_offsets: np.ndarray
    end_sites: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64).reshape(-1, 3)
        self.parents = [int(p) for p in self.parents]
        J = len(self.parents)
        if J < 1:
            raise ValueError("skeleton needs at least one joint")
        if len(self.joint_names) != J or self.rest_offsets.shape[0] != J:
            raise ValueError(
                f"inconsistent sizes: {len(self.joint_names)} names, {J} parents, "
                f"{self.rest_offsets.shape[0]} offsets"
            )
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, J):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"joint {j} has parent {self.parents[j]}; parents must precede children")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def children(self, j: int) -> list[int]:
        return [c for c in range(self.num_joints) if self.parents[c] == j]

    def depths(self) -> np.ndarray:
        d = np.zeros(self.num_joints, dtype=np.int64)
        for j in range(1, self.num_joints):
            d[j] = d[self.parents[j]] + 1
        return d

    def identity(self) -> str:
        """Content hash of names, topology and offsets."""
        h = hashlib.sha1()
        h.update("\x1f".join(self.joint_names).encode())
        h.update(np.asarray(self.parents, dtype=np.int64).tobytes())
        h.update(np.round(self.rest_offsets, 9).tobytes())
        return h.hexdigest()[:16]

    def scaled(self, factor: float) -> "Skeleton":
        return Skeleton(
            list(self.joint_names),
            list(self.parents),
            self.rest_offsets * factor,
            [(p, o * factor) for p, o in self.end_sites],
        )


@dataclass
class PoseFrame:
    root_position: np.ndarray
    local_rotations: np.ndarray


@dataclass
class PoseSequence:
    """T frames stacked: ``root_positions`` (T, 3), ``local_rotations`` (T, J, 3, 3)."""

    root_positions: np.ndarray
    local_rotations: np.ndarray

    def __len__(self) -> int:
        return int(self.root_positions.shape[0])

    def __getitem__(self, t: int) -> PoseFrame:
        return PoseFrame(self.root_positions[t], self.local_rotations[t])

    def __iter__(self) -> Iterator[PoseFrame]:
        return (self[t] for t in range(len(self)))

    @classmethod
    def from_frames(cls, frames: Iterable[PoseFrame]) -> "PoseSequence":
        frames = list(frames)
        return cls(
            np.stack([f.root_position for f in frames]),
            np.stack([f.local_rotations for f in frames]),
        )

    @classmethod
    def rest(cls, skel: Skeleton, n_frames: int = 1) -> "PoseSequence":
        rots = np.broadcast_to(np.eye(3), (n_frames, skel.num_joints, 3, 3)).copy()
        return cls(np.tile(skel.rest_offsets[0], (n_frames, 1)), rots)


Pose = Union[PoseFrame, PoseSequence]


def _pose_arrays(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pose, PoseFrame):
        return np.asarray(pose.root_position), np.asarray(pose.local_rotations)
    return np.asarray(pose.root_positions), np.asarray(pose.local_rotations)


def forward_kinematics(skel: Skeleton, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Global positions (..., J, 3) and rotations (..., J, 3, 3).

    Works on a single :class:`PoseFrame` or a whole :class:`PoseSequence`.
    """
    root, local = _pose_arrays(pose)
    J = skel.num_joints
    if local.shape[-3] != J:
        raise ValueError(f"pose has {local.shape[-3]} joints, skeleton has {J}")
    rot = np.empty_like(local, dtype=np.float64)
    pos = np.empty(local.shape[:-2] + (3,), dtype=np.float64)
    rot[..., 0, :, :] = local[..., 0, :, :]
    pos[..., 0, :] = root
    for j in range(1, J):
        p = skel.parents[j]
        rot[..., j, :, :] = rot[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + rot[..., p, :, :] @ skel.rest_offsets[j]
    return pos, rot


def rest_positions(skel: Skeleton) -> np.ndarray:
    """Joint positions of the rest pose (all local rotations identity)."""
    pos = np.empty((skel.num_joints, 3))
    pos[0] = skel.rest_offsets[0]
    for j in range(1, skel.num_joints):
        pos[j] = pos[skel.parents[j]] + skel.rest_offsets[j]
    return pos


# ------------------------------------------------------------------ LCA

def lca(skel: Skeleton, i: int, j: int) -> int:
    """Deepest common ancestor; every joint is its own ancestor."""
    depth = skel.depths()
    while depth[i] > depth[j]:
        i = skel.parents[i]
    while depth[j] > depth[i]:
        j = skel.parents[j]
    while i != j:
        i, j = skel.parents[i], skel.parents[j]
    return i


def lca_matrix(skel: Skeleton) -> np.ndarray:
    """All-pairs LCA table, (J, J) ints."""
    J = skel.num_joints
    depth = skel.depths()
    out = np.empty((J, J), dtype=np.int64)
    for i in range(J):
        for j in range(i, J):
            a, b = i, j
            while depth[a] > depth[b]:
                a = skel.parents[a]
            while depth[b] > depth[a]:
                b = skel.parents[b]
            while a != b:
                a, b = skel.parents[a], skel.parents[b]
            out[i, j] = out[j, i] = a
    return out


class InconsistentLCAError(ValueError):
    def __init__(self, group, step: str):
        self.group = list(group)
        super().__init__(f"LCA answers are not consistent with any tree ({step}) in group {self.group}")


def reconstruct_tree_from_lca(
    node_ids: Iterable[Hashable], oracle: Callable[[Hashable, Hashable], Hashable]
) -> dict:
    """Recover ``{child: parent}`` using only pairwise LCA answers.

    The group is scanned for its local root (the node that is the LCA of
    itself with every other member), the rest is partitioned into the root's
    child subtrees (two nodes share a subtree iff their LCA is not the root),
    and each subtree is solved the same way. Raises
    :class:`InconsistentLCAError` when some group has no valid root.
    """
    nodes = list(node_ids)
    parent: dict = {}
    if not nodes:
        return parent

    def find_root(group: list):
        for cand in group:
            if all(oracle(cand, v) == cand for v in group if v != cand):
                return cand
        raise InconsistentLCAError(group, "no node passes the root test")

    stack = [(None, nodes)]
    while stack:
        above, group = stack.pop()
        root = find_root(group)
        if above is not None:
            parent[root] = above
        rest = [v for v in group if v != root]
        # union-find over "LCA is not the root"
        label = {v: v for v in rest}

        def find(v):
            while label[v] != v:
                label[v] = label[label[v]]
                v = label[v]
            return v

        for a in range(len(rest)):
            for b in range(a + 1, len(rest)):
                u, v = rest[a], rest[b]
                if oracle(u, v) != root:
                    ru, rv = find(u), find(v)
                    if ru != rv:
                        label[rv] = ru
        groups: dict = {}
        for v in rest:
            groups.setdefault(find(v), []).append(v)
        for members in groups.values():
            stack.append((root, members))
    return parent


# ------------------------------------------------------------- diameter

def chain_lengths(skel: Skeleton) -> np.ndarray:
    """Root-to-joint path length of every joint, root offset excluded."""
    bone = np.linalg.norm(skel.rest_offsets, axis=1)
    out = np.zeros(skel.num_joints)
    for j in range(1, skel.num_joints):
        out[j] = out[skel.parents[j]] + bone[j]
    return out


def skeleton_diameter(skel: Skeleton) -> float:
    """Length of the longest root-to-leaf offset chain."""
    return float(chain_lengths(skel).max())


def leave_one_out_diameters(skel: Skeleton) -> np.ndarray:
    """Diameter recomputed with each bone's length set to zero (index 0 unused)."""
    bone = np.linalg.norm(skel.rest_offsets, axis=1)
    out = np.zeros(skel.num_joints)
    for b in range(1, skel.num_joints):
        lengths = bone.copy()
        lengths[b] = 0.0
        acc = np.zeros(skel.num_joints)
        for j in range(1, skel.num_joints):
            acc[j] = acc[skel.parents[j]] + lengths[j]
        out[b] = acc.max()
    return out


# ------------------------------------------------------- canonicalization

class CanonicalizationRejected(Exception):
    def __init__(self, step: str, reason: str):
        self.step = step
        self.reason = reason
        super().__init__(f"{step}: {reason}")


@dataclass
class CanonConfig:
    bone_ratio: float = 10.0
    # "fold": fold constant mid-chain translations into the offset, reject varying ones
    # "fold_mean": always fold the mean translation; "reject": any mid-chain translation rejects
    translation_policy: str = "fold"
    translation_tolerance: float = 1e-6
    reroot: Optional[str] = None
    # a diameter already within this distance of 1 is left unscaled
    scale_tolerance: float = 0.0
    smoothing_window: int = 0


@dataclass
class CanonicalMotion:
    skeleton: Skeleton
    poses: PoseSequence
    frame_time: float
    scale: float


def smooth_euler_channels(doc: BvhDocument, window: int) -> np.ndarray:
    """Centered moving average over rotation channels; edges are clamped."""
    frames = doc.frames.copy()
    if window <= 1 or doc.frame_count < 2:
        return frames
    half = window // 2
    cols = [c for sl, j in zip(doc.channel_slices(), doc.joints)
            for c, name in zip(range(sl.start, sl.stop), j.channels) if name in ROTATION_CHANNELS]
    if not cols:
        return frames
    x = frames[:, cols]
    padded = np.concatenate([np.repeat(x[:1], half, 0), x, np.repeat(x[-1:], half, 0)])
    kernel = np.ones(window) / window
    sm = np.stack([np.convolve(padded[:, i], kernel, mode="valid") for i in range(x.shape[1])], axis=1)
    frames[:, cols] = sm[: doc.frame_count]
    return frames


def document_to_motion(doc: BvhDocument, config: Optional[CanonConfig] = None) -> tuple[Skeleton, PoseSequence]:
    """Convert a BVH document to (Skeleton, PoseSequence) without rescaling.

    Position channels are additive to OFFSET. Mid-chain translations are
    handled per ``config.translation_policy``.
    """
    config = config or CanonConfig()
    frames = smooth_euler_channels(doc, config.smoothing_window) if config.smoothing_window > 1 else doc.frames
    T = doc.frame_count
    slices = doc.channel_slices()
    keep = [i for i, j in enumerate(doc.joints) if not j.is_end_site]
    if not keep:
        raise CanonicalizationRejected("prune", "empty skeleton after end-site pruning")
    remap = {old: new for new, old in enumerate(keep)}
    names, parents, offsets = [], [], []
    local = np.empty((T, len(keep), 3, 3))
    root_positions = None
    for old in keep:
        joint = doc.joints[old]
        block = frames[:, slices[old]]
        trans = np.zeros((T, 3))
        has_trans = False
        rot_cols, rot_axes = [], ""
        for c, ch in enumerate(joint.channels):
            if ch in POSITION_CHANNELS:
                trans[:, POSITION_CHANNELS.index(ch)] = block[:, c]
                has_trans = True
            else:
                rot_cols.append(c)
                rot_axes += ch[0]
        local[:, remap[old]] = euler_to_matrix_batch(block[:, rot_cols], rot_axes)
        offset = joint.offset.astype(np.float64).copy()
        if joint.parent is None:
            root_positions = offset[None, :] + trans
        elif has_trans:
            offset = offset + _fold_translation(joint, trans, config)
        names.append(joint.name)
        parents.append(-1 if joint.parent is None else remap[joint.parent])
        offsets.append(offset)
    if keep[0] != next(i for i, j in enumerate(doc.joints) if j.parent is None):
        raise CanonicalizationRejected("prune", "root is not the first joint")
    end_sites = [(remap[j.parent], j.offset.astype(np.float64).copy())
                 for j in doc.joints if j.is_end_site]
    skel = Skeleton(names, parents, np.array(offsets), end_sites)
    return skel, PoseSequence(root_positions, local)


def _fold_translation(joint: BvhJoint, trans: np.ndarray, config: CanonConfig) -> np.ndarray:
    policy = config.translation_policy
    if policy == "reject":
        raise CanonicalizationRejected("translation", f"joint {joint.name!r} carries translation channels")
    if len(trans) == 0:
        return np.zeros(3)
    if policy == "fold_mean":
        return trans.mean(axis=0)
    if policy != "fold":
        raise ValueError(f"unknown translation policy {policy!r}")
    drift = np.abs(trans - trans[0]).max()
    if drift > config.translation_tolerance:
        raise CanonicalizationRejected(
            "translation", f"joint {joint.name!r} translation varies by {drift:.6g} across frames"
        )
    return trans[0]


def canonicalize(doc: BvhDocument, config: Optional[CanonConfig] = None) -> CanonicalMotion:
    """Root re-orientation, translation folding, bone filtering and unit-diameter scaling.

    Raises :class:`CanonicalizationRejected` naming the failing step.
    """
    config = config or CanonConfig()
    skel, poses = document_to_motion(doc, config)
    if config.reroot:
        skel, poses = reroot(skel, poses, config.reroot)
    diameter = skeleton_diameter(skel)
    if not diameter > 0:
        raise CanonicalizationRejected("scale", "skeleton diameter is zero")
    bones = np.linalg.norm(skel.rest_offsets[1:], axis=1)
    loo = leave_one_out_diameters(skel)[1:]
    for b, (length, ref) in enumerate(zip(bones, loo), start=1):
        if ref > 0 and length > config.bone_ratio * ref:
            raise CanonicalizationRejected(
                "bone_length",
                f"bone {skel.joint_names[b]!r} is {length / ref:.3g}x the diameter of the remaining skeleton "
                f"(limit {config.bone_ratio:g})",
            )
    scale = 1.0 if abs(diameter - 1.0) <= config.scale_tolerance else 1.0 / diameter
    if scale != 1.0:
        skel = skel.scaled(scale)
        poses = PoseSequence(poses.root_positions * scale, poses.local_rotations)
    return CanonicalMotion(skel, poses, doc.frame_time, scale)


def motion_to_document(
    skel: Skeleton, poses: PoseSequence, frame_time: float, rotation_order: str = "ZXY"
) -> BvhDocument:
    """Inverse of :func:`document_to_motion` for canonical skeletons."""
    rot_ch = [f"{a}rotation" for a in rotation_order]
    joints: list[BvhJoint] = []
    order_of: dict[int, int] = {}

    def add(j: int, parent_doc: Optional[int]) -> None:
        chans = (list(POSITION_CHANNELS) if j == 0 else []) + rot_ch
        order_of[j] = len(joints)
        joints.append(BvhJoint(skel.joint_names[j], parent_doc, skel.rest_offsets[j].copy(), chans))
        me = order_of[j]
        for c in skel.children(j):
            add(c, me)
        for p, off in skel.end_sites:
            if p == j:
                joints.append(BvhJoint(f"{skel.joint_names[j]}_end", me, np.asarray(off, dtype=np.float64).copy(), [], True))

    add(0, None)
    T = len(poses)
    J = skel.num_joints
    euler = matrix_to_euler_batch(poses.local_rotations.reshape(-1, 3, 3), rotation_order).reshape(T, J, 3)
    axis_cols = ["XYZ".index(a) for a in rotation_order]
    frames = np.zeros((T, sum(len(j.channels) for j in joints)))
    col = 0
    doc_to_skel = {v: k for k, v in order_of.items()}
    for d, joint in enumerate(joints):
        if joint.is_end_site:
            continue
        j = doc_to_skel[d]
        if j == 0:
            frames[:, col:col + 3] = poses.root_positions - skel.rest_offsets[0]
            col += 3
        frames[:, col:col + 3] = euler[:, j][:, axis_cols]
        col += 3
    return BvhDocument(joints, float(frame_time), frames)


# ---------------------------------------------------------------- reroot

def _min_rotation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest rotation taking direction u to direction v, batched (..., 3)."""
    u = u / np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-300)
    v = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-300)
    axis = np.cross(u, v)
    s = np.linalg.norm(axis, axis=-1)
    c = np.sum(u * v, axis=-1)
    anti = (s < 1e-12) & (c < 0)
    if np.any(anti):
        helper = np.where(np.abs(u[..., :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        perp = np.cross(u, helper)
        axis = np.where(anti[..., None], perp, axis)
        s = np.where(anti, np.linalg.norm(axis, axis=-1), s)
    k = axis / np.maximum(s, 1e-300)[..., None]
    angle = np.arctan2(s, c)
    K = np.zeros(u.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    sa, ca = np.sin(angle)[..., None, None], np.cos(angle)[..., None, None]
    return np.eye(3) + sa * K + (1 - ca) * (K @ K)


def _fit_rotation(ref: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation G (T, 3, 3) with G @ a[c] ~= b[:, c]; ties resolved toward ``ref``."""
    if a.shape[0] == 0:
        return ref
    sv = np.linalg.svd(a, compute_uv=False)
    if a.shape[0] == 1 or sv[1] <= 1e-9 * sv[0]:
        u = ref @ a[0]
        return _min_rotation(u, b[:, 0]) @ ref
    H = np.einsum("ci,tcj->tij", a, b)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.broadcast_to(np.eye(3), H.shape).copy()
    D[:, 2, 2] = d
    return np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)


def reroot(skel: Skeleton, poses: PoseSequence, joint_name: str) -> tuple[Skeleton, PoseSequence]:
    """Make ``joint_name`` the root, reversing the path above it.

    World positions are preserved exactly wherever a joint's outgoing bones
    stay rigid relative to each other; elsewhere each joint rotation is the
    least-squares fit to its child bones.
    """
    if joint_name not in skel.joint_names:
        raise CanonicalizationRejected("reroot", f"no joint named {joint_name!r}")
    n = skel.joint_names.index(joint_name)
    if n == 0:
        return skel, poses
    pos, rot = forward_kinematics(skel, poses)
    rest = rest_positions(skel)
    J = skel.num_joints
    nbrs: list[list[int]] = [[] for _ in range(J)]
    for j in range(1, J):
        nbrs[j].append(skel.parents[j])
        nbrs[skel.parents[j]].append(j)
    order, bfs_parent = [n], {n: -1}
    queue = deque([n])
    while queue:
        q = queue.popleft()
        for c in sorted(nbrs[q]):
            if c not in bfs_parent:
                bfs_parent[c] = q
                order.append(c)
                queue.append(c)
    new_idx = {old: new for new, old in enumerate(order)}
    parents = [-1 if bfs_parent[q] < 0 else new_idx[bfs_parent[q]] for q in order]
    offsets = np.array([rest[q] if bfs_parent[q] < 0 else rest[q] - rest[bfs_parent[q]] for q in order])
    new_children = {q: [c for c in order if bfs_parent[c] == q] for q in order}
    glob = np.empty((len(poses), J, 3, 3))
    for q in order:
        kids = new_children[q]
        a = np.array([rest[c] - rest[q] for c in kids]).reshape(-1, 3)
        b = np.stack([pos[:, c] - pos[:, q] for c in kids], axis=1) if kids else np.zeros((len(poses), 0, 3))
        glob[:, new_idx[q]] = _fit_rotation(rot[:, q], a, b)
    local = np.empty_like(glob)
    local[:, 0] = glob[:, 0]
    for j in range(1, J):
        local[:, j] = np.swapaxes(glob[:, parents[j]], -1, -2) @ glob[:, j]
    new_skel = Skeleton(
        [skel.joint_names[q] for q in order],
        parents,
        offsets,
        [(new_idx[p], o) for p, o in skel.end_sites],
    )
    return new_skel, PoseSequence(pos[:, n].copy(), local)
