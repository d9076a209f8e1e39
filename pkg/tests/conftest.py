import numpy as np
import pytest
import torch

from bvhtok.bvh_io import euler_to_matrix_batch
from bvhtok.skeleton import PoseSequence, Skeleton


def random_parents(rng, n):
    return [-1] + [int(rng.integers(0, j)) for j in range(1, n)]


def random_skeleton(rng, n, names=None):
    offsets = rng.normal(size=(n, 3))
    return Skeleton(names or [f"j{j}" for j in range(n)], random_parents(rng, n), offsets)


def random_rotations(rng, shape):
    angles = rng.uniform(-180, 180, size=(int(np.prod(shape)), 3))
    return euler_to_matrix_batch(angles, "XYZ").reshape(*shape, 3, 3)


def random_poses(rng, skel, T):
    return PoseSequence(rng.normal(size=(T, 3)), random_rotations(rng, (T, skel.num_joints)))


def path_fk_oracle(skel, root_position, local):
    """Positions by multiplying transforms along each root-to-joint path."""
    J = skel.num_joints
    out = np.zeros((J, 3))
    for j in range(J):
        path = [j]
        while skel.parents[path[-1]] >= 0:
            path.append(skel.parents[path[-1]])
        path = path[::-1]
        R = np.eye(3)
        p = np.array(root_position, dtype=float)
        for a, b in zip(path[:-1], path[1:]):
            R = R @ local[a]
            p = p + R @ skel.rest_offsets[b]
        out[j] = p
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


ORDERS = ["XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX"]


def random_document(rng, max_joints=8, max_frames=50):
    """Random BVH document: random tree, random channel layouts, end sites on leaves."""
    from bvhtok.bvh_io import BvhDocument, BvhJoint

    n = int(rng.integers(1, max_joints + 1))
    parents = random_parents(rng, n)
    joints = []
    # emit depth-first so that file order matches the parser's order
    children = {j: [c for c in range(n) if parents[c] == j] for j in range(n)}

    def add(j, parent_doc):
        order = ORDERS[int(rng.integers(6))]
        chans = [f"{a}rotation" for a in order]
        if j == 0 or rng.random() < 0.2:
            chans = ["Xposition", "Yposition", "Zposition"] + chans
        joints.append(BvhJoint(f"joint_{j}", parent_doc, rng.normal(size=3) * 10, chans))
        me = len(joints) - 1
        for c in children[j]:
            add(c, me)
        if not children[j]:
            joints.append(BvhJoint(f"joint_{j}_end", me, rng.normal(size=3), [], True))

    add(0, None)
    T = int(rng.integers(1, max_frames + 1))
    total = sum(len(j.channels) for j in joints)
    frames = rng.uniform(-180, 180, size=(T, total))
    return BvhDocument(joints, float(rng.uniform(0.005, 0.1)), frames)


def documents_equal(a, b, tol=1e-6):
    if len(a.joints) != len(b.joints) or a.frames.shape != b.frames.shape:
        return False
    for x, y in zip(a.joints, b.joints):
        if (x.name, x.parent, x.channels, x.is_end_site) != (y.name, y.parent, y.channels, y.is_end_site):
            return False
        if np.abs(x.offset - y.offset).max() > tol:
            return False
    if abs(a.frame_time - b.frame_time) > 1e-12:
        return False
    return a.frames.size == 0 or np.abs(a.frames - b.frames).max() <= tol


def scale_bone(path, factor=1000.0):
    """Rewrite a BVH file with the first non-root joint's offset multiplied by ``factor``."""
    from bvhtok.bvh_io import parse_bvh, write_bvh

    doc = parse_bvh(open(path, encoding="utf-8").read())
    j = next(i for i, jt in enumerate(doc.joints) if jt.parent is not None and not jt.is_end_site)
    doc.joints[j].offset = doc.joints[j].offset * factor
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_bvh(doc))
    return doc.joints[j].name


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
