"""Reading and writing BVH motion capture files.

Angles are degrees on disk and radians in every other module of this package;
:func:`euler_to_matrix` / :func:`matrix_to_euler` are the only crossing points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")
POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
VALID_CHANNELS = frozenset(ROTATION_CHANNELS + POSITION_CHANNELS)
_AXIS_INDEX = {"X": 0, "Y": 1, "Z": 2}


class BvhError(ValueError):
    """Base class for BVH parse failures. ``line`` is 1-based, or None."""

    def __init__(self, message: str, line: Optional[int] = None, section: str = ""):
        self.line = line
        self.section = section
        where = []
        if section:
            where.append(section)
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class BvhHeaderError(BvhError):
    pass


class BvhChannelCountError(BvhError):
    pass


class BvhMultipleRootsError(BvhError):
    pass


class BvhMissingMotionError(BvhError):
    pass


@dataclass
class BvhJoint:
    name: str
    parent: Optional[int]
    offset: np.ndarray
    channels: list[str] = field(default_factory=list)
    is_end_site: bool = False

    @property
    def rotation_order(self) -> str:
        """Axis letters of the rotation channels in file order, e.g. ``"ZXY"``."""
        return "".join(c[0] for c in self.channels if c in ROTATION_CHANNELS)


@dataclass
class BvhDocument:
    joints: list[BvhJoint]
    frame_time: float
    frames: np.ndarray

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def total_channels(self) -> int:
        return sum(len(j.channels) for j in self.joints)

    def channel_slices(self) -> list[slice]:
        """Column range of each joint's channels inside a frame row."""
        out, start = [], 0
        for j in self.joints:
            out.append(slice(start, start + len(j.channels)))
            start += len(j.channels)
        return out

    def children(self, index: int) -> list[int]:
        return [i for i, j in enumerate(self.joints) if j.parent == index]

    def validate(self) -> None:
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if len(roots) != 1:
            raise BvhMultipleRootsError(f"expected exactly one root, found {len(roots)}", section="HIERARCHY")
        for j in self.joints:
            if j.is_end_site and j.channels:
                raise BvhHeaderError(f"end site {j.name!r} carries channels", section="HIERARCHY")
        if self.frames.ndim != 2 or self.frames.shape[1] != self.total_channels:
            raise BvhChannelCountError(
                f"frame matrix shape {self.frames.shape} does not match {self.total_channels} channels",
                section="MOTION",
            )


class _Lines:
    """Cursor over non-empty lines that remembers 1-based line numbers."""

    def __init__(self, text: str):
        self.items = [
            (n + 1, line.split())
            for n, line in enumerate(text.replace("\r\n", "\n").replace("\r", "\n").split("\n"))
            if line.strip()
        ]
        self.pos = 0

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else (None, None)

    def next(self, section: str):
        if self.pos >= len(self.items):
            raise BvhHeaderError("unexpected end of file", section=section)
        item = self.items[self.pos]
        self.pos += 1
        return item

    @property
    def last_line(self) -> Optional[int]:
        return self.items[-1][0] if self.items else None


def _parse_floats(tokens: Sequence[str], lineno: int, section: str) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise BvhHeaderError(f"expected numbers, got {' '.join(tokens)!r}", lineno, section) from None


def _parse_joint(lines: _Lines, joints: list[BvhJoint], parent: Optional[int], name: str, is_end: bool) -> None:
    lineno, tok = lines.next("HIERARCHY")
    if tok != ["{"]:
        raise BvhHeaderError(f"expected '{{' after joint {name!r}", lineno, "HIERARCHY")
    lineno, tok = lines.next("HIERARCHY")
    if tok[0] != "OFFSET" or len(tok) != 4:
        raise BvhHeaderError(f"expected 'OFFSET x y z' in joint {name!r}", lineno, "HIERARCHY")
    offset = np.array(_parse_floats(tok[1:], lineno, "HIERARCHY"), dtype=np.float64)
    channels: list[str] = []
    index = len(joints)
    joints.append(BvhJoint(name, parent, offset, channels, is_end))
    lineno, tok = lines.next("HIERARCHY")
    if tok[0] == "CHANNELS":
        if is_end:
            raise BvhHeaderError("End Site cannot declare CHANNELS", lineno, "HIERARCHY")
        try:
            n = int(tok[1])
        except (IndexError, ValueError):
            raise BvhHeaderError("malformed CHANNELS line", lineno, "HIERARCHY") from None
        if len(tok) - 2 != n:
            raise BvhHeaderError(f"CHANNELS declares {n} but lists {len(tok) - 2}", lineno, "HIERARCHY")
        for c in tok[2:]:
            if c not in VALID_CHANNELS:
                raise BvhHeaderError(f"unknown channel {c!r}", lineno, "HIERARCHY")
        if len(set(tok[2:])) != n:
            raise BvhHeaderError("duplicate channel", lineno, "HIERARCHY")
        channels.extend(tok[2:])
        lineno, tok = lines.next("HIERARCHY")
    while tok != ["}"]:
        if tok[0] == "JOINT" and len(tok) >= 2 and not is_end:
            _parse_joint(lines, joints, index, " ".join(tok[1:]), False)
        elif tok[:2] == ["End", "Site"] and not is_end:
            _parse_joint(lines, joints, index, f"{name}_end", True)
        else:
            raise BvhHeaderError(f"unexpected {' '.join(tok)!r} in joint {name!r}", lineno, "HIERARCHY")
        lineno, tok = lines.next("HIERARCHY")


def parse_bvh(text: str) -> BvhDocument:
    """Parse BVH text into a :class:`BvhDocument`.

    Joints (end sites included) are listed in depth-first file order.
    End sites are named ``<parent>_end``.
    """
    lines = _Lines(text)
    lineno, tok = lines.next("HIERARCHY")
    if tok != ["HIERARCHY"]:
        raise BvhHeaderError("file must start with HIERARCHY", lineno, "HIERARCHY")
    joints: list[BvhJoint] = []
    lineno, tok = lines.next("HIERARCHY")
    if tok[0] != "ROOT" or len(tok) < 2:
        raise BvhHeaderError("expected ROOT", lineno, "HIERARCHY")
    _parse_joint(lines, joints, None, " ".join(tok[1:]), False)

    lineno, tok = lines.peek()
    if tok is not None and tok[0] == "ROOT":
        raise BvhMultipleRootsError("second ROOT found; only single-rooted hierarchies are supported", lineno, "HIERARCHY")
    if tok is None or tok != ["MOTION"]:
        raise BvhMissingMotionError("MOTION section missing", lineno if tok is not None else lines.last_line, "MOTION")
    lines.next("MOTION")

    lineno, tok = lines.next("MOTION")
    if len(tok) != 2 or tok[0] != "Frames:":
        raise BvhHeaderError("expected 'Frames: N'", lineno, "MOTION")
    try:
        frame_count = int(tok[1])
    except ValueError:
        raise BvhHeaderError(f"bad frame count {tok[1]!r}", lineno, "MOTION") from None
    if frame_count < 0:
        raise BvhHeaderError("negative frame count", lineno, "MOTION")
    lineno, tok = lines.next("MOTION")
    if len(tok) != 3 or tok[:2] != ["Frame", "Time:"]:
        raise BvhHeaderError("expected 'Frame Time: dt'", lineno, "MOTION")
    frame_time = _parse_floats(tok[2:], lineno, "MOTION")[0]
    if not frame_time > 0:
        raise BvhHeaderError("frame time must be positive", lineno, "MOTION")

    n_channels = sum(len(j.channels) for j in joints)
    frames = np.zeros((frame_count, n_channels), dtype=np.float64)
    for f in range(frame_count):
        lineno, tok = lines.peek()
        if tok is None:
            raise BvhChannelCountError(
                f"expected {frame_count} frames, found {f}", lines.last_line, "MOTION"
            )
        lines.next("MOTION")
        if len(tok) != n_channels:
            raise BvhChannelCountError(
                f"frame {f} has {len(tok)} values but {n_channels} channels are declared", lineno, "MOTION"
            )
        frames[f] = _parse_floats(tok, lineno, "MOTION")
    lineno, tok = lines.peek()
    if tok is not None:
        raise BvhChannelCountError(f"more frame rows than the declared {frame_count}", lineno, "MOTION")

    doc = BvhDocument(joints, frame_time, frames)
    doc.validate()
    return doc


def _fmt(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_bvh(doc: BvhDocument) -> str:
    """Serialize with tab indentation and 6 decimal places.

    Frame time is written with ``repr`` so it round-trips exactly.
    """
    out = ["HIERARCHY"]

    def emit(index: int, depth: int) -> None:
        j = doc.joints[index]
        pad = "\t" * depth
        if j.is_end_site:
            out.append(f"{pad}End Site")
        elif j.parent is None:
            out.append(f"{pad}ROOT {j.name}")
        else:
            out.append(f"{pad}JOINT {j.name}")
        out.append(f"{pad}{{")
        out.append(f"{pad}\tOFFSET {' '.join(_fmt(v) for v in j.offset)}")
        if not j.is_end_site:
            out.append(f"{pad}\tCHANNELS {len(j.channels)}" + "".join(f" {c}" for c in j.channels))
        for c in doc.children(index):
            emit(c, depth + 1)
        out.append(f"{pad}}}")

    root = next(i for i, j in enumerate(doc.joints) if j.parent is None)
    emit(root, 0)
    out.append("MOTION")
    out.append(f"Frames: {doc.frame_count}")
    out.append(f"Frame Time: {doc.frame_time!r}")
    for row in doc.frames:
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def read_bvh(path) -> BvhDocument:
    with open(path, encoding="utf-8") as fh:
        return parse_bvh(fh.read())


def save_bvh(doc: BvhDocument, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_bvh(doc))


# ---------------------------------------------------------------- rotations

def _check_order(order: str) -> str:
    order = order.upper()
    if sorted(order) != ["X", "Y", "Z"]:
        raise ValueError(f"rotation order must be a permutation of XYZ, got {order!r}")
    return order


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    """Right-handed rotation by ``angle`` radians about a principal axis."""
    c, s = np.cos(angle), np.sin(angle)
    i = _AXIS_INDEX[axis]
    j, k = (i + 1) % 3, (i + 2) % 3
    m = np.eye(3)
    m[j, j] = c
    m[j, k] = -s
    m[k, j] = s
    m[k, k] = c
    return m


def euler_to_matrix(angles_deg: Sequence[float], order: str) -> np.ndarray:
    """Rotation matrix from (x, y, z) angles in degrees.

    ``angles_deg`` is indexed by axis, not by position in ``order``. The
    rotations are intrinsic and compose in channel order:
    ``R = R_order[0] @ R_order[1] @ R_order[2]``.
    """
    order = _check_order(order)
    rad = np.radians(np.asarray(angles_deg, dtype=np.float64))
    m = np.eye(3)
    for axis in order:
        m = m @ axis_rotation(axis, rad[_AXIS_INDEX[axis]])
    return m


def euler_to_matrix_batch(angles_deg: np.ndarray, order: str) -> np.ndarray:
    """Vectorised :func:`euler_to_matrix` over leading dimensions.

    ``order`` may name fewer than three axes (joints with partial rotation
    channels); ``angles_deg[..., n]`` is then the angle of ``order[n]``.
    """
    angles = np.radians(np.asarray(angles_deg, dtype=np.float64))
    shape = angles.shape[:-1]
    m = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
    for n, axis in enumerate(order.upper()):
        a = angles[..., n]
        c, s = np.cos(a), np.sin(a)
        i = _AXIS_INDEX[axis]
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.zeros(shape + (3, 3))
        r[..., i, i] = 1.0
        r[..., j, j] = c
        r[..., j, k] = -s
        r[..., k, j] = s
        r[..., k, k] = c
        m = m @ r
    return m


def matrix_to_euler(rot: np.ndarray, order: str) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`; returns (x, y, z) degrees.

    The middle angle lies in [-90, 90]. At gimbal lock the third angle (in
    composition order) is set to 0 and the first absorbs the remainder.
    """
    return matrix_to_euler_batch(np.asarray(rot, dtype=np.float64)[None], order)[0]


def matrix_to_euler_batch(rot: np.ndarray, order: str, lock_eps: float = 1e-9) -> np.ndarray:
    order = _check_order(order)
    i, j, k = (_AXIS_INDEX[a] for a in order)
    # +1 for cyclic orders (XYZ, YZX, ZXY)
    s = 1.0 if (j - i) % 3 == 1 else -1.0
    rot = np.asarray(rot, dtype=np.float64)
    cos_b = np.hypot(rot[..., i, i], rot[..., i, j])
    b = np.arctan2(s * rot[..., i, k], cos_b)
    a = np.arctan2(-s * rot[..., j, k], rot[..., k, k])
    c = np.arctan2(-s * rot[..., i, j], rot[..., i, i])
    lock = cos_b < lock_eps
    if np.any(lock):
        a = np.where(lock, np.arctan2(s * rot[..., k, j], rot[..., j, j]), a)
        c = np.where(lock, 0.0, c)
    out = np.empty(rot.shape[:-2] + (3,))
    out[..., i] = a
    out[..., j] = b
    out[..., k] = c
    return np.degrees(out)
