import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvhtok.bvh_io import (
    BvhChannelCountError,
    BvhHeaderError,
    BvhMissingMotionError,
    BvhMultipleRootsError,
    axis_rotation,
    euler_to_matrix,
    euler_to_matrix_batch,
    matrix_to_euler,
    matrix_to_euler_batch,
    parse_bvh,
    write_bvh,
)
from conftest import ORDERS, documents_equal, random_document

TWO_JOINT = """HIERARCHY
ROOT Hips
{
  OFFSET 0.0 0.0 0.0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Spine
  {
    OFFSET 0.0 1.0 0.0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0.0 0.5 0.0
    }
  }
}
MOTION
Frames: 1
Frame Time: 0.0333333
0 0 0 0 0 0 0 0 0
"""


def test_two_joint_document():
    doc = parse_bvh(TWO_JOINT)
    assert doc.frame_count == 1
    assert doc.total_channels == 9
    assert [j.name for j in doc.joints] == ["Hips", "Spine", "Spine_end"]
    assert doc.joints[1].parent == 0
    assert doc.joints[2].is_end_site and doc.joints[2].channels == []
    assert doc.joints[1].rotation_order == "ZXY"


def test_crlf_tolerated():
    a = parse_bvh(TWO_JOINT)
    b = parse_bvh(TWO_JOINT.replace("\n", "\r\n"))
    assert documents_equal(a, b)


def test_frame_time_literal():
    chain = """HIERARCHY
ROOT a
{
OFFSET 0 0 0
CHANNELS 3 Xrotation Yrotation Zrotation
JOINT b
{
OFFSET 1 0 0
CHANNELS 3 Xrotation Yrotation Zrotation
JOINT c
{
OFFSET 1 0 0
CHANNELS 3 Xrotation Yrotation Zrotation
JOINT d
{
OFFSET 1 0 0
CHANNELS 3 Xrotation Yrotation Zrotation
}
}
}
}
MOTION
Frames: 2
Frame Time: 0.0333333
""" + "0 " * 12 + "\n" + "1 " * 12 + "\n"
    doc = parse_bvh(chain)
    assert abs(doc.frame_time - 0.0333333) <= 1e-9
    assert [j.parent for j in doc.joints] == [None, 0, 1, 2]


def test_channel_count_error():
    bad = TWO_JOINT.replace("0 0 0 0 0 0 0 0 0", "0 0 0 0 0 0 0 0")
    with pytest.raises(BvhChannelCountError) as exc:
        parse_bvh(bad)
    assert exc.value.section == "MOTION" and exc.value.line is not None


def test_missing_motion_error():
    with pytest.raises(BvhMissingMotionError):
        parse_bvh(TWO_JOINT.split("MOTION")[0])


def test_multiple_roots_error():
    root2 = TWO_JOINT.replace("MOTION", "ROOT Other\n{\nOFFSET 0 0 0\nCHANNELS 3 Xrotation Yrotation Zrotation\n}\nMOTION")
    with pytest.raises(BvhMultipleRootsError):
        parse_bvh(root2)


def test_malformed_header_error():
    with pytest.raises(BvhHeaderError):
        parse_bvh(TWO_JOINT.replace("OFFSET 0.0 1.0 0.0", "OFFSET 0.0 abc 0.0"))
    with pytest.raises(BvhHeaderError):
        parse_bvh(TWO_JOINT.replace("CHANNELS 3 Zrotation", "CHANNELS 3 Wrotation"))
    with pytest.raises(BvhHeaderError):
        parse_bvh("HIERARCH\n" + TWO_JOINT[len("HIERARCHY\n"):])


def test_errors_are_distinct_types():
    kinds = {BvhHeaderError, BvhChannelCountError, BvhMultipleRootsError, BvhMissingMotionError}
    assert len(kinds) == 4


def test_round_trip_two_joint():
    doc = parse_bvh(TWO_JOINT)
    again = parse_bvh(write_bvh(doc))
    assert documents_equal(doc, again, tol=0)


def test_write_format_tabs_and_decimals():
    text = write_bvh(parse_bvh(TWO_JOINT))
    assert "\tOFFSET 0.000000 1.000000 0.000000" in text
    assert "End Site" in text
    end_block = text.split("End Site")[1].split("}")[0]
    assert "CHANNELS" not in end_block
    assert "-0.000000" not in text


def test_round_trip_random_documents(rng):
    for _ in range(50):
        doc = random_document(rng)
        assert documents_equal(doc, parse_bvh(write_bvh(doc)))


def test_round_trip_50_frames(rng):
    doc = random_document(rng, max_frames=50)
    while doc.frame_count != 50:
        doc = random_document(rng, max_frames=50)
    again = parse_bvh(write_bvh(doc))
    assert np.abs(again.frames - doc.frames).max() <= 1e-6


def test_euler_identity():
    for order in ORDERS:
        assert np.allclose(euler_to_matrix((0, 0, 0), order), np.eye(3), atol=0)


def test_euler_zxy_x90():
    expected = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    assert np.allclose(euler_to_matrix((90, 0, 0), "ZXY"), expected, atol=1e-12)
    assert np.allclose(matrix_to_euler(expected, "ZXY"), (90, 0, 0), atol=1e-9)


def test_euler_composition_is_intrinsic_in_channel_order():
    # hand composition: R = R_Z(c) R_X(a) R_Y(b) for ZXY
    a, b, c = 10.0, 20.0, 30.0
    hand = axis_rotation("Z", np.radians(c)) @ axis_rotation("X", np.radians(a)) @ axis_rotation("Y", np.radians(b))
    assert np.allclose(euler_to_matrix((a, b, c), "ZXY"), hand, atol=1e-12)


def test_euler_round_trip_30_40_50():
    for order in ORDERS:
        ang = matrix_to_euler(euler_to_matrix((30, 40, 50), order), order)
        assert np.allclose(np.mod(ang - (30, 40, 50) + 180, 360) - 180, 0, atol=1e-6)


def test_order_sensitivity():
    mats = [euler_to_matrix((30, 40, 50), o) for o in ORDERS]
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            assert np.abs(mats[i] - mats[j]).max() > 1e-3


@pytest.mark.parametrize("order", ORDERS)
def test_gimbal_lock_tie_break(order):
    # middle axis at +-90 degrees puts the decomposition at lock
    mid = "XYZ".index(order[1])
    for sign in (1, -1):
        angles = np.zeros(3)
        angles["XYZ".index(order[0])] = 25.0
        angles["XYZ".index(order[2])] = 40.0
        angles[mid] = 90.0 * sign
        R = euler_to_matrix(angles, order)
        out = matrix_to_euler(R, order)
        assert out["XYZ".index(order[2])] == 0.0
        assert np.linalg.norm(euler_to_matrix(out, order) - R) <= 1e-6
        assert np.array_equal(out, matrix_to_euler(R, order))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-180, 180, allow_nan=False), min_size=3, max_size=3),
    st.sampled_from(ORDERS),
)
def test_euler_matrix_is_rotation_and_inverts(angles, order):
    R = euler_to_matrix(angles, order)
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-6
    assert abs(np.linalg.det(R) - 1) <= 1e-6
    back = euler_to_matrix(matrix_to_euler(R, order), order)
    assert np.linalg.norm(back - R) <= 1e-6


def test_batch_matches_scalar(rng):
    ang = rng.uniform(-180, 180, size=(20, 3))
    for order in ORDERS:
        batch = euler_to_matrix_batch(ang[:, ["XYZ".index(a) for a in order]], order)
        single = np.stack([euler_to_matrix(a, order) for a in ang])
        assert np.allclose(batch, single, atol=1e-12)
        e = matrix_to_euler_batch(batch, order)
        # both return angles indexed by axis (x, y, z)
        assert np.allclose(e, np.stack([matrix_to_euler(m, order) for m in single]), atol=1e-9)
