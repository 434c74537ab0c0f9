import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import matrix_oracle, pose_close, pose_from_matrix_oracle, poses, random_pose, vec3
from mvsceneflow.geometry import (
    Frame,
    Point3,
    Pose,
    TangentDelta,
    apply,
    compose,
    inverse,
    local,
    quat_exp,
    quat_log,
    retract,
    rigid_align,
)

I = Pose.identity()


def test_identity_composition():
    assert pose_close(compose(I, I), I, 0.0)


def test_rotation_after_translation_moves_origin():
    rz = Pose.from_rotvec((0, 0, np.pi / 2))
    tx = Pose(I.q, (1.0, 0.0, 0.0))
    np.testing.assert_allclose(compose(rz, tx).transform(np.zeros(3)), [0.0, 1.0, 0.0], atol=1e-15)


def test_compose_matches_matrix_product(rng):
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(compose(a, b).as_matrix(), matrix_oracle(a) @ matrix_oracle(b), atol=1e-12)


def test_inverse_examples(rng):
    assert pose_close(inverse(I), I, 0.0)
    np.testing.assert_array_equal(inverse(Pose(I.q, (1, 2, 3))).t, [-1, -2, -3])
    for _ in range(50):
        a = random_pose(rng)
        oracle = pose_from_matrix_oracle(np.linalg.inv(matrix_oracle(a)))
        assert pose_close(inverse(a), oracle, 1e-12)
        assert pose_close(compose(a, inverse(a)), I, 1e-12)


def test_apply_examples(rng):
    np.testing.assert_array_equal(apply(I, Point3((4, 5, 6))).coords, [4, 5, 6])
    np.testing.assert_array_equal(apply(Pose(I.q, (1, 2, 3)), Point3(np.zeros(3))).coords, [1, 2, 3])
    for _ in range(50):
        a, p = random_pose(rng), rng.normal(size=3)
        oracle = (matrix_oracle(a) @ np.append(p, 1.0))[:3]
        np.testing.assert_allclose(apply(a, Point3(p)).coords, oracle, atol=1e-12)


def test_apply_tags_output_frame_and_checks_input():
    T = Pose.identity(Frame.B_T0, Frame.A_T0)
    assert apply(T, Point3(np.zeros(3), Frame.B_T0)).frame is Frame.A_T0
    with pytest.raises(ValueError, match="frame mismatch"):
        apply(T, Point3(np.zeros(3), Frame.A_T1))


def test_compose_checks_frame_chain():
    a = Pose.identity(Frame.B_T0, Frame.A_T0)
    b = Pose.identity(Frame.B_T1, Frame.B_T0)
    assert compose(a, b).src is Frame.B_T1 and compose(a, b).dst is Frame.A_T0
    with pytest.raises(ValueError):
        compose(b, b)


def test_retract_examples():
    assert pose_close(retract(I, TangentDelta()), I, 0.0)
    r = retract(I, TangentDelta((0, 0, np.pi / 2), np.zeros(3)))
    expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)
    np.testing.assert_allclose(r.R, expected, atol=1e-9)


def test_local_examples(rng):
    a = random_pose(rng)
    np.testing.assert_array_equal(local(a, a).as_vector(), np.zeros(6))
    d = local(I, Pose(I.q, (0.01, 0, 0)))
    np.testing.assert_allclose(d.trans, [0.01, 0, 0], atol=1e-15)
    np.testing.assert_allclose(d.rot, np.zeros(3), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(poses(), vec3, vec3)
def test_local_inverts_retract(a, rot, trans):
    rot = rot * 0.5 / np.sqrt(3)  # |d| < 0.5
    d = TangentDelta(rot, trans * 0.2)
    np.testing.assert_allclose(local(a, retract(a, d)).as_vector(), d.as_vector(), atol=1e-9)


def test_retract_distance_linear_in_step(rng):
    a = random_pose(rng)
    v = rng.normal(size=6)
    dists = [np.linalg.norm(local(a, retract(a, TangentDelta.from_vector(s * v))).as_vector()) for s in (1e-4, 2e-4, 4e-4)]
    assert dists[1] == pytest.approx(2 * dists[0], rel=1e-9)
    assert dists[2] == pytest.approx(4 * dists[0], rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(poses(), poses(), poses())
def test_group_axioms(a, b, c):
    assert pose_close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-10)
    assert pose_close(compose(I, a), a, 1e-10)
    assert pose_close(compose(a, I), a, 1e-10)
    assert pose_close(compose(inverse(a), a), I, 1e-10)


@settings(max_examples=200, deadline=None)
@given(poses(), poses(), vec3)
def test_apply_respects_composition(a, b, p):
    lhs = apply(compose(a, b), Point3(p)).coords
    rhs = apply(a, apply(b, Point3(p))).coords
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(poses())
def test_sign_flipped_quaternion_is_same_pose(a):
    flipped = Pose(-a.q, a.t)
    assert flipped.q[0] >= 0
    np.testing.assert_allclose(local(a, flipped).as_vector(), np.zeros(6), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(poses(), st.tuples(*[st.floats(-10, 10)] * 6))
def test_retract_keeps_unit_quaternion(a, d):
    r = retract(a, TangentDelta.from_vector(np.array(d)))
    assert abs(np.linalg.norm(r.q) - 1.0) <= 1e-12


def test_construction_normalises_and_rejects_nonfinite():
    p = Pose([2.0, 0.0, 0.0, 0.0], np.zeros(3))
    assert abs(np.linalg.norm(p.q) - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        Pose([1.0, 0, 0, 0], [np.nan, 0, 0])
    with pytest.raises(ValueError):
        Point3([np.inf, 0, 0])
    with pytest.raises(ValueError):
        TangentDelta([np.nan, 0, 0])


@pytest.mark.parametrize("angle", [0.0, 1e-12, 1e-9, 1e-6, 0.3, 2.0, np.pi - 1e-6])
def test_quat_log_exp_round_trip(angle, rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * angle
    np.testing.assert_allclose(quat_log(quat_exp(phi)), phi, atol=1e-12)


def test_rotvec_matches_scipy(rng):
    from scipy.spatial.transform import Rotation

    for _ in range(20):
        a = random_pose(rng)
        w, x, y, z = a.q
        np.testing.assert_allclose(a.rotvec(), Rotation.from_quat([x, y, z, w]).as_rotvec(), atol=1e-12)


def test_rigid_align_recovers_known_transform(rng):
    T = random_pose(rng)
    src = rng.normal(size=(3, 3))
    assert pose_close(rigid_align(src, T.transform(src)), T, 1e-12)
    src = rng.normal(size=(50, 3))
    assert pose_close(rigid_align(src, T.transform(src)), T, 1e-12)


def test_rigid_align_input_checks():
    with pytest.raises(ValueError):
        rigid_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        rigid_align(np.zeros((4, 3)), np.zeros((5, 3)))


def test_pose_dict_round_trip(rng):
    a = random_pose(rng)
    b = Pose.from_dict(a.to_dict())
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.t, b.t)


def test_from_matrix_round_trip(rng):
    for _ in range(20):
        a = random_pose(rng)
        assert pose_close(Pose.from_matrix(a.as_matrix()), a, 1e-12)
