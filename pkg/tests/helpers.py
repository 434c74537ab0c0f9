"""Shared oracles and generators for the test suite."""

import numpy as np
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from mvsceneflow.geometry import Pose


def random_pose(rng, rot_scale=np.pi, trans_scale=0.1, **tags) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, rot_scale)
    return Pose.from_rotvec(axis * angle, rng.normal(0.0, trans_scale, 3), **tags)


def matrix_oracle(T: Pose) -> np.ndarray:
    """Homogeneous matrix built with scipy's rotation code, not ours."""
    w, x, y, z = T.q
    M = np.eye(4)
    M[:3, :3] = Rotation.from_quat([x, y, z, w]).as_matrix()
    M[:3, 3] = T.t
    return M


def pose_from_matrix_oracle(M: np.ndarray) -> Pose:
    x, y, z, w = Rotation.from_matrix(M[:3, :3]).as_quat()
    return Pose([w, x, y, z], M[:3, 3])


def pose_close(a: Pose, b: Pose, tol: float) -> bool:
    chord = min(np.linalg.norm(a.q - b.q), np.linalg.norm(a.q + b.q))
    return chord <= tol and np.linalg.norm(a.t - b.t) <= tol


finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def poses(draw, trans_scale=0.5):
    rv = draw(st.tuples(*[st.floats(-3.0, 3.0)] * 3))
    t = draw(st.tuples(*[st.floats(-trans_scale, trans_scale)] * 3))
    return Pose.from_rotvec(np.array(rv), np.array(t))
