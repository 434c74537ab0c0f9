"""Frame-tagged SE(3) arithmetic on unit quaternions.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)`` with ``w >= 0``;
* a :class:`Pose` ``T`` with ``src``/``dst`` frames maps coordinates
  expressed in ``src`` to coordinates expressed in ``dst``:
  ``p_dst = R @ p_src + t``;
* the tangent space is the product manifold ``so(3) x R^3`` with a
  right-multiplicative rotation perturbation,
  ``q [+] d = q * exp_quat(d / 2)`` and ``t [+] d = t + d``;
* tangent vectors are laid out ``[rot(3), trans(3)]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_SMALL_ANGLE = 1e-8


class Frame(str, enum.Enum):
    A_T0 = "A_t0"
    A_T1 = "A_t1"
    B_T0 = "B_t0"
    B_T1 = "B_t1"
    WORLD = "world"


# --------------------------------------------------------------------------
# quaternion / so(3) kernels, vectorised over leading axes
# --------------------------------------------------------------------------


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Normalise and flip to the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method for a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(np.array(q))


def quat_exp(phi: np.ndarray) -> np.ndarray:
    """Unit quaternion of the rotation vector ``phi`` (angle ``|phi|``)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, Taylor branch near zero
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(half))
    return np.concatenate([w, k * phi], axis=-1)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of ``q``; sign-canonicalised so the angle is in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = q * np.where(q[..., :1] < 0.0, -1.0, 1.0)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    small = s < _SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    safe_w = np.where(small, w, 1.0)
    k = np.where(
        small,
        2.0 / safe_w * (1.0 - s**2 / (3.0 * safe_w**2)),
        2.0 * np.arctan2(s, w) / safe_s,
    )
    return k * v


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    K = np.stack([o, -z, y, z, o, -x, -y, x, o], axis=-1)
    return K.reshape(v.shape[:-1] + (3, 3))


def so3_exp(phi: np.ndarray) -> np.ndarray:
    return quat_to_matrix(quat_exp(phi))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SO(3) for a single rotation vector."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + coef * (K @ K)


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p_dst = R(q) p_src + t``.

    ``src``/``dst`` are optional frame tags; when both operands of an
    operation carry tags they are cross-checked under ``__debug__``.
    """

    q: np.ndarray
    t: np.ndarray
    src: Frame | None = None
    dst: Frame | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "q", _frozen(canonical_quat(q)))
        object.__setattr__(self, "t", _frozen(t))

    @classmethod
    def identity(cls, src: Frame | None = None, dst: Frame | None = None) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), src, dst)

    @classmethod
    def from_rotvec(cls, rotvec=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0), src=None, dst=None) -> Pose:
        return cls(quat_exp(np.asarray(rotvec, dtype=float)), t, src, dst)

    @classmethod
    def from_matrix(cls, T: np.ndarray, src=None, dst=None) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3], src, dst)

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def rotvec(self) -> np.ndarray:
        return quat_log(self.q)

    def tagged(self, src: Frame | None, dst: Frame | None) -> Pose:
        return Pose(self.q, self.t, src, dst)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an ``(..., 3)`` array of raw coordinates."""
        return np.asarray(pts, dtype=float) @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {"q_wxyz": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls(d["q_wxyz"], d["t"])

    def __repr__(self) -> str:
        q = np.array2string(self.q, precision=6)
        t = np.array2string(self.t, precision=6)
        return f"Pose(q={q}, t={t})"


@dataclass(frozen=True, eq=False)
class Point3:
    coords: np.ndarray
    frame: Frame | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).reshape(3)
        if not np.all(np.isfinite(c)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "coords", _frozen(c))


@dataclass(frozen=True, eq=False)
class FlowVector:
    delta: np.ndarray
    frame: Frame | None = Frame.B_T0

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=float).reshape(3)
        if not np.all(np.isfinite(d)):
            raise ValueError("flow must be finite")
        object.__setattr__(self, "delta", _frozen(d))


@dataclass(frozen=True, eq=False)
class TangentDelta:
    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rot, dtype=float).reshape(3)
        t = np.asarray(self.trans, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("tangent delta must be finite")
        object.__setattr__(self, "rot", _frozen(r))
        object.__setattr__(self, "trans", _frozen(t))

    @classmethod
    def from_vector(cls, v: np.ndarray) -> TangentDelta:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


# --------------------------------------------------------------------------
# group operations
# --------------------------------------------------------------------------


def _check_chain(inner_dst: Frame | None, outer_src: Frame | None) -> None:
    if inner_dst is not None and outer_src is not None and inner_dst != outer_src:
        raise ValueError(f"frame mismatch: {inner_dst.value} -> {outer_src.value}")


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: map through ``b`` first, then ``a``."""
    if __debug__:
        _check_chain(b.dst, a.src)
    return Pose(quat_mul(a.q, b.q), a.R @ b.t + a.t, b.src, a.dst)


def inverse(a: Pose) -> Pose:
    return Pose(quat_conj(a.q), -(a.R.T @ a.t), a.dst, a.src)


def apply(a: Pose, p: Point3) -> Point3:
    if __debug__:
        _check_chain(p.frame, a.src)
    return Point3(a.R @ p.coords + a.t, a.dst if a.dst is not None else p.frame)


def retract(a: Pose, d: TangentDelta) -> Pose:
    return Pose(quat_mul(a.q, quat_exp(d.rot)), a.t + d.trans, a.src, a.dst)


def local(a: Pose, b: Pose) -> TangentDelta:
    """Tangent delta ``d`` with ``retract(a, d) == b``."""
    return TangentDelta(quat_log(quat_mul(quat_conj(a.q), b.q)), b.t - a.t)


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with ``dst ~ R @ src + t`` (Kabsch).

    Needs at least three non-collinear correspondences.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("expected two (n, 3) arrays of equal shape")
    if len(src) < 3:
        raise ValueError("rigid alignment needs at least 3 points")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(matrix_to_quat(R), cd - R @ cs)
