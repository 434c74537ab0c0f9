"""Forward-mode automatic differentiation with dual numbers.

A :class:`Jet` carries a value array of shape ``S`` and a derivative array of
shape ``S + (k,)``. Only the elementwise operations the residuals need are
provided; quaternion algebra is written component-wise on top of them so the
same formulas run on plain floats and on jets.
"""

from __future__ import annotations

import numpy as np

from .residuals import MeasureSet, ParameterSet, ProblemConfig


class Jet:
    __slots__ = ("v", "d")
    __array_priority__ = 1000

    def __init__(self, v, d):
        self.v = np.asarray(v, dtype=float)
        self.d = np.asarray(d, dtype=float)

    @classmethod
    def seed(cls, value, index: int, k: int) -> Jet:
        d = np.zeros(k)
        d[index] = 1.0
        value = np.asarray(value, dtype=float)
        return cls(value, np.broadcast_to(d, value.shape + (k,)))

    def __add__(self, o):
        if isinstance(o, Jet):
            return Jet(self.v + o.v, self.d + o.d)
        o = np.asarray(o, dtype=float)
        return Jet(self.v + o, self.d + np.zeros(o.shape + (1,)))

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.v, -self.d)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, Jet):
            return Jet(self.v * o.v, self.d * o.v[..., None] + o.d * self.v[..., None])
        o = np.asarray(o, dtype=float)
        return Jet(self.v * o, self.d * o[..., None])

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Jet):
            inv = 1.0 / o.v
            return Jet(self.v * inv, (self.d - o.d * (self.v * inv)[..., None]) * inv[..., None])
        return self * (1.0 / np.asarray(o, dtype=float))

    def __rtruediv__(self, o):
        inv = 1.0 / self.v
        o = np.asarray(o, dtype=float)
        return Jet(o * inv, -self.d * (o * inv * inv)[..., None])


def _val(x):
    return x.v if isinstance(x, Jet) else np.asarray(x, dtype=float)


def sqrt(x):
    if not isinstance(x, Jet):
        return np.sqrt(x)
    s = np.sqrt(x.v)
    return Jet(s, x.d * (0.5 / s)[..., None])


def atan2(y, x):
    if not isinstance(y, Jet) and not isinstance(x, Jet):
        return np.arctan2(y, x)
    yv, xv = _val(y), _val(x)
    r2 = xv * xv + yv * yv
    d = 0.0
    if isinstance(y, Jet):
        d = d + y.d * (xv / r2)[..., None]
    if isinstance(x, Jet):
        d = d - x.d * (yv / r2)[..., None]
    return Jet(np.arctan2(yv, xv), d)


# --------------------------------------------------------------------------
# component-wise quaternion algebra (works on floats, arrays and jets)
# --------------------------------------------------------------------------


def qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def qconj(q):
    w, x, y, z = q
    return (w, -x, -y, -z)


def qexp_small(d):
    """Quaternion of rotation vector ``d`` for ``|d|`` near zero (second-order series)."""
    dx, dy, dz = d
    th2 = dx * dx + dy * dy + dz * dz
    w = 1.0 - th2 / 8.0
    k = 0.5 - th2 / 48.0
    return (w, k * dx, k * dy, k * dz)


def qlog(q):
    w, x, y, z = q
    if np.any(_val(w) < 0):
        w, x, y, z = -w, -x, -y, -z
    s2 = x * x + y * y + z * z
    if np.max(np.sqrt(_val(s2))) < 1e-8:
        k = 2.0 / w * (1.0 - s2 / (3.0 * w * w))
    else:
        s = sqrt(s2)
        k = 2.0 * atan2(s, w) / s
    return (k * x, k * y, k * z)


def qrotate(q, v):
    """Rotate vector ``v`` by unit quaternion ``q`` (via ``R(q) v``)."""
    w, x, y, z = q
    vx, vy, vz = v
    return (
        (1 - 2 * (y * y + z * z)) * vx + 2 * (x * y - w * z) * vy + 2 * (x * z + w * y) * vz,
        2 * (x * y + w * z) * vx + (1 - 2 * (x * x + z * z)) * vy + 2 * (y * z - w * x) * vz,
        2 * (x * z - w * y) * vx + 2 * (y * z + w * x) * vy + (1 - 2 * (x * x + y * y)) * vz,
    )


def _add3(a, b):
    return tuple(ai + bi for ai, bi in zip(a, b))


def _sub3(a, b):
    return tuple(ai - bi for ai, bi in zip(a, b))


def _cols(a):
    a = np.asarray(a, dtype=float)
    return (a[..., 0], a[..., 1], a[..., 2])


class _PoseJet:
    """A pose perturbed by a seeded tangent: ``(q * exp(dr), t + dt)``."""

    def __init__(self, pose, offset: int | None, k: int):
        q = tuple(pose.q)
        if offset is None:
            self.q, self.t = q, tuple(pose.t)
            return
        dr = tuple(Jet.seed(0.0, offset + i, k) for i in range(3))
        self.q = qmul(q, qexp_small(dr))
        self.t = tuple(Jet.seed(pose.t[i], offset + 3 + i, k) for i in range(3))

    def apply(self, p):
        return _add3(qrotate(self.q, p), self.t)

    def apply_inverse(self, p):
        return qrotate(qconj(self.q), _sub3(p, self.t))


def _stack(comps, m: int, k: int):
    """Pack a tuple of jets into (residual (m, d), jacobian (m, d, k))."""
    vals, ders = [], []
    for c in comps:
        if isinstance(c, Jet):
            vals.append(np.broadcast_to(c.v, (m,)))
            ders.append(np.broadcast_to(c.d, (m, k)))
        else:
            vals.append(np.broadcast_to(np.asarray(c, dtype=float), (m,)))
            ders.append(np.zeros((m, k)))
    return np.stack(vals, axis=1), np.stack(ders, axis=1)


def _pose_residual(pred_q, pred_t, meas):
    rot = qlog(qmul(qconj(pred_q), tuple(meas.q)))
    trans = _sub3(tuple(meas.t), pred_t)
    return rot + trans


def autodiff_blocks(params: ParameterSet, measures: MeasureSet, config: ProblemConfig) -> dict:
    """Residuals and tangent-space Jacobians of every active block.

    Returns ``{block: (residual, {param: jacobian})}`` where pose jacobians
    have shape ``(rows, dim, 6)`` and the ``"x5"`` jacobian ``(rows, dim, 3)``.
    """
    out = {}
    n = measures.n
    for b in config.ordered_active():
        if b in ("DA0", "DA1"):
            xname, mtgt, msrc = ("x1", "m6", "m7") if b == "DA0" else ("x2", "m8", "m9")
            k = 6
            X = _PoseJet(params.pose(xname), 0, k)
            r = _sub3(_cols(getattr(measures, mtgt)), X.apply(_cols(getattr(measures, msrc))))
            res, J = _stack(r, n, k)
            out[b] = (res, {xname: J})
        elif b == "SFT_A":
            k = 15
            X1 = _PoseJet(params.x1, 0, k)
            X3 = _PoseJet(params.x3, 6, k)
            x5 = tuple(Jet.seed(params.x5[:, i], 12 + i, k) for i in range(3))
            if config.sft_a_anchor == "m7":
                w = X1.apply(_add3(_cols(measures.m7), x5))
            else:
                w = _add3(_cols(measures.m6), qrotate(X1.q, x5))
            r = _sub3(_cols(measures.m8), X3.apply_inverse(w))
            res, J = _stack(r, n, k)
            out[b] = (res, {"x1": J[..., 0:6], "x3": J[..., 6:12], "x5": J[..., 12:15]})
        elif b == "SFT_B":
            k = 9
            X4 = _PoseJet(params.x4, 0, k)
            x5 = tuple(Jet.seed(params.x5[:, i], 6 + i, k) for i in range(3))
            r = _sub3(_cols(measures.m9), X4.apply_inverse(_add3(_cols(measures.m7), x5)))
            res, J = _stack(r, n, k)
            out[b] = (res, {"x4": J[..., 0:6], "x5": J[..., 6:9]})
        elif b == "KC":
            k = 18
            X1 = _PoseJet(params.x1, 0, k)
            X3 = _PoseJet(params.x3, 6, k)
            X4 = _PoseJet(params.x4, 12, k)
            q = qmul(qconj(X3.q), qmul(X1.q, X4.q))
            t = X3.apply_inverse(X1.apply(X4.t))
            res, J = _stack(_pose_residual(q, t, measures.m2), 1, k)
            out[b] = (res, {"x1": J[..., 0:6], "x3": J[..., 6:12], "x4": J[..., 12:18]})
        elif b == "KS5":
            idx = np.asarray(config.ks5_indices, dtype=int)
            k = 3
            x5 = tuple(Jet.seed(params.x5[idx, i], i, k) for i in range(3))
            r = _sub3(_cols(measures.m5[idx]), x5)
            res, J = _stack(r, len(idx), k)
            out[b] = (res, {"x5": J})
        else:
            i = b[2]
            k = 6
            X = _PoseJet(params.pose(f"x{i}"), 0, k)
            res, J = _stack(_pose_residual(X.q, X.t, getattr(measures, f"m{i}")), 1, k)
            out[b] = (res, {f"x{i}": J})
    return out
