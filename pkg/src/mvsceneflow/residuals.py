"""Measures, parameters and the residual blocks of the joint objective.

Naming follows the two-camera kinematic loop:

====  ==========================  =====================
name  quantity                    frame(s)
====  ==========================  =====================
m1    between-camera at t0        B_t0 -> A_t0
m2    between-camera at t1        B_t1 -> A_t1
m3    ego-motion of camera A      A_t1 -> A_t0
m4    ego-motion of camera B      B_t1 -> B_t0
m5    absolute scene flow         B_t0
m6    point at t0 seen by A       A_t0
m7    point at t0 seen by B       B_t0
m8    point at t1 seen by A       A_t1
m9    point at t1 seen by B       B_t1
====  ==========================  =====================

Parameters ``x1..x5`` estimate ``m1..m5``. SE(3)-valued residuals are the
6-vector ``local(predicted, measured)`` (``[rot, trans]``), which is the
measured-minus-predicted difference in the tangent space of the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .geometry import (
    Frame,
    FlowVector,
    Point3,
    Pose,
    compose,
    inverse,
    local,
    quat_conj,
    quat_log,
    quat_mul,
)

BLOCKS = ("DA0", "DA1", "SFT_A", "SFT_B", "KC", "KS1", "KS2", "KS3", "KS4", "KS5")
POSE_PARAMS = ("x1", "x2", "x3", "x4")
POSE_MEASURES = ("m1", "m2", "m3", "m4")
POINT_MEASURES = ("m6", "m7", "m8", "m9")
ALL_MEASURES = POSE_MEASURES + ("m5",) + POINT_MEASURES

MEASURE_FRAMES = {
    "m1": (Frame.B_T0, Frame.A_T0),
    "m2": (Frame.B_T1, Frame.A_T1),
    "m3": (Frame.A_T1, Frame.A_T0),
    "m4": (Frame.B_T1, Frame.B_T0),
    "m5": Frame.B_T0,
    "m6": Frame.A_T0,
    "m7": Frame.B_T0,
    "m8": Frame.A_T1,
    "m9": Frame.B_T1,
}

# measures each block consumes
BLOCK_MEASURES = {
    "DA0": ("m6", "m7"),
    "DA1": ("m8", "m9"),
    "SFT_A": ("m6", "m7", "m8"),
    "SFT_B": ("m7", "m9"),
    "KC": ("m2",),
    "KS1": ("m1",),
    "KS2": ("m2",),
    "KS3": ("m3",),
    "KS4": ("m4",),
    "KS5": ("m5",),
}

# parameters each block depends on
BLOCK_PARAMS = {
    "DA0": ("x1",),
    "DA1": ("x2",),
    "SFT_A": ("x1", "x3", "x5"),
    "SFT_B": ("x4", "x5"),
    "KC": ("x1", "x3", "x4"),
    "KS1": ("x1",),
    "KS2": ("x2",),
    "KS3": ("x3",),
    "KS4": ("x4",),
    "KS5": ("x5",),
}


def _points(a, n: int | None = None) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(-1, 3)
    if n is not None and len(a) != n:
        raise ValueError(f"expected {n} points, got {len(a)}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeasureSet:
    """Bundle of measures for one frame pair.

    All values are always stored; ``available`` says which of them take
    part in a problem. ``point_ids`` identify the physical scene point behind
    each row and survive reordering.
    """

    m1: Pose
    m2: Pose
    m3: Pose
    m4: Pose
    m5: np.ndarray
    m6: np.ndarray
    m7: np.ndarray
    m8: np.ndarray
    m9: np.ndarray
    available: frozenset = frozenset(ALL_MEASURES)
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        n = len(np.asarray(self.m6).reshape(-1, 3))
        if n < 1:
            raise ValueError("a measure set needs at least one point")
        for name in ("m5",) + POINT_MEASURES:
            object.__setattr__(self, name, _points(getattr(self, name), n))
        unknown = set(self.available) - set(ALL_MEASURES)
        if unknown:
            raise ValueError(f"unknown measures flagged available: {sorted(unknown)}")
        object.__setattr__(self, "available", frozenset(self.available))
        ids = np.arange(n) if self.point_ids is None else np.asarray(self.point_ids, dtype=int)
        if ids.shape != (n,):
            raise ValueError("point_ids must have one entry per point")
        ids = ids.copy()
        ids.setflags(write=False)
        object.__setattr__(self, "point_ids", ids)
        for name in POSE_MEASURES:
            src, dst = MEASURE_FRAMES[name]
            object.__setattr__(self, name, getattr(self, name).tagged(src, dst))

    @property
    def n(self) -> int:
        return len(self.m6)

    def has(self, name: str) -> bool:
        return name in self.available

    def with_available(self, names) -> MeasureSet:
        return replace(self, available=frozenset(names))

    def point(self, name: str, i: int) -> Point3 | FlowVector:
        if name == "m5":
            return FlowVector(self.m5[i], Frame.B_T0)
        return Point3(getattr(self, name)[i], MEASURE_FRAMES[name])

    def permuted(self, order) -> MeasureSet:
        order = np.asarray(order, dtype=int)
        arrays = {k: getattr(self, k)[order] for k in ("m5",) + POINT_MEASURES}
        return replace(self, point_ids=self.point_ids[order], **arrays)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).to_dict() for k in POSE_MEASURES}
        d.update({k: getattr(self, k).tolist() for k in ("m5",) + POINT_MEASURES})
        d["available"] = sorted(self.available)
        d["point_ids"] = self.point_ids.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MeasureSet:
        kw = {k: Pose.from_dict(d[k]) for k in POSE_MEASURES}
        kw.update({k: d[k] for k in ("m5",) + POINT_MEASURES})
        return cls(available=frozenset(d["available"]), point_ids=d.get("point_ids"), **kw)


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Estimates ``x1..x5`` plus fixed/free flags.

    ``fixed`` names fixed pose parameters; ``x5_fixed`` is a per-point mask.
    """

    x1: Pose
    x2: Pose
    x3: Pose
    x4: Pose
    x5: np.ndarray
    fixed: frozenset = frozenset()
    x5_fixed: np.ndarray | None = None

    def __post_init__(self):
        x5 = _points(self.x5)
        object.__setattr__(self, "x5", x5)
        mask = np.zeros(len(x5), bool) if self.x5_fixed is None else np.array(self.x5_fixed, bool)
        if mask.shape != (len(x5),):
            raise ValueError("x5_fixed must have one entry per point")
        mask.setflags(write=False)
        object.__setattr__(self, "x5_fixed", mask)
        if set(self.fixed) - set(POSE_PARAMS):
            raise ValueError(f"unknown fixed parameters: {sorted(set(self.fixed) - set(POSE_PARAMS))}")
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        for name, mname in zip(POSE_PARAMS, POSE_MEASURES):
            src, dst = MEASURE_FRAMES[mname]
            object.__setattr__(self, name, getattr(self, name).tagged(src, dst))

    @property
    def n(self) -> int:
        return len(self.x5)

    @classmethod
    def identity(cls, n: int, **kw) -> ParameterSet:
        I = Pose.identity()
        return cls(I, I, I, I, np.zeros((n, 3)), **kw)

    @classmethod
    def from_measures(cls, m: MeasureSet, **kw) -> ParameterSet:
        """Parameters equal to the measures (the ground truth when ``m`` is exact)."""
        return cls(m.m1, m.m2, m.m3, m.m4, m.m5, **kw)

    def pose(self, name: str) -> Pose:
        return getattr(self, name)

    def with_fixed(self, fixed=(), x5_fixed=None) -> ParameterSet:
        return replace(self, fixed=frozenset(fixed), x5_fixed=x5_fixed)

    def permuted(self, order) -> ParameterSet:
        order = np.asarray(order, dtype=int)
        return replace(self, x5=self.x5[order], x5_fixed=self.x5_fixed[order])

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).to_dict() for k in POSE_PARAMS}
        d["x5"] = self.x5.tolist()
        d["fixed"] = sorted(self.fixed)
        d["x5_fixed"] = self.x5_fixed.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ParameterSet:
        kw = {k: Pose.from_dict(d[k]) for k in POSE_PARAMS}
        return cls(x5=d["x5"], fixed=frozenset(d.get("fixed", ())), x5_fixed=d.get("x5_fixed"), **kw)


@dataclass(frozen=True)
class ProblemConfig:
    """Which blocks are active, their scale weights, and the KS5 point subset.

    ``sft_a_anchor`` selects the t0 observation the camera-A scene-flow
    block starts from: ``"m7"`` (B's point carried through ``x1``) or
    ``"m6"`` (A's own point, with ``x1`` only rotating the flow).
    """

    active: frozenset = frozenset(BLOCKS)
    rho: Mapping[str, float] = field(default_factory=dict)
    ks5_indices: tuple = ()
    sft_a_anchor: str = "m7"

    def __post_init__(self):
        active = frozenset(self.active)
        if active - set(BLOCKS):
            raise ValueError(f"unknown blocks: {sorted(active - set(BLOCKS))}")
        object.__setattr__(self, "active", active)
        for k, v in self.rho.items():
            if k not in BLOCKS:
                raise ValueError(f"unknown block in rho: {k}")
            if not v >= 0:
                raise ValueError(f"rho[{k}] must be nonnegative")
        object.__setattr__(self, "rho", dict(self.rho))
        object.__setattr__(self, "ks5_indices", tuple(int(i) for i in self.ks5_indices))
        if len(set(self.ks5_indices)) != len(self.ks5_indices):
            raise ValueError("ks5_indices must be unique")
        if self.sft_a_anchor not in ("m7", "m6"):
            raise ValueError("sft_a_anchor must be 'm7' or 'm6'")

    def weight(self, block: str) -> float:
        return float(self.rho.get(block, 1.0))

    def ordered_active(self) -> list[str]:
        return [b for b in BLOCKS if b in self.active]

    def validate(self, measures: MeasureSet) -> None:
        for b in self.active:
            needed = BLOCK_MEASURES[b]
            if b == "SFT_A":
                needed = (self.sft_a_anchor, "m8")
            missing = [m for m in needed if not measures.has(m)]
            if missing:
                raise ValueError(f"block {b} needs unavailable measures {missing}")
        if self.ks5_indices:
            idx = np.asarray(self.ks5_indices)
            if idx.min() < 0 or idx.max() >= measures.n:
                raise ValueError("ks5_indices out of range")

    def to_dict(self) -> dict:
        return {
            "active": [b for b in BLOCKS if b in self.active],
            "rho": {b: self.weight(b) for b in BLOCKS},
            "ks5_indices": list(self.ks5_indices),
            "sft_a_anchor": self.sft_a_anchor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProblemConfig:
        return cls(
            active=frozenset(d.get("active", BLOCKS)),
            rho=d.get("rho", {}),
            ks5_indices=tuple(d.get("ks5_indices", ())),
            sft_a_anchor=d.get("sft_a_anchor", "m7"),
        )


# --------------------------------------------------------------------------
# single-point residuals
# --------------------------------------------------------------------------


def _coords(p) -> np.ndarray:
    if isinstance(p, Point3):
        return p.coords
    if isinstance(p, FlowVector):
        return p.delta
    return np.asarray(p, dtype=float).reshape(3)


def residual_da0(x1: Pose, m6_i, m7_i) -> np.ndarray:
    return _coords(m6_i) - x1.transform(_coords(m7_i))


def residual_da1(x2: Pose, m8_i, m9_i) -> np.ndarray:
    return _coords(m8_i) - x2.transform(_coords(m9_i))


def residual_sft_a(x1: Pose, x3: Pose, x5_i, m7_i, m8_i) -> np.ndarray:
    p = _coords(m7_i) + _coords(x5_i)
    return _coords(m8_i) - inverse(x3).transform(x1.transform(p))


def residual_sft_a_m6(x1: Pose, x3: Pose, x5_i, m6_i, m8_i) -> np.ndarray:
    p = _coords(m6_i) + x1.R @ _coords(x5_i)
    return _coords(m8_i) - inverse(x3).transform(p)


def residual_sft_b(x4: Pose, x5_i, m7_i, m9_i) -> np.ndarray:
    p = _coords(m7_i) + _coords(x5_i)
    return _coords(m9_i) - inverse(x4).transform(p)


def pose_residual(predicted: Pose, measured: Pose) -> np.ndarray:
    return local(predicted, measured).as_vector()


def residual_kc(x1: Pose, x3: Pose, x4: Pose, m2: Pose) -> np.ndarray:
    return pose_residual(compose(inverse(x3), compose(x1, x4)), m2)


def residual_ks(x_n, m_n, *, available: bool = True) -> np.ndarray:
    if not available:
        raise ValueError("kinematic supervision needs its measure to be available")
    if isinstance(x_n, Pose):
        return pose_residual(x_n, m_n)
    return _coords(m_n) - _coords(x_n)


# --------------------------------------------------------------------------
# vectorised evaluation
# --------------------------------------------------------------------------


def _pose_residual_qt(qp, tp, qm, tm) -> np.ndarray:
    return np.concatenate([quat_log(quat_mul(quat_conj(qp), qm)), tm - tp])


def kc_prediction(x1: Pose, x3: Pose, x4: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Quaternion and translation of ``inv(x3) * x1 * x4`` (untagged)."""
    R3t = x3.R.T
    q = quat_mul(quat_conj(x3.q), quat_mul(x1.q, x4.q))
    t = R3t @ (x1.R @ x4.t + x1.t - x3.t)
    return q, t


def evaluate_blocks(params: ParameterSet, measures: MeasureSet, config: ProblemConfig) -> dict:
    """Residuals of every active block, as ``{name: (rows, dim)}`` in fixed order."""
    if params.n != measures.n:
        raise ValueError(f"parameter set has {params.n} points, measures have {measures.n}")
    out = {}
    R1, R2, R3, R4 = params.x1.R, params.x2.R, params.x3.R, params.x4.R
    for b in config.ordered_active():
        if b == "DA0":
            out[b] = measures.m6 - (measures.m7 @ R1.T + params.x1.t)
        elif b == "DA1":
            out[b] = measures.m8 - (measures.m9 @ R2.T + params.x2.t)
        elif b == "SFT_A":
            if config.sft_a_anchor == "m7":
                w = (measures.m7 + params.x5) @ R1.T + params.x1.t
            else:
                w = measures.m6 + params.x5 @ R1.T
            out[b] = measures.m8 - (w - params.x3.t) @ R3
        elif b == "SFT_B":
            out[b] = measures.m9 - (measures.m7 + params.x5 - params.x4.t) @ R4
        elif b == "KC":
            q, t = kc_prediction(params.x1, params.x3, params.x4)
            out[b] = _pose_residual_qt(q, t, measures.m2.q, measures.m2.t)[None, :]
        elif b == "KS5":
            idx = np.asarray(config.ks5_indices, dtype=int)
            out[b] = measures.m5[idx] - params.x5[idx]
        else:
            k = int(b[2])
            x, m = params.pose(f"x{k}"), getattr(measures, f"m{k}")
            out[b] = _pose_residual_qt(x.q, x.t, m.q, m.t)[None, :]
    return out


def block_costs(params: ParameterSet, measures: MeasureSet, config: ProblemConfig) -> dict:
    """Per-block contribution ``0.5 * rho * sum ||f||^2``."""
    res = evaluate_blocks(params, measures, config)
    return {b: 0.5 * config.weight(b) * float(np.sum(r * r)) for b, r in res.items()}


def total_cost(params: ParameterSet, measures: MeasureSet, config: ProblemConfig) -> float:
    return float(sum(block_costs(params, measures, config).values()))
