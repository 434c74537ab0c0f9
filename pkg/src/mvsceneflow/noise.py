"""Gaussian perturbation of measures.

Vectors and translations get isotropic Euclidean noise; rotations get a
Gaussian tangent vector pushed through the right-multiplicative retraction.

Data-association noise is drawn per physical point (keyed by
``MeasureSet.point_ids``), so reordering the points reorders the noise with
them. Two models are available for the t1 coordinates:

* ``"propagated"``: noise is drawn on the t0 coordinates ``m6``/``m7`` and
  the t1 coordinates inherit it, as happens when ``m8``/``m9`` are obtained
  by adding a relative scene flow to the noisy t0 points;
* ``"independent"``: ``m6..m9`` each get their own draw.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .geometry import Pose, TangentDelta, retract
from .metrics import AddRecord, add_points, add_transform
from .residuals import POSE_MEASURES, MeasureSet

# expected norm of a 3D isotropic Gaussian with unit per-axis std
CHI3_MEAN = float(np.sqrt(8.0 / np.pi))

# probe observations (source frame) used to express each pose error as ADD
POSE_PROBES = {"m1": "m7", "m2": "m9", "m3": "m8", "m4": "m9"}


def rotation_sigma_for(sigma_trans: float, radius: float) -> float:
    """Per-axis rotation std whose ADD at ``radius`` matches ``sigma_trans``'s.

    A tangent ``d ~ N(0, s^2 I)`` moves a point at distance ``r`` by
    ``|d x p|``, whose mean is ``s r sqrt(pi/2)``; a translation
    ``N(0, sigma^2 I)`` moves it by ``sigma sqrt(8/pi)`` on average.
    """
    return float(sigma_trans * CHI3_MEAN / (radius * np.sqrt(np.pi / 2.0)))


@dataclass(frozen=True)
class NoiseSpec:
    sigma_point: float = 0.0
    sigma_flow: float = 0.0
    sigma_trans: float = 0.0
    sigma_rot: float = 0.0
    seed: int = 0
    pose_targets: tuple = POSE_MEASURES
    da_model: str = "propagated"

    def __post_init__(self):
        for k in ("sigma_point", "sigma_flow", "sigma_trans", "sigma_rot"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be nonnegative")
        if set(self.pose_targets) - set(POSE_MEASURES):
            raise ValueError("pose_targets must be a subset of m1..m4")
        object.__setattr__(self, "pose_targets", tuple(self.pose_targets))
        if self.da_model not in ("propagated", "independent"):
            raise ValueError("da_model must be 'propagated' or 'independent'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose_targets"] = list(self.pose_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSpec:
        d = dict(d)
        if "pose_targets" in d:
            d["pose_targets"] = tuple(d["pose_targets"])
        return cls(**d)


def perturb_vector(v, sigma: float, rng: np.random.Generator) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if sigma == 0:
        return v.copy()
    return v + rng.normal(0.0, sigma, v.shape)


def perturb_pose(T: Pose, sigma_trans: float, sigma_rot: float, rng: np.random.Generator) -> Pose:
    rot = rng.normal(0.0, sigma_rot, 3) if sigma_rot > 0 else np.zeros(3)
    trans = rng.normal(0.0, sigma_trans, 3) if sigma_trans > 0 else np.zeros(3)
    return retract(T, TangentDelta(rot, trans))


def _point_noise(rng: np.random.Generator, ids: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros((len(ids), 3))
    table = rng.normal(0.0, sigma, (int(ids.max()) + 1, 3))
    return table[ids]


def perturb_measures(measures: MeasureSet, spec: NoiseSpec) -> tuple[MeasureSet, AddRecord]:
    """Noisy copy of ``measures`` plus the realised input ADD levels."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(8)]
    ids = measures.point_ids

    poses = {}
    for k, name in enumerate(POSE_MEASURES):
        T = getattr(measures, name)
        if name in spec.pose_targets:
            T = perturb_pose(T, spec.sigma_trans, spec.sigma_rot, streams[k])
        poses[name] = T

    m5 = measures.m5 + _point_noise(streams[4], ids, spec.sigma_flow)
    e6 = _point_noise(streams[5], ids, spec.sigma_point)
    e7 = _point_noise(streams[6], ids, spec.sigma_point)
    if spec.da_model == "propagated":
        e8, e9 = e6, e7
    else:
        extra = np.random.SeedSequence(spec.seed).spawn(8)[7]
        r8, r9 = (np.random.default_rng(s) for s in extra.spawn(2))
        e8 = _point_noise(r8, ids, spec.sigma_point)
        e9 = _point_noise(r9, ids, spec.sigma_point)

    noisy = replace(
        measures,
        m5=m5,
        m6=measures.m6 + e6,
        m7=measures.m7 + e7,
        m8=measures.m8 + e8,
        m9=measures.m9 + e9,
        **poses,
    )

    per_pose = {
        name: add_transform(getattr(measures, name), poses[name], getattr(measures, POSE_PROBES[name]))
        for name in POSE_MEASURES
    }
    targeted = [per_pose[name] for name in spec.pose_targets]
    gt_pts = np.concatenate([measures.m6, measures.m7, measures.m8, measures.m9])
    noisy_pts = np.concatenate([noisy.m6, noisy.m7, noisy.m8, noisy.m9])
    record = AddRecord(
        in_da=add_points(gt_pts, noisy_pts),
        in_tf=float(np.mean(targeted)) if targeted else 0.0,
        in_sf=add_points(measures.m5, m5),
        in_tf_per_pose=per_pose,
    )
    return noisy, record
