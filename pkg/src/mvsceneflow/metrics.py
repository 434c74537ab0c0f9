"""Average-distance (ADD) metrics for points, transforms and flow fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose


def _pairs(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("ADD needs at least one pair")
    return a, b


def add_points(a, b) -> float:
    """Mean by-index Euclidean distance between two point lists."""
    a, b = _pairs(a, b)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def add_flow(f_gt, f_est) -> float:
    return add_points(f_gt, f_est)


def add_transform(T_gt: Pose, T_est: Pose, probes) -> float:
    """ADD between a probe set mapped by the true and by the estimated transform."""
    probes = np.asarray(probes, dtype=float).reshape(-1, 3)
    if len(probes) == 0:
        raise ValueError("add_transform needs a nonempty probe set")
    return add_points(T_gt.transform(probes), T_est.transform(probes))


@dataclass
class AddRecord:
    """Input-noise and output-error ADD values, all in meters."""

    out_tf: dict = field(default_factory=dict)  # x1..x4 -> ADD
    out_sf: float | None = None
    in_da: float = 0.0
    in_tf: float = 0.0
    in_sf: float = 0.0
    in_tf_per_pose: dict = field(default_factory=dict)
    probes: str = "ground-truth matched points in each pose's source frame"

    def to_dict(self) -> dict:
        return asdict(self)
