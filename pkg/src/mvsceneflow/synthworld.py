"""Synthetic two-camera deforming scenes with exact measures.

Cameras look down their local +z axis. Camera poses are stored
camera-to-world, so ``inverse(pose) * P_world`` gives camera coordinates.
``yaw`` is a rotation about the camera y axis and ``roll`` about the
optical (z) axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import FlowVector, Point3, Pose, compose, inverse
from .residuals import MeasureSet

WORLD_SCHEMA = "mvsceneflow.world/v1"
SCENARIO_SCHEMA = "mvsceneflow.scenario/v1"


class InfeasibleScenario(RuntimeError):
    pass


def yaw(deg: float) -> np.ndarray:
    return np.array([0.0, np.deg2rad(deg), 0.0])


def roll(deg: float) -> np.ndarray:
    return np.array([0.0, 0.0, np.deg2rad(deg)])


def _s1_cameras():
    a0 = Pose.identity()
    a1 = Pose.from_rotvec(yaw(2.0), (0.01, 0.0, 0.0))
    b0 = Pose.from_rotvec(yaw(-10.0), (0.0, 0.05, 0.0))
    b1 = Pose(compose(b0, Pose.from_rotvec(roll(1.0))).q, b0.t + np.array([0.0, -0.005, 0.002]))
    return (a0, a1), (b0, b1)


_S1_A, _S1_B = _s1_cameras()


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    seed: int = 42
    n_points: int = 100
    surface_extent: tuple = (0.08, 0.06)
    surface_center: tuple = (-0.01, 0.025, 0.12)
    surface_bulge: float = 0.01
    amplitude_range: tuple = (0.001, 0.005)
    n_modes: int = 3
    wavelength_range: tuple = (0.05, 0.15)
    camera_a: tuple = _S1_A
    camera_b: tuple = _S1_B
    overlap_fraction: float = 0.9
    match_radius: float = 5e-5
    fov_half_angle_deg: float = 45.0
    max_retries: int = 10

    def __post_init__(self):
        lo, hi = self.amplitude_range
        if lo < 0 or hi < lo:
            raise ValueError("amplitude range must satisfy 0 <= lo <= hi")
        if self.match_radius <= 0:
            raise ValueError("match radius must be positive")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0 < self.overlap_fraction <= 1:
            raise ValueError("overlap_fraction must be in (0, 1]")

    @property
    def characteristic_radius(self) -> float:
        """Half-diagonal of the surface patch."""
        return 0.5 * float(np.hypot(*self.surface_extent))

    def to_dict(self) -> dict:
        return {
            "schema": SCENARIO_SCHEMA,
            "seed": self.seed,
            "n_points": self.n_points,
            "surface_extent": list(self.surface_extent),
            "surface_center": list(self.surface_center),
            "surface_bulge": self.surface_bulge,
            "amplitude_range": list(self.amplitude_range),
            "n_modes": self.n_modes,
            "wavelength_range": list(self.wavelength_range),
            "camera_a": [p.to_dict() for p in self.camera_a],
            "camera_b": [p.to_dict() for p in self.camera_b],
            "overlap_fraction": self.overlap_fraction,
            "match_radius": self.match_radius,
            "fov_half_angle_deg": self.fov_half_angle_deg,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        d = dict(d)
        schema = d.pop("schema", SCENARIO_SCHEMA)
        if schema != SCENARIO_SCHEMA:
            raise ValueError(f"unsupported scenario schema {schema!r}")
        for k in ("surface_extent", "surface_center", "amplitude_range", "wavelength_range"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("camera_a", "camera_b"):
            if k in d:
                d[k] = tuple(Pose.from_dict(p) for p in d[k])
        return cls(**d)


def s1_config(**overrides) -> ScenarioConfig:
    return replace(ScenarioConfig(), **overrides)


def static_camera_a(config: ScenarioConfig) -> ScenarioConfig:
    """Same scenario with camera A held still between t0 and t1."""
    a0 = config.camera_a[0]
    return replace(config, camera_a=(a0, a0))


# --------------------------------------------------------------------------
# deformation field
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Smooth displacement ``d(p) = mag(p) * dir(p)`` with ``|d| in [lo, hi]``.

    ``mag`` maps a normalised sum of sinusoids into the amplitude range;
    ``dir`` normalises a base direction plus sinusoidal wobble whose total
    weight stays below 0.5, so it never vanishes.
    """

    amplitude_range: tuple
    mag_omega: np.ndarray
    mag_phase: np.ndarray
    mag_coeff: np.ndarray
    base_dir: np.ndarray
    dir_omega: np.ndarray
    dir_phase: np.ndarray
    dir_vec: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, amplitude_range, n_modes: int, wavelength_range) -> DeformationField:
        def wavevectors():
            d = rng.normal(size=(n_modes, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            lam = rng.uniform(*wavelength_range, size=(n_modes, 1))
            return 2 * np.pi / lam * d

        mag_omega = wavevectors()
        mag_phase = rng.uniform(0, 2 * np.pi, n_modes)
        mag_coeff = rng.uniform(0.5, 1.0, n_modes)
        base = rng.normal(size=3)
        base /= np.linalg.norm(base)
        dir_omega = wavevectors()
        dir_phase = rng.uniform(0, 2 * np.pi, n_modes)
        dir_vec = rng.normal(size=(n_modes, 3))
        dir_vec *= 0.4 / np.linalg.norm(dir_vec, axis=1).sum()
        return cls(tuple(amplitude_range), mag_omega, mag_phase, mag_coeff, base, dir_omega, dir_phase, dir_vec)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        lo, hi = self.amplitude_range
        s = np.sin(pts @ self.mag_omega.T + self.mag_phase) @ self.mag_coeff / self.mag_coeff.sum()
        mag = lo + (hi - lo) * 0.5 * (1.0 + s)
        v = self.base_dir + np.sin(pts @ self.dir_omega.T + self.dir_phase) @ self.dir_vec
        u = v / np.linalg.norm(v, axis=1, keepdims=True)
        return mag[:, None] * u

    @property
    def lipschitz_bound(self) -> float:
        lo, hi = self.amplitude_range
        w_mag = np.linalg.norm(self.mag_omega, axis=1)
        L_mag = 0.5 * (hi - lo) * (self.mag_coeff @ w_mag) / self.mag_coeff.sum()
        wobble = np.linalg.norm(self.dir_vec, axis=1)
        L_v = wobble @ np.linalg.norm(self.dir_omega, axis=1)
        L_dir = L_v / (1.0 - wobble.sum())
        return float(L_mag + hi * L_dir)

    def to_dict(self) -> dict:
        return {k: (np.asarray(v).tolist()) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> DeformationField:
        kw = {k: np.asarray(v, dtype=float) for k, v in d.items()}
        kw["amplitude_range"] = tuple(d["amplitude_range"])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class GroundTruthWorld:
    points_t0: np.ndarray
    points_t1: np.ndarray
    camera_a: tuple  # (Pose at t0, Pose at t1), camera-to-world
    camera_b: tuple
    deformation: DeformationField
    lipschitz_bound: float = 0.0
    attempts: int = 1

    @property
    def displacements(self) -> np.ndarray:
        return self.points_t1 - self.points_t0

    def to_dict(self) -> dict:
        return {
            "schema": WORLD_SCHEMA,
            "points_t0": self.points_t0.tolist(),
            "points_t1": self.points_t1.tolist(),
            "camera_a": [p.to_dict() for p in self.camera_a],
            "camera_b": [p.to_dict() for p in self.camera_b],
            "deformation": self.deformation.to_dict(),
            "lipschitz_bound": self.lipschitz_bound,
            "attempts": self.attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruthWorld:
        if d.get("schema") != WORLD_SCHEMA:
            raise ValueError(f"unsupported world schema {d.get('schema')!r}")
        return cls(
            np.asarray(d["points_t0"], dtype=float),
            np.asarray(d["points_t1"], dtype=float),
            tuple(Pose.from_dict(p) for p in d["camera_a"]),
            tuple(Pose.from_dict(p) for p in d["camera_b"]),
            DeformationField.from_dict(d["deformation"]),
            float(d["lipschitz_bound"]),
            int(d.get("attempts", 1)),
        )


def _surface(config: ScenarioConfig, uv: np.ndarray) -> np.ndarray:
    ex, ey = config.surface_extent
    cx, cy, cz = config.surface_center
    rho2 = (uv[:, 0] / (0.5 * ex)) ** 2 + (uv[:, 1] / (0.5 * ey)) ** 2
    z = cz - config.surface_bulge * (1.0 - 0.5 * rho2)
    return np.column_stack([cx + uv[:, 0], cy + uv[:, 1], z])


def in_view(camera: Pose, pts: np.ndarray, fov_half_angle_deg: float) -> np.ndarray:
    """Pinhole cone test, no occlusion."""
    pc = inverse(camera).transform(pts)
    off_axis = np.arctan2(np.linalg.norm(pc[:, :2], axis=1), pc[:, 2])
    return (pc[:, 2] > 0) & (off_axis <= np.deg2rad(fov_half_angle_deg))


def _visibility(world: GroundTruthWorld, fov: float) -> tuple[np.ndarray, np.ndarray]:
    (a0, a1), (b0, b1) = world.camera_a, world.camera_b
    va = in_view(a0, world.points_t0, fov) & in_view(a1, world.points_t1, fov)
    vb = in_view(b0, world.points_t0, fov) & in_view(b1, world.points_t1, fov)
    return va, vb


def generate(config: ScenarioConfig) -> GroundTruthWorld:
    rng = np.random.default_rng(config.seed)
    deformation = DeformationField.random(rng, config.amplitude_range, config.n_modes, config.wavelength_range)
    extent = np.asarray(config.surface_extent)
    for attempt in range(1, config.max_retries + 1):
        uv = (rng.uniform(size=(config.n_points, 2)) - 0.5) * extent
        p0 = _surface(config, uv)
        p1 = p0 + deformation(p0)
        world = GroundTruthWorld(
            p0, p1, tuple(config.camera_a), tuple(config.camera_b), deformation, deformation.lipschitz_bound, attempt
        )
        va, vb = _visibility(world, config.fov_half_angle_deg)
        if np.mean(va & vb) >= config.overlap_fraction:
            return world
    raise InfeasibleScenario(
        f"overlap target {config.overlap_fraction} not reached after {config.max_retries} attempts"
    )


# --------------------------------------------------------------------------
# measures
# --------------------------------------------------------------------------


def match_overlap(cloud_a: np.ndarray, cloud_b: np.ndarray, r: float) -> np.ndarray:
    """One-to-one radius matching of two clouds in a common frame.

    Candidate pairs within ``r`` are accepted greedily by increasing
    distance. Returns a ``(k, 2)`` index array sorted by the ``cloud_a`` index.
    """
    cloud_a = np.asarray(cloud_a, dtype=float).reshape(-1, 3)
    cloud_b = np.asarray(cloud_b, dtype=float).reshape(-1, 3)
    if len(cloud_a) == 0 or len(cloud_b) == 0:
        return np.zeros((0, 2), dtype=int)
    tree = cKDTree(cloud_b)
    k = min(8, len(cloud_b))
    dist, idx = tree.query(cloud_a, k=k, distance_upper_bound=r)
    dist, idx = dist.reshape(len(cloud_a), k), idx.reshape(len(cloud_a), k)
    ia, slot = np.nonzero(np.isfinite(dist) & (dist <= r))
    cand_d, cand_b = dist[ia, slot], idx[ia, slot]
    order = np.lexsort((cand_b, ia, cand_d))
    used_a, used_b, pairs = set(), set(), []
    for o in order:
        a, b = int(ia[o]), int(cand_b[o])
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        pairs.append((a, b))
    pairs.sort()
    return np.array(pairs, dtype=int).reshape(-1, 2)


def relative_to_absolute_flow(relative_flow, m7, x4: Pose):
    """Absolute flow in B_t0 from camera B's relative flow ``m9 - m7``.

    ``apply(x4, m7 + relative) - m7``: the t1 coordinates are carried back
    into B_t0 by the ego-motion before differencing.
    """
    typed = isinstance(m7, Point3)
    rel = relative_flow.delta if isinstance(relative_flow, FlowVector) else np.asarray(relative_flow, float)
    p7 = m7.coords if typed else np.asarray(m7, dtype=float)
    out = x4.transform(p7 + rel) - p7
    return FlowVector(out) if typed or isinstance(relative_flow, FlowVector) else out


def derive_measures(world: GroundTruthWorld, config: ScenarioConfig) -> MeasureSet:
    (a0, a1), (b0, b1) = world.camera_a, world.camera_b
    m1 = compose(inverse(a0), b0)
    m2 = compose(inverse(a1), b1)
    m3 = compose(inverse(a0), a1)
    m4 = compose(inverse(b0), b1)

    va, vb = _visibility(world, config.fov_half_angle_deg)
    ids_a, ids_b = np.flatnonzero(va), np.flatnonzero(vb)
    cloud_a = inverse(a0).transform(world.points_t0[ids_a])
    cloud_b = inverse(b0).transform(world.points_t0[ids_b])
    pairs = match_overlap(cloud_a, m1.transform(cloud_b), config.match_radius)
    if len(pairs) == 0:
        raise InfeasibleScenario("no overlapping points between the two cameras")
    pa, pb = ids_a[pairs[:, 0]], ids_b[pairs[:, 1]]

    m6 = inverse(a0).transform(world.points_t0[pa])
    m8 = inverse(a1).transform(world.points_t1[pa])
    m7 = inverse(b0).transform(world.points_t0[pb])
    m9 = inverse(b1).transform(world.points_t1[pb])
    m5 = relative_to_absolute_flow(m9 - m7, m7, m4)
    return MeasureSet(m1, m2, m3, m4, m5, m6, m7, m8, m9, point_ids=pa)


def save_json(obj, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj.to_dict(), indent=2), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_world(path: str | Path) -> GroundTruthWorld:
    return GroundTruthWorld.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_scenario(path: str | Path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
