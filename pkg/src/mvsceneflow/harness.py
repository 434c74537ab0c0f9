"""Experiment sweeps, ambiguity detection and result emission.

An :class:`ExperimentSpec` describes one experiment (0-3) as a grid of
sweep points (trajectory preset x point count x m3 mode x flow layout x
noise level x known-flow count) repeated over seeds. Every run produces one
:class:`ResultRow`; rows are ordered by sweep index, then seed.

Experiment presets
------------------
0  DA and between-camera measures only; the ego-motions and the flow are
   left with a continuous gauge family.
1  as 0 plus the ego-motion of camera A, either fixed (column deletion) or
   as a soft prior.
2  DA plus known absolute flow on ``k`` points; no pose measures.
3  everything, with the flow prior on ``k`` points.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geometry import TangentDelta, inverse, retract
from .metrics import add_flow, add_transform
from .noise import POSE_PROBES, NoiseSpec, perturb_measures, rotation_sigma_for
from .residuals import POSE_MEASURES, POSE_PARAMS, MeasureSet, ParameterSet, ProblemConfig
from .solver import RankDiagnostics, SolveOptions, rank_diagnostics, solve
from .synthworld import ScenarioConfig, derive_measures, generate, static_camera_a

SPEC_SCHEMA = "mvsceneflow.experiment/v1"
RESULTS_SCHEMA = "mvsceneflow.results/v1"

_DA = ("DA0", "DA1", "SFT_A", "SFT_B")
EXPERIMENT_BLOCKS = {
    0: frozenset(_DA + ("KC", "KS1", "KS2")),
    1: frozenset(_DA + ("KC", "KS1", "KS2")),
    2: frozenset(_DA + ("KS5",)),
    3: frozenset(_DA + ("KC", "KS1", "KS2", "KS3", "KS4", "KS5")),
}
EXPERIMENT_MEASURES = {
    0: frozenset({"m1", "m2", "m6", "m7", "m8", "m9"}),
    1: frozenset({"m1", "m2", "m3", "m6", "m7", "m8", "m9"}),
    2: frozenset({"m5", "m6", "m7", "m8", "m9"}),
    3: frozenset({"m1", "m2", "m3", "m4", "m5", "m6", "m7", "m8", "m9"}),
}
TRAJECTORIES = ("moving", "static")
M3_MODES = ("fixed", "prior")
FLOW_LAYOUTS = ("random", "colinear")
PARAMS = POSE_PARAMS + ("x5",)

# ground-truth probes for each pose parameter's ADD
PARAM_PROBES = {p: POSE_PROBES[m] for p, m in zip(POSE_PARAMS, POSE_MEASURES)}


# --------------------------------------------------------------------------
# specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseLevel:
    """One point of a noise sweep.

    ``sigma_rot=None`` derives the rotation std from ``sigma_trans`` with the
    characteristic-radius rule; ``pose_targets=None`` perturbs every pose
    measure the experiment uses.
    """

    sigma_point: float = 0.0
    sigma_flow: float = 0.0
    sigma_trans: float = 0.0
    sigma_rot: float | None = None
    pose_targets: tuple | None = None
    label: str = ""

    def resolve(self, experiment: int, radius: float, seed: int, da_model: str) -> NoiseSpec:
        rot = rotation_sigma_for(self.sigma_trans, radius) if self.sigma_rot is None else self.sigma_rot
        targets = self.pose_targets
        if targets is None:
            targets = tuple(m for m in POSE_MEASURES if m in EXPERIMENT_MEASURES[experiment])
        return NoiseSpec(self.sigma_point, self.sigma_flow, self.sigma_trans, rot, seed, targets, da_model)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.pose_targets is not None:
            d["pose_targets"] = list(self.pose_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NoiseLevel:
        d = dict(d)
        if d.get("pose_targets") is not None:
            d["pose_targets"] = tuple(d["pose_targets"])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: int
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    noise: tuple = (NoiseLevel(),)
    known_flows: tuple = (0,)
    n_points: tuple = ()
    seeds: tuple = tuple(range(10))
    solve: SolveOptions = field(default_factory=SolveOptions)
    overrides: dict = field(default_factory=lambda: {"sft_a_anchor": "m6"})
    trajectories: tuple = ("moving",)
    m3_modes: tuple = ("fixed",)
    flow_layouts: tuple = ("random",)
    ambiguity: bool = False
    ambiguity_inits: int = 4
    da_model: str = "propagated"
    name: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_BLOCKS:
            raise ValueError("experiment id must be 0, 1, 2 or 3")
        for k in ("noise", "known_flows", "seeds", "trajectories", "m3_modes", "flow_layouts"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
            if not getattr(self, k):
                raise ValueError(f"{k} must be nonempty")
        object.__setattr__(self, "n_points", tuple(self.n_points) or (self.scenario.n_points,))
        if any(k < 0 for k in self.known_flows):
            raise ValueError("known-flow counts must be nonnegative")
        if self.experiment in (0, 1) and any(self.known_flows):
            raise ValueError("experiments 0 and 1 use no known flows")
        if set(self.trajectories) - set(TRAJECTORIES):
            raise ValueError(f"trajectories must be drawn from {TRAJECTORIES}")
        if set(self.m3_modes) - set(M3_MODES):
            raise ValueError(f"m3_modes must be drawn from {M3_MODES}")
        if set(self.flow_layouts) - set(FLOW_LAYOUTS):
            raise ValueError(f"flow_layouts must be drawn from {FLOW_LAYOUTS}")
        if self.ambiguity and self.ambiguity_inits < 2:
            raise ValueError("ambiguity detection needs at least two inits")
        ProblemConfig(**self.overrides)

    def sweep(self) -> list[dict]:
        """Sweep points in emission order."""
        pts = []
        grid = itertools.product(
            self.trajectories, self.n_points, self.m3_modes, self.flow_layouts, enumerate(self.noise), self.known_flows
        )
        for traj, n, mode, layout, (li, level), k in grid:
            if layout == "colinear" and k != 2:
                continue
            pts.append(dict(trajectory=traj, n_points=n, m3_mode=mode, flow_layout=layout, level=li, known_flows=k))
        return pts

    def to_dict(self) -> dict:
        return {
            "schema": SPEC_SCHEMA,
            "experiment": self.experiment,
            "name": self.name,
            "scenario": self.scenario.to_dict(),
            "noise": [lv.to_dict() for lv in self.noise],
            "known_flows": list(self.known_flows),
            "n_points": list(self.n_points),
            "seeds": list(self.seeds),
            "solve": self.solve.to_dict(),
            "overrides": dict(self.overrides),
            "trajectories": list(self.trajectories),
            "m3_modes": list(self.m3_modes),
            "flow_layouts": list(self.flow_layouts),
            "ambiguity": self.ambiguity,
            "ambiguity_inits": self.ambiguity_inits,
            "da_model": self.da_model,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        d = dict(d)
        schema = d.pop("schema", SPEC_SCHEMA)
        if schema != SPEC_SCHEMA:
            raise ValueError(f"unsupported experiment schema {schema!r}")
        if "scenario" in d:
            d["scenario"] = ScenarioConfig.from_dict(d["scenario"])
        if "noise" in d:
            d["noise"] = tuple(NoiseLevel.from_dict(x) for x in d["noise"])
        if "solve" in d:
            d["solve"] = SolveOptions.from_dict(d["solve"])
        return cls(**d)


def load_spec(path: str | Path) -> ExperimentSpec:
    return ExperimentSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


MM = 1e-3


def default_spec(experiment: int, variant: str = "") -> ExperimentSpec:
    """Preset sweeps mirroring the four experiments.

    Experiment 3 has two variants: ``""`` sweeps the known-flow count at
    n = 500, ``"timing"`` sweeps n at five known flows.
    """
    if experiment == 0:
        return ExperimentSpec(0, ambiguity=True, name="exp0")
    if experiment == 1:
        sigmas = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.4)
        da = tuple(NoiseLevel(sigma_point=s * MM, label="da") for s in sigmas)
        both = tuple(
            NoiseLevel(sigma_point=s * MM, sigma_trans=s * MM, pose_targets=("m3",), label="da+m3") for s in sigmas
        )
        return ExperimentSpec(1, noise=da + both, trajectories=TRAJECTORIES, m3_modes=M3_MODES, name="exp1")
    if experiment == 2:
        levels = tuple(NoiseLevel(sigma_flow=s * MM, label="flow") for s in (0.0, 0.25, 0.5, 0.75, 1.0))
        return ExperimentSpec(
            2,
            noise=levels,
            known_flows=(1, 2, 3, 5, 10, 20, 40),
            flow_layouts=FLOW_LAYOUTS,
            ambiguity=True,
            name="exp2",
        )
    if experiment == 3:
        level = (NoiseLevel(sigma_point=MM, sigma_flow=MM, sigma_trans=MM, label="all"),)
        if variant == "timing":
            return ExperimentSpec(3, noise=level, known_flows=(5,), n_points=(50, 100, 200, 500), name="exp3-timing")
        if variant:
            raise ValueError(f"unknown variant {variant!r}")
        return ExperimentSpec(
            3, noise=level, known_flows=(1, 2, 5, 10, 20, 30, 40, 50), n_points=(500,), name="exp3"
        )
    raise ValueError("experiment id must be 0, 1, 2 or 3")


# --------------------------------------------------------------------------
# ambiguity detection
# --------------------------------------------------------------------------


@dataclass
class AmbiguityReport:
    verdict: str  # "ambiguous", "unique" or "inconclusive"
    disagreement: dict  # free parameter -> max pairwise ADD (m)
    cost_spread: float
    ambiguous_params: tuple
    rank: RankDiagnostics
    reports: list = field(default_factory=list, repr=False)


def _param_add(p: str, a: ParameterSet, b: ParameterSet, measures: MeasureSet, mask=None) -> float:
    if p == "x5":
        sel = slice(None) if mask is None else mask
        return add_flow(a.x5[sel], b.x5[sel])
    return add_transform(a.pose(p), b.pose(p), getattr(measures, PARAM_PROBES[p]))


def random_inits(base: ParameterSet, count: int, seed: int, rot: float = 0.1, trans: float = 0.02, flow: float = 0.005):
    """``base`` followed by ``count - 1`` random perturbations of its free parts."""
    rng = np.random.default_rng(seed)
    out = [base]
    for _ in range(count - 1):
        kw = {}
        for p in POSE_PARAMS:
            if p not in base.fixed:
                d = TangentDelta(rng.normal(0.0, rot, 3), rng.normal(0.0, trans, 3))
                kw[p] = retract(base.pose(p), d)
        x5 = base.x5 + np.where(base.x5_fixed[:, None], 0.0, rng.normal(0.0, flow, base.x5.shape))
        out.append(replace(base, x5=x5, **kw))
    return out


def detect_ambiguity(
    measures: MeasureSet,
    config: ProblemConfig,
    options: SolveOptions | None = None,
    inits=(),
    *,
    threshold: float = 1e-3,
    cost_tol: float = 1e-10,
    rank_tol: float = 1e-8,
) -> AmbiguityReport:
    """Solve from every init and compare the minimisers.

    The verdict is "ambiguous" when the final costs agree within
    ``cost_tol``, some free parameter disagrees by more than ``threshold``
    (ADD, meters) and the normal matrix at the best minimiser is rank
    deficient; "unique" when no free parameter disagrees beyond
    ``threshold``; "inconclusive" otherwise.
    """
    inits = list(inits)
    if len(inits) < 2:
        raise ValueError("detect_ambiguity needs at least two inits")
    options = options or SolveOptions()
    reports = [solve(measures, config, x0, options) for x0 in inits]
    sols = [r.params for r in reports]
    free = [p for p in POSE_PARAMS if p not in inits[0].fixed]
    if not inits[0].x5_fixed.all():
        free.append("x5")
    dis = {}
    for p in free:
        dis[p] = max(_param_add(p, a, b, measures) for a, b in itertools.combinations(sols, 2))
    costs = [r.final_cost for r in reports]
    spread = float(max(costs) - min(costs))
    best = sols[int(np.argmin(costs))]
    rank = rank_diagnostics(best, measures, config)
    over = tuple(p for p in free if dis[p] > threshold)
    if not over:
        verdict = "unique"
    elif spread <= cost_tol and rank.deficient(rank_tol):
        verdict = "ambiguous"
    else:
        verdict = "inconclusive"
    return AmbiguityReport(verdict, dis, spread, over, rank, reports)


# --------------------------------------------------------------------------
# engineered flow layouts
# --------------------------------------------------------------------------


def colinear_pair(measures: MeasureSet, i: int, j: int, offset: float = 0.01) -> MeasureSet:
    """Replace point ``j`` so its trajectory lies on the line of point ``i``'s.

    Point ``j`` is moved to ``m7_i + offset * u`` (``u`` the unit flow
    direction of ``i`` in B_t0) and given the same absolute flow; its other
    observations follow from the measured poses, so every loop identity
    that held before still holds.
    """
    m = measures
    f = m.m5[i]
    norm = np.linalg.norm(f)
    if norm == 0:
        raise ValueError("point i has zero flow; its trajectory has no direction")
    p7 = m.m7[i] + offset * f / norm
    p9 = inverse(m.m4).transform(p7 + f)
    arrays = {k: getattr(m, k).copy() for k in ("m5", "m6", "m7", "m8", "m9")}
    arrays["m5"][j] = f
    arrays["m7"][j] = p7
    arrays["m9"][j] = p9
    arrays["m6"][j] = m.m1.transform(p7)
    arrays["m8"][j] = m.m2.transform(p9)
    return replace(m, **arrays)


def trajectories_colinear(measures: MeasureSet, i: int, j: int, tol: float = 1e-9) -> bool:
    """Whether the B_t0 trajectories of points ``i`` and ``j`` share one line."""
    m = measures
    a0, a1 = m.m7[i], m.m7[i] + m.m5[i]
    d = a1 - a0
    d = d / np.linalg.norm(d)
    for p in (m.m7[j], m.m7[j] + m.m5[j]):
        if np.linalg.norm(np.cross(p - a0, d)) > tol:
            return False
    return True


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


@dataclass
class ResultRow:
    experiment: int
    seed: int
    sweep_index: int
    trajectory: str
    m3_mode: str
    flow_layout: str
    noise_label: str
    sigma_point: float
    sigma_flow: float
    sigma_trans: float
    sigma_rot: float
    known_flows: int
    n_points: int
    n_matched: int
    in_da: float
    in_tf: float
    in_sf: float
    out_x1: float
    out_x2: float
    out_x3: float
    out_x4: float
    out_x5: float
    out_x5_unknown: float | None
    iterations: int
    termination: str
    initial_cost: float
    final_cost: float
    verdict: str = ""
    ambiguous_params: str = ""
    cost_spread: float | None = None
    dis_x1: float | None = None
    dis_x2: float | None = None
    dis_x3: float | None = None
    dis_x4: float | None = None
    dis_x5: float | None = None
    rank_ratio: float | None = None
    setup_ms: float = 0.0
    wall_time_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ResultRow:
        return cls(**d)


TIMING_COLUMNS = ("setup_ms", "wall_time_ms")
CSV_COLUMNS = tuple(f.name for f in fields(ResultRow) if f.name not in TIMING_COLUMNS)
SWEEP_KEYS = (
    "experiment", "sweep_index", "trajectory", "m3_mode", "flow_layout", "noise_label",
    "sigma_point", "sigma_flow", "sigma_trans", "sigma_rot", "known_flows", "n_points",
)
SERIES_METRICS = (
    "n_matched", "in_da", "in_tf", "in_sf", "out_x1", "out_x2", "out_x3", "out_x4", "out_x5",
    "out_x5_unknown", "iterations", "final_cost",
)


def _noise_seed(seed: int) -> int:
    # shared across sweep points of one seed, so noise scales with sigma
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def _flow_order(seed: int, n: int) -> np.ndarray:
    # nested known-flow subsets across the k sweep
    return np.random.default_rng([seed, 2]).permutation(n)


def _scenario(spec: ExperimentSpec, seed: int, trajectory: str, n: int) -> ScenarioConfig:
    cfg = replace(spec.scenario, seed=seed, n_points=n)
    return static_camera_a(cfg) if trajectory == "static" else cfg


def _run_world(spec: ExperimentSpec, seed: int, trajectory: str, n: int, points: list) -> list[ResultRow]:
    t0 = time.perf_counter()
    cfg = _scenario(spec, seed, trajectory, n)
    world_measures = derive_measures(generate(cfg), cfg)
    world_ms = 1e3 * (time.perf_counter() - t0)
    order = _flow_order(seed, world_measures.n)
    e = spec.experiment
    rows = []
    for idx, pt in points:
        t1 = time.perf_counter()
        k, layout, mode = pt["known_flows"], pt["flow_layout"], pt["m3_mode"]
        if k > world_measures.n:
            raise ValueError(f"{k} known flows requested but only {world_measures.n} matched points")
        exact = world_measures
        if layout == "colinear":
            exact = colinear_pair(world_measures, int(order[0]), int(order[1]))
        known = np.sort(order[:k])
        level = spec.noise[pt["level"]]
        nspec = level.resolve(e, cfg.characteristic_radius, _noise_seed(seed), spec.da_model)
        noisy, rec = perturb_measures(exact, nspec)
        active = set(EXPERIMENT_BLOCKS[e])
        if e == 1 and mode == "prior":
            active.add("KS3")
        noisy = noisy.with_available(EXPERIMENT_MEASURES[e])
        config = ProblemConfig(active=frozenset(active), ks5_indices=known if "KS5" in active else (), **spec.overrides)
        init = ParameterSet.identity(noisy.n)
        if e == 1 and mode == "fixed":
            init = replace(init, x3=noisy.m3, fixed=frozenset({"x3"}))
        setup_ms = 1e3 * (time.perf_counter() - t1) + world_ms / len(points)
        report = solve(noisy, config, init, spec.solve)

        truth = ParameterSet.from_measures(exact)
        out = {p: _param_add(p, truth, report.params, exact) for p in PARAMS}
        unknown = np.ones(noisy.n, bool)
        unknown[known] = False
        out_unknown = _param_add("x5", truth, report.params, exact, unknown) if unknown.any() else None

        amb = {}
        if spec.ambiguity and level.sigma_point == level.sigma_flow == level.sigma_trans == 0:
            inits = random_inits(init, spec.ambiguity_inits, seed)
            rep = detect_ambiguity(noisy, config, spec.solve, inits)
            amb = dict(
                verdict=rep.verdict,
                ambiguous_params=";".join(rep.ambiguous_params),
                cost_spread=rep.cost_spread,
                rank_ratio=rep.rank.ratio,
                **{f"dis_{p}": rep.disagreement.get(p) for p in PARAMS},
            )
        rows.append(
            ResultRow(
                experiment=e,
                seed=seed,
                sweep_index=idx,
                trajectory=trajectory,
                m3_mode=pt["m3_mode"] if e == 1 else "",
                flow_layout=layout if e in (2, 3) else "",
                noise_label=level.label,
                sigma_point=nspec.sigma_point,
                sigma_flow=nspec.sigma_flow,
                sigma_trans=nspec.sigma_trans,
                sigma_rot=nspec.sigma_rot,
                known_flows=k,
                n_points=n,
                n_matched=noisy.n,
                in_da=rec.in_da,
                in_tf=rec.in_tf,
                in_sf=rec.in_sf,
                out_x1=out["x1"],
                out_x2=out["x2"],
                out_x3=out["x3"],
                out_x4=out["x4"],
                out_x5=out["x5"],
                out_x5_unknown=out_unknown,
                iterations=report.iterations,
                termination=report.termination,
                initial_cost=report.initial_cost,
                final_cost=report.final_cost,
                setup_ms=setup_ms,
                wall_time_ms=report.wall_time_ms,
                **amb,
            )
        )
    return rows


def _run_task(args):
    return _run_world(*args)


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> list[ResultRow]:
    """All (sweep point x seed) runs of ``spec``, ordered by sweep index then seed."""
    sweep = list(enumerate(spec.sweep()))
    tasks = []
    for seed in spec.seeds:
        for traj in spec.trajectories:
            for n in spec.n_points:
                pts = [(i, p) for i, p in sweep if p["trajectory"] == traj and p["n_points"] == n]
                if pts:
                    tasks.append((spec, seed, traj, n, pts))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_task, tasks))
    else:
        chunks = [_run_task(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    seed_rank = {s: i for i, s in enumerate(spec.seeds)}
    rows.sort(key=lambda r: (r.sweep_index, seed_rank[r.seed]))
    return rows


# --------------------------------------------------------------------------
# emission and aggregation
# --------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def aggregate(rows: list[ResultRow]) -> list[dict]:
    """Mean and sample std over seeds for every sweep point, in sweep order."""
    groups: dict = {}
    for r in rows:
        key = tuple(getattr(r, k) for k in SWEEP_KEYS)
        groups.setdefault(key, []).append(r)
    out = []
    for key, grp in groups.items():
        rec = dict(zip(SWEEP_KEYS, key))
        rec["n_seeds"] = len(grp)
        for m in SERIES_METRICS:
            vals = [getattr(r, m) for r in grp if getattr(r, m) is not None]
            if vals:
                rec[f"{m}_mean"] = float(np.mean(vals))
                rec[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            else:
                rec[f"{m}_mean"] = rec[f"{m}_std"] = None
        verdicts = [r.verdict for r in grp if r.verdict]
        rec["verdicts"] = ";".join(sorted(set(verdicts)))
        out.append(rec)
    return out


def _write_csv(path: Path, header, records) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            w.writerow([_cell(rec[h]) for h in header])


def emit_results(rows: list[ResultRow], out_dir: str | Path, spec: ExperimentSpec | None = None) -> dict:
    """Write ``results.csv``, ``timing.csv``, ``series.csv`` and ``results.json``.

    ``results.csv`` omits the timing columns so reruns are byte-identical;
    timings go to ``timing.csv`` keyed by sweep index and seed.
    """
    if not rows:
        raise ValueError("no result rows to emit")
    out_dir = Path(out_dir)
    paths = {k: out_dir / f for k, f in [("csv", "results.csv"), ("timing", "timing.csv"),
                                          ("series", "series.csv"), ("json", "results.json")]}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        dicts = [r.to_dict() for r in rows]
        _write_csv(paths["csv"], CSV_COLUMNS, dicts)
        _write_csv(paths["timing"], ("experiment", "sweep_index", "seed", "n_points") + TIMING_COLUMNS, dicts)
        series = aggregate(rows)
        _write_csv(paths["series"], list(series[0].keys()), series)
        doc = {"schema": RESULTS_SCHEMA, "spec": spec.to_dict() if spec else None, "rows": dicts}
        paths["json"].write_text(json.dumps(doc, indent=1), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results under {out_dir}: {exc}") from exc
    return paths


def load_results(path: str | Path) -> tuple[ExperimentSpec | None, list[ResultRow]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != RESULTS_SCHEMA:
        raise ValueError(f"unsupported results schema {doc.get('schema')!r}")
    spec = ExperimentSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    return spec, [ResultRow.from_dict(d) for d in doc["rows"]]


# --------------------------------------------------------------------------
# invariant checks
# --------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def monotone_within(means, stds, increasing: bool = True) -> bool:
    """Consecutive means never move the wrong way by more than one std."""
    for i in range(len(means) - 1):
        step = means[i + 1] - means[i]
        if not increasing:
            step = -step
        if step < -max(stds[i], stds[i + 1]):
            return False
    return True


def _series(rows, x: str, metric: str, **where):
    sel = [r for r in rows if all(getattr(r, k) == v for k, v in where.items())]
    xs = sorted({getattr(r, x) for r in sel})
    means, stds = [], []
    for v in xs:
        vals = [getattr(r, metric) for r in sel if getattr(r, x) == v and getattr(r, metric) is not None]
        means.append(float(np.mean(vals)))
        stds.append(float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
    return xs, np.array(means), np.array(stds)


def _noise_free(r: ResultRow) -> bool:
    return r.sigma_point == r.sigma_flow == r.sigma_trans == 0


def check_exact_recovery(rows, tol: float = 1e-6, cost_tol: float = 1e-15, time_ms: float = 1000.0) -> CheckResult:
    """Noise-free rows of a well-posed configuration must hit the ground truth."""
    clean = [r for r in rows if _noise_free(r)]
    if not clean:
        return CheckResult("exact recovery", False, "no noise-free well-posed rows")
    worst = max(max(r.out_x1, r.out_x2, r.out_x3, r.out_x4, r.out_x5) for r in clean)
    cost = max(r.final_cost for r in clean)
    slow = max(r.setup_ms + r.wall_time_ms for r in clean)
    ok = worst <= tol and cost <= cost_tol and slow <= time_ms
    return CheckResult("exact recovery", ok, f"{len(clean)} runs, max ADD {worst:.2e} m, max cost {cost:.2e}, max {slow:.1f} ms")


def check_exp0(rows) -> list[CheckResult]:
    rows = [r for r in rows if r.experiment == 0 and r.verdict]
    rec = all(max(r.out_x1, r.out_x2) <= 1e-6 for r in rows)
    amb = [r for r in rows if r.verdict == "ambiguous" and {"x3", "x4", "x5"} <= set(r.ambiguous_params.split(";"))]
    worst = max((max(r.out_x1, r.out_x2) for r in rows), default=math.inf)
    return [
        CheckResult("exp0 x1/x2 recovered", bool(rows) and rec, f"max ADD {worst:.2e} m over {len(rows)} runs"),
        CheckResult("exp0 x3/x4/x5 ambiguous", bool(rows) and len(amb) == len(rows), f"{len(amb)}/{len(rows)} seeds"),
    ]


def check_exp1(rows) -> list[CheckResult]:
    out = []
    for traj in sorted({r.trajectory for r in rows if r.experiment == 1}):
        sel = dict(experiment=1, trajectory=traj, m3_mode="fixed", noise_label="da")
        xs, in_da, _ = _series(rows, "sigma_point", "in_da", **sel)
        if not xs:
            continue
        worst = 0.0
        for p in ("out_x4", "out_x5"):
            _, mu, _ = _series(rows, "sigma_point", p, **sel)
            worst = max(worst, float(mu.max()))
        out.append(CheckResult(
            f"exp1[{traj}] x4/x5 sub-mm", worst < 1e-3,
            f"ADD_inDA up to {in_da.max() * 1e3:.2f} mm, max mean ADD_out(x4,x5) {worst * 1e3:.3f} mm"))
        ok, detail = in_da.max() >= 10e-3, []
        for p in ("out_x1", "out_x2"):
            _, mu, sd = _series(rows, "sigma_point", p, **sel)
            ok &= monotone_within(mu, sd) and mu[-1] > mu[0]
            detail.append(f"{p} {mu[0] * 1e3:.3f}->{mu[-1] * 1e3:.3f} mm")
        out.append(CheckResult(f"exp1[{traj}] x1/x2 grow with noise", bool(ok), ", ".join(detail)))
    return out


def check_exp2(rows) -> list[CheckResult]:
    rows = [r for r in rows if r.experiment == 2]
    out = []
    clean = [r for r in rows if r.verdict]
    k1 = [r for r in clean if r.known_flows == 1]
    out.append(CheckResult("exp2 k=1 ambiguous", bool(k1) and all(r.verdict == "ambiguous" for r in k1),
                           f"{sum(r.verdict == 'ambiguous' for r in k1)}/{len(k1)} seeds"))
    spread = [r for r in clean if r.known_flows == 2 and r.flow_layout == "random"]
    dis = max((max(getattr(r, f"dis_{p}") or 0.0 for p in PARAMS) for r in spread), default=math.inf)
    out.append(CheckResult("exp2 k=2 non-colinear unique",
                           bool(spread) and all(r.verdict == "unique" for r in spread) and dis <= 1e-6,
                           f"verdicts {sorted({r.verdict for r in spread})}, max disagreement {dis:.2e} m"))
    col = [r for r in clean if r.known_flows == 2 and r.flow_layout == "colinear"]
    out.append(CheckResult("exp2 k=2 colinear ambiguous", bool(col) and all(r.verdict == "ambiguous" for r in col),
                           f"{sum(r.verdict == 'ambiguous' for r in col)}/{len(col)} seeds"))
    ks = sorted({r.known_flows for r in rows if r.known_flows >= 3})
    ok, worst = bool(ks), ""
    for k in ks:
        _, mu, sd = _series(rows, "sigma_flow", "out_x5", experiment=2, known_flows=k, flow_layout="random")
        good = monotone_within(mu, sd) and mu[-1] > mu[0]
        ok &= good
        if not good:
            worst += f" k={k}"
    out.append(CheckResult("exp2 ADD_outSF rises with sigma_flow", bool(ok), f"k in {ks}" + (f"; fails at{worst}" if worst else "")))
    ok = True
    for s in sorted({r.sigma_flow for r in rows if r.sigma_flow > 0}):
        _, mu, sd = _series([r for r in rows if r.known_flows >= 3], "known_flows", "out_x5_unknown",
                            experiment=2, sigma_flow=s, flow_layout="random")
        ok &= monotone_within(mu, sd, increasing=False)
    out.append(CheckResult("exp2 unmeasured-flow error falls with k", bool(ok), "k >= 3, every sigma_flow > 0"))
    return out


def check_exp3_saturation(rows, k0: int = 20, rel: float = 0.10) -> CheckResult:
    rows = [r for r in rows if r.experiment == 3]
    ks = sorted({r.known_flows for r in rows})
    if k0 not in ks or ks[-1] <= k0:
        return CheckResult("exp3 saturation", False, f"sweep {ks} does not extend beyond {k0}")
    ok, detail = True, []
    for p in ("out_x3", "out_x4", "out_x5"):
        xs, mu, sd = _series(rows, "known_flows", p, experiment=3)
        i0 = xs.index(k0)
        change = np.abs(mu[i0:] / mu[i0] - 1.0).max()
        good = monotone_within(mu, sd, increasing=False) and change < rel
        ok &= good
        detail.append(f"{p} {mu[i0] * 1e3:.3f} mm at k={k0}, max change {100 * change:.1f}%")
    return CheckResult("exp3 saturation beyond k=20", bool(ok), "; ".join(detail))


def check_timing(rows, r2_min: float = 0.95, reference_ms: float = 15.0, factor: float = 10.0) -> CheckResult:
    """Median solve time linear in n, and n = 500 within ``factor`` of ``reference_ms``."""
    rows = [r for r in rows if r.experiment == 3]
    ns = sorted({r.n_points for r in rows})
    if len(ns) < 3:
        return CheckResult("exp3 timing linear in n", False, f"need >= 3 point counts, got {ns}")
    med = np.array([np.median([r.wall_time_ms for r in rows if r.n_points == n]) for n in ns])
    slope, icpt = np.polyfit(ns, med, 1)
    pred = slope * np.asarray(ns) + icpt
    r2 = 1.0 - np.sum((med - pred) ** 2) / np.sum((med - med.mean()) ** 2)
    ok = r2 >= r2_min and reference_ms / factor <= med[-1] <= reference_ms * factor
    return CheckResult("exp3 timing linear in n", bool(ok),
                       f"medians {dict(zip(ns, np.round(med, 2).tolist()))} ms, R^2 {r2:.4f}, slope {slope * 1e3:.1f} us/point")


def check_rows(rows) -> list[CheckResult]:
    """Every check that applies to the experiments present in ``rows``."""
    exps = {r.experiment for r in rows}
    out = []
    if exps & {1, 3}:
        clean = [r for r in rows if r.experiment in (1, 3) and _noise_free(r) and r.known_flows != 1]
        if clean:
            out.append(check_exact_recovery(clean))
    if 0 in exps:
        out += check_exp0(rows)
    if 1 in exps:
        out += check_exp1(rows)
    if 2 in exps:
        out += check_exp2(rows)
    if 3 in exps:
        r3 = [r for r in rows if r.experiment == 3]
        if len({r.known_flows for r in r3}) > 1:
            out.append(check_exp3_saturation(rows))
        if len({r.n_points for r in r3}) > 1:
            out.append(check_timing(rows))
    return out
