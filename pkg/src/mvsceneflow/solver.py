"""Levenberg-Marquardt over the pose/flow parameter manifold.

The normal equations are assembled block-wise: a dense pose block (at most
24 x 24), one 3x3 block per free flow, and the pose/flow coupling. Flow
blocks are eliminated by a Schur complement before a Cholesky solve of the
reduced pose system, the same ordering a sparse Cholesky with landmark
elimination would pick.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse

from .geometry import Pose, TangentDelta, retract, rigid_align, skew, so3_left_jacobian_inv
from .residuals import (
    BLOCK_PARAMS,
    POSE_PARAMS,
    MeasureSet,
    ParameterSet,
    ProblemConfig,
    evaluate_blocks,
    kc_prediction,
    quat_conj,
    quat_log,
    quat_mul,
    total_cost,
)

log = logging.getLogger(__name__)

TERMINATIONS = ("cost_tolerance", "gradient_tolerance", "max_iterations", "numerical_failure")
DERIVATIVE_MODES = ("analytic", "autodiff", "fd_check")


class NonFiniteError(FloatingPointError):
    def __init__(self, block: str, index: int, what: str = "residual"):
        super().__init__(f"non-finite {what} in block {block} at row {index}")
        self.block = block
        self.index = index


class DerivativeMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 100
    cost_tolerance: float = 1e-12
    gradient_tolerance: float = 1e-10
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_damping: float = 1e16
    derivatives: str = "analytic"
    linear_solver: str = "schur"
    rank_diagnostics: bool = False
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.cost_tolerance > 0 and self.gradient_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.derivatives not in DERIVATIVE_MODES:
            raise ValueError(f"derivatives must be one of {DERIVATIVE_MODES}")
        if self.linear_solver not in ("schur", "dense"):
            raise ValueError("linear_solver must be 'schur' or 'dense'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> SolveOptions:
        return cls(**d)


@dataclass
class RankDiagnostics:
    min_eigenvalue: float
    max_eigenvalue: float
    n_columns: int
    # share of the weakest eigenvector carried by each parameter group
    null_direction: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        if self.max_eigenvalue <= 0:
            return 0.0
        return max(self.min_eigenvalue, 0.0) / self.max_eigenvalue

    def deficient(self, threshold: float = 1e-8) -> bool:
        return self.ratio < threshold


@dataclass
class SolveReport:
    params: ParameterSet
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    wall_time_ms: float
    cost_trace: list
    rank: RankDiagnostics | None = None
    init: str = "given"

    @property
    def converged(self) -> bool:
        return self.termination in ("cost_tolerance", "gradient_tolerance")


# --------------------------------------------------------------------------
# column layout
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ColumnLayout:
    pose_offsets: dict
    n_pose: int
    flow_free: np.ndarray
    flow_rank: np.ndarray

    @classmethod
    def of(cls, params: ParameterSet) -> ColumnLayout:
        offsets, c = {}, 0
        for name in POSE_PARAMS:
            if name not in params.fixed:
                offsets[name] = c
                c += 6
        free = ~params.x5_fixed
        rank = np.cumsum(free) - 1
        rank[~free] = -1
        return cls(offsets, c, free, rank)

    @property
    def n_free_flows(self) -> int:
        return int(self.flow_free.sum())

    @property
    def n_columns(self) -> int:
        return self.n_pose + 3 * self.n_free_flows

    def retract(self, params: ParameterSet, step: np.ndarray) -> ParameterSet:
        kw = {}
        for name, off in self.pose_offsets.items():
            kw[name] = retract(params.pose(name), TangentDelta.from_vector(step[off : off + 6]))
        x5 = params.x5.copy()
        x5[self.flow_free] += step[self.n_pose :].reshape(-1, 3)
        return replace(params, x5=x5, **kw)


# --------------------------------------------------------------------------
# linearisation
# --------------------------------------------------------------------------


@dataclass(eq=False)
class BlockLinearization:
    name: str
    weight: float
    residual: np.ndarray  # (rows, dim)
    pose_jacobians: dict  # param -> (rows, dim, 6)
    flow_jacobian: np.ndarray | None = None  # (rows, dim, 3)
    flow_index: np.ndarray | None = None  # (rows,)


@dataclass(eq=False)
class NormalEquations:
    H_pp: np.ndarray  # (P, P)
    H_pf: np.ndarray  # (k, P, 3), free flows only
    H_ff: np.ndarray  # (k, 3, 3)
    g_p: np.ndarray  # (P,)
    g_f: np.ndarray  # (k, 3)

    @property
    def gradient(self) -> np.ndarray:
        return np.concatenate([self.g_p, self.g_f.ravel()])

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        P, k = len(self.g_p), len(self.g_f)
        N = P + 3 * k
        H = np.zeros((N, N))
        H[:P, :P] = self.H_pp
        if k:
            coupling = self.H_pf.transpose(1, 0, 2).reshape(P, 3 * k)
            H[:P, P:] = coupling
            H[P:, :P] = coupling.T
            H[P:, P:] = scipy.linalg.block_diag(*self.H_ff)
        return H, self.gradient


@dataclass(eq=False)
class Linearization:
    blocks: list
    layout: ColumnLayout
    n: int

    def cost(self) -> float:
        return float(sum(0.5 * b.weight * np.sum(b.residual**2) for b in self.blocks))

    def residual_vector(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.residual.ravel() for b in self.blocks])

    def row_weights(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([np.full(b.residual.size, b.weight) for b in self.blocks])

    def jacobian(self) -> scipy.sparse.csr_matrix:
        """Stacked (unweighted) Jacobian over the free tangent columns."""
        rows, cols, vals = [], [], []
        row0 = 0
        L = self.layout
        for b in self.blocks:
            m, d = b.residual.shape
            r = row0 + np.arange(m * d).reshape(m, d)
            for name, J in b.pose_jacobians.items():
                if name not in L.pose_offsets:
                    continue
                c = L.pose_offsets[name] + np.arange(6)
                rr, cc = np.broadcast_arrays(r[:, :, None], c[None, None, :])
                rows.append(rr.ravel()), cols.append(cc.ravel()), vals.append(J.ravel())
            if b.flow_jacobian is not None:
                keep = L.flow_free[b.flow_index]
                c = L.n_pose + 3 * L.flow_rank[b.flow_index[keep]][:, None, None] + np.arange(3)
                rr, cc = np.broadcast_arrays(r[keep][:, :, None], c)
                rows.append(rr.ravel()), cols.append(cc.ravel()), vals.append(b.flow_jacobian[keep].ravel())
            row0 += m * d
        if rows:
            rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(row0, L.n_columns))

    def normal_equations(self) -> NormalEquations:
        L = self.layout
        P = L.n_pose
        H_pp = np.zeros((P, P))
        g_p = np.zeros(P)
        H_pf = np.zeros((self.n, P, 3))
        H_ff = np.zeros((self.n, 3, 3))
        g_f = np.zeros((self.n, 3))
        for b in self.blocks:
            w, r = b.weight, b.residual
            if w == 0.0:
                continue
            m, d = r.shape
            Jp = None
            free = [(L.pose_offsets[k], J) for k, J in b.pose_jacobians.items() if k in L.pose_offsets]
            if free:
                Jp = np.zeros((m, d, P))
                for o, J in free:
                    Jp[:, :, o : o + 6] = J
                flat = Jp.reshape(m * d, P)
                H_pp += w * (flat.T @ flat)
                g_p += w * (flat.T @ r.reshape(-1))
            if b.flow_jacobian is not None:
                Jf, idx = b.flow_jacobian, b.flow_index
                JfT = Jf.transpose(0, 2, 1)
                H_ff[idx] += w * (JfT @ Jf)
                g_f[idx] += w * (JfT @ r[:, :, None])[:, :, 0]
                if Jp is not None:
                    H_pf[idx] += w * (Jp.transpose(0, 2, 1) @ Jf)
        keep = L.flow_free
        return NormalEquations(H_pp, H_pf[keep], H_ff[keep], g_p, g_f[keep])


def _analytic_blocks(params: ParameterSet, measures: MeasureSet, config: ProblemConfig) -> dict:
    """``{block: (residual, {param: jacobian})}`` from closed-form derivatives."""
    res = evaluate_blocks(params, measures, config)
    n = measures.n
    I3 = np.eye(3)
    R1, R3, R4 = params.x1.R, params.x3.R, params.x4.R
    out = {}
    for b, r in res.items():
        m = len(r)
        if b in ("DA0", "DA1"):
            x = params.x1 if b == "DA0" else params.x2
            src = measures.m7 if b == "DA0" else measures.m9
            J = np.empty((m, 3, 6))
            J[:, :, :3] = x.R @ skew(src)
            J[:, :, 3:] = -I3
            out[b] = (r, {"x1" if b == "DA0" else "x2": J})
        elif b == "SFT_A":
            if config.sft_a_anchor == "m7":
                p = measures.m7 + params.x5
                w = p @ R1.T + params.x1.t
                J1t = np.broadcast_to(-R3.T, (n, 3, 3))
            else:
                p = params.x5
                w = measures.m6 + p @ R1.T
                J1t = np.zeros((n, 3, 3))
            u = (w - params.x3.t) @ R3
            R31 = R3.T @ R1
            J1 = np.concatenate([R31 @ skew(p), J1t], axis=2)
            J3 = np.concatenate([-skew(u), np.broadcast_to(R3.T, (n, 3, 3))], axis=2)
            J5 = np.broadcast_to(-R31, (n, 3, 3))
            out[b] = (r, {"x1": J1, "x3": J3, "x5": J5})
        elif b == "SFT_B":
            u = (measures.m7 + params.x5 - params.x4.t) @ R4
            J4 = np.concatenate([-skew(u), np.broadcast_to(R4.T, (n, 3, 3))], axis=2)
            J5 = np.broadcast_to(-R4.T, (n, 3, 3))
            out[b] = (r, {"x4": J4, "x5": J5})
        elif b == "KC":
            q, t = kc_prediction(params.x1, params.x3, params.x4)
            RP = Pose(q, t).R
            Jl = so3_left_jacobian_inv(r[0, :3])
            J1 = np.zeros((6, 6))
            J3 = np.zeros((6, 6))
            J4 = np.zeros((6, 6))
            J1[:3, :3] = -Jl @ R4.T
            J4[:3, :3] = -Jl
            J3[:3, :3] = Jl @ RP.T
            J1[3:, 3:] = -R3.T
            J4[3:, 3:] = -R3.T @ R1
            J3[3:, 3:] = R3.T
            J1[3:, :3] = R3.T @ R1 @ skew(params.x4.t)
            J3[3:, :3] = -skew(t)
            out[b] = (r, {"x1": J1[None], "x3": J3[None], "x4": J4[None]})
        elif b == "KS5":
            out[b] = (r, {"x5": np.broadcast_to(-I3, (m, 3, 3))})
        else:
            k = b[2]
            J = np.zeros((6, 6))
            J[:3, :3] = -so3_left_jacobian_inv(r[0, :3])
            J[3:, 3:] = -I3
            out[b] = (r, {f"x{k}": J[None]})
    return out


def _perturbed(params: ParameterSet, name: str, j: int, h: float, rows=None) -> ParameterSet:
    if name == "x5":
        x5 = params.x5.copy()
        x5[rows, j] += h
        return replace(params, x5=x5)
    d = np.zeros(6)
    d[j] = h
    return replace(params, **{name: retract(params.pose(name), TangentDelta.from_vector(d))})


def finite_difference_blocks(
    params: ParameterSet, measures: MeasureSet, config: ProblemConfig, step: float = 1e-6
) -> dict:
    """Central differences in tangent space, same layout as the analytic blocks.

    Each flow column is perturbed for all points at once; a flow only enters
    its own point's rows, so the per-row derivatives are unaffected.
    """
    base = evaluate_blocks(params, measures, config)
    out = {b: (r, {}) for b, r in base.items()}
    for name in POSE_PARAMS + ("x5",):
        width = 3 if name == "x5" else 6
        users = [b for b in base if name in BLOCK_PARAMS[b]]
        if not users:
            continue
        cols = {b: [] for b in users}
        for j in range(width):
            rows = slice(None) if name == "x5" else None
            rp = evaluate_blocks(_perturbed(params, name, j, step, rows), measures, config)
            rm = evaluate_blocks(_perturbed(params, name, j, -step, rows), measures, config)
            for b in users:
                cols[b].append((rp[b] - rm[b]) / (2 * step))
        for b in users:
            out[b][1][name] = np.stack(cols[b], axis=-1)
    return out


def _wrap(raw: dict, config: ProblemConfig, layout: ColumnLayout, n: int) -> Linearization:
    blocks = []
    point_idx = np.arange(n)
    for b, (r, jacs) in raw.items():
        bad = ~np.isfinite(r).all(axis=1)
        if bad.any():
            raise NonFiniteError(b, int(np.argmax(bad)))
        for J in jacs.values():
            badj = ~np.isfinite(J).all(axis=(1, 2))
            if badj.any():
                raise NonFiniteError(b, int(np.argmax(badj)), "derivative")
        flow_index = None
        if "x5" in jacs:
            flow_index = np.asarray(config.ks5_indices, dtype=int) if b == "KS5" else point_idx
        blocks.append(
            BlockLinearization(
                b,
                config.weight(b),
                r,
                {k: J for k, J in jacs.items() if k != "x5"},
                jacs.get("x5"),
                flow_index,
            )
        )
    return Linearization(blocks, layout, n)


def _check_derivatives(raw: dict, fd: dict, atol: float = 1e-5, rtol: float = 1e-4) -> None:
    for b, (_, jacs) in raw.items():
        for name, J in jacs.items():
            Jfd = fd[b][1][name]
            tol = np.maximum(atol, rtol * np.abs(Jfd))
            err = np.abs(J - Jfd)
            if np.any(err > tol):
                raise DerivativeMismatch(f"{b}/{name}: max derivative error {err.max():.3e}")


def linearize(
    params: ParameterSet,
    measures: MeasureSet,
    config: ProblemConfig,
    derivatives: str = "analytic",
    fd_step: float = 1e-6,
) -> Linearization:
    if params.n != measures.n:
        raise ValueError(f"parameter set has {params.n} points, measures have {measures.n}")
    # non-finite values are reported by _wrap with their block and row
    with np.errstate(invalid="ignore", over="ignore"):
        if derivatives == "autodiff":
            from .autodiff import autodiff_blocks

            raw = autodiff_blocks(params, measures, config)
        elif derivatives == "analytic":
            raw = _analytic_blocks(params, measures, config)
        elif derivatives == "fd_check":
            raw = _analytic_blocks(params, measures, config)
            _check_derivatives(raw, finite_difference_blocks(params, measures, config, fd_step))
        elif derivatives == "finite_difference":
            raw = finite_difference_blocks(params, measures, config, fd_step)
        else:
            raise ValueError(f"unknown derivative mode {derivatives!r}")
    return _wrap(raw, config, ColumnLayout.of(params), measures.n)


# --------------------------------------------------------------------------
# linear solves
# --------------------------------------------------------------------------


def _damping_diag(diag: np.ndarray) -> np.ndarray:
    return np.clip(diag, 1e-6, 1e32)


@dataclass(eq=False)
class ReducedSystem:
    """Pose-only system left after eliminating every free flow block."""

    S: np.ndarray
    rhs: np.ndarray
    A_inv: np.ndarray  # (k, 3, 3) damped flow-block inverses
    H_pf: np.ndarray
    g_f: np.ndarray

    def back_substitute(self, dp: np.ndarray) -> np.ndarray:
        if len(self.g_f) == 0:
            return np.zeros(0)
        b = self.g_f + np.einsum("kpi,p->ki", self.H_pf, dp)
        return -np.einsum("kij,kj->ki", self.A_inv, b)

    def solve(self) -> np.ndarray:
        if len(self.rhs):
            c = scipy.linalg.cho_factor(self.S, check_finite=True)
            dp = scipy.linalg.cho_solve(c, self.rhs)
        else:
            dp = np.zeros(0)
        return np.concatenate([dp, self.back_substitute(dp).ravel()])


def _invert_flow_blocks(A: np.ndarray) -> np.ndarray:
    inv = np.empty_like(A)
    for_fallback = np.zeros(len(A), bool)
    try:
        L = np.linalg.cholesky(A)
        eye = np.broadcast_to(np.eye(3), A.shape)
        Linv = np.linalg.solve(L, eye)
        inv[:] = Linv.transpose(0, 2, 1) @ Linv
    except np.linalg.LinAlgError:
        for_fallback[:] = True
    if for_fallback.any():
        for i in range(len(A)):
            Ai = A[i]
            scale = max(np.trace(Ai) / 3.0, 1e-12)
            lam = 0.0
            while True:
                try:
                    np.linalg.cholesky(Ai + lam * np.eye(3))
                    inv[i] = np.linalg.inv(Ai + lam * np.eye(3))
                    break
                except np.linalg.LinAlgError:
                    lam = max(lam * 10.0, 1e-12 * scale)
    return inv


def eliminate_flow_blocks(neq: NormalEquations | Linearization, damping: float = 0.0) -> ReducedSystem:
    """Schur-complement the per-point flow blocks out of the normal equations.

    ``damping`` adds ``damping * diag(H)`` (clamped) to every diagonal,
    matching :func:`dense_step`.
    """
    if isinstance(neq, Linearization):
        neq = neq.normal_equations()
    H_pp = neq.H_pp + damping * np.diag(_damping_diag(np.diag(neq.H_pp)))
    A = neq.H_ff.copy()
    if len(A):
        d = _damping_diag(np.einsum("kii->ki", A))
        A[:, [0, 1, 2], [0, 1, 2]] += damping * d
    A_inv = _invert_flow_blocks(A) if len(A) else A
    if len(A) == 0:
        return ReducedSystem(H_pp, -neq.g_p, A_inv, neq.H_pf, neq.g_f)
    CA = neq.H_pf @ A_inv  # (k, P, 3)
    S = H_pp - np.tensordot(CA, neq.H_pf, axes=([0, 2], [0, 2]))
    rhs = -neq.g_p + np.einsum("kpi,ki->p", CA, neq.g_f)
    return ReducedSystem(0.5 * (S + S.T), rhs, A_inv, neq.H_pf, neq.g_f)


def dense_step(neq: NormalEquations | Linearization, damping: float = 0.0) -> np.ndarray:
    if isinstance(neq, Linearization):
        neq = neq.normal_equations()
    H, g = neq.dense()
    H = H + damping * np.diag(_damping_diag(np.diag(H)))
    c = scipy.linalg.cho_factor(H, check_finite=True)
    return scipy.linalg.cho_solve(c, -g)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def rank_diagnostics(params: ParameterSet, measures: MeasureSet, config: ProblemConfig) -> RankDiagnostics:
    """Extreme eigenvalues of the undamped normal matrix over the free tangent space."""
    lin = linearize(params, measures, config)
    H, _ = lin.normal_equations().dense()
    if H.size == 0:
        return RankDiagnostics(0.0, 0.0, 0)
    evals, evecs = np.linalg.eigh(H)
    v = evecs[:, 0]
    L = lin.layout
    share = {name: float(np.linalg.norm(v[o : o + 6])) for name, o in L.pose_offsets.items()}
    share["x5"] = float(np.linalg.norm(v[L.n_pose :]))
    return RankDiagnostics(float(evals[0]), float(evals[-1]), len(H), share)


# --------------------------------------------------------------------------
# Levenberg-Marquardt
# --------------------------------------------------------------------------


def warm_start(measures: MeasureSet, base: ParameterSet | None = None) -> ParameterSet:
    """``base`` (default all-identity) with x1/x2 from closed-form DA alignment."""
    base = base or ParameterSet.identity(measures.n)
    kw = {}
    if "x1" not in base.fixed:
        kw["x1"] = rigid_align(measures.m7, measures.m6)
    if "x2" not in base.fixed:
        kw["x2"] = rigid_align(measures.m9, measures.m8)
    return replace(base, **kw)


def solve(
    measures: MeasureSet,
    config: ProblemConfig,
    init: ParameterSet | None = None,
    options: SolveOptions | None = None,
) -> SolveReport:
    options = options or SolveOptions()
    config.validate(measures)
    init_desc = "given"
    if init is None:
        init = ParameterSet.identity(measures.n)
        init_desc = "identity"
    if init.n != measures.n:
        raise ValueError(f"init has {init.n} points, measures have {measures.n}")

    t_start = time.perf_counter()
    params = init
    lam = options.initial_damping
    termination = "max_iterations"
    iterations = 0
    try:
        lin = linearize(params, measures, config, options.derivatives, options.fd_step)
        with np.errstate(over="ignore", invalid="ignore"):
            cost = lin.cost()
        if not np.isfinite(cost):
            raise NonFiniteError("total", -1, "cost")
    except NonFiniteError as exc:
        log.warning("%s", exc)
        elapsed = 1e3 * (time.perf_counter() - t_start)
        return SolveReport(params, np.inf, np.inf, 0, "numerical_failure", elapsed, [], None, init_desc)
    initial_cost = cost
    trace = [cost]
    neq = lin.normal_equations()

    while iterations < options.max_iterations:
        g = neq.gradient
        if g.size == 0 or np.max(np.abs(g)) <= options.gradient_tolerance:
            termination = "gradient_tolerance"
            break
        iterations += 1
        try:
            if options.linear_solver == "schur":
                step = eliminate_flow_blocks(neq, lam).solve()
            else:
                step = dense_step(neq, lam)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError("non-finite step")
        except (np.linalg.LinAlgError, ValueError):
            lam *= options.damping_up
            if lam > options.max_damping:
                termination = "numerical_failure"
                break
            continue

        candidate = lin.layout.retract(params, step)
        try:
            new_cost = total_cost(candidate, measures, config)
        except ValueError:
            new_cost = np.inf
        if not np.isfinite(new_cost):
            new_cost = np.inf

        if new_cost <= cost:
            decrease = cost - new_cost
            params, prev = candidate, cost
            cost = new_cost
            trace.append(cost)
            lam = max(lam / options.damping_down, 1e-15)
            if decrease <= options.cost_tolerance * prev:
                termination = "cost_tolerance"
                break
            try:
                lin = linearize(params, measures, config, options.derivatives, options.fd_step)
            except NonFiniteError as exc:
                log.warning("%s", exc)
                termination = "numerical_failure"
                break
            neq = lin.normal_equations()
        else:
            if new_cost - cost <= options.cost_tolerance * cost:
                termination = "cost_tolerance"
                break
            lam *= options.damping_up
            if lam > options.max_damping:
                termination = "numerical_failure"
                break

    elapsed = 1e3 * (time.perf_counter() - t_start)
    rank = rank_diagnostics(params, measures, config) if options.rank_diagnostics else None
    return SolveReport(params, initial_cost, cost, iterations, termination, elapsed, trace, rank, init_desc)
