from dataclasses import replace

import numpy as np
import pytest

from helpers import random_pose
from mvsceneflow.autodiff import autodiff_blocks
from mvsceneflow.geometry import Pose, TangentDelta, local, retract, rigid_align
from mvsceneflow.metrics import add_flow, add_transform
from mvsceneflow.residuals import BLOCKS, MeasureSet, ParameterSet, ProblemConfig
from mvsceneflow import solver
from mvsceneflow.solver import (
    ColumnLayout,
    DerivativeMismatch,
    NonFiniteError,
    SolveOptions,
    dense_step,
    eliminate_flow_blocks,
    finite_difference_blocks,
    linearize,
    rank_diagnostics,
    solve,
    warm_start,
)
from mvsceneflow.synthworld import derive_measures, generate, s1_config

I = Pose.identity()
EXP1 = frozenset({"DA0", "DA1", "SFT_A", "SFT_B", "KC", "KS1", "KS2"})


def world(seed=42, n=100):
    cfg = s1_config(seed=seed, n_points=n)
    return derive_measures(generate(cfg), cfg)


def perturbed(params, rng, rot=0.05, trans=0.01, flow=0.003):
    kw = {
        p: retract(params.pose(p), TangentDelta(rng.normal(0, rot, 3), rng.normal(0, trans, 3)))
        for p in ("x1", "x2", "x3", "x4")
    }
    return replace(params, x5=params.x5 + rng.normal(0, flow, params.x5.shape), **kw)


def full(m, **kw):
    return ProblemConfig(ks5_indices=range(m.n), **kw)


# ---- linearize --------------------------------------------------------------


def test_identity_problem_has_zero_residuals():
    p = np.array([[0.01, 0.02, 0.1], [0.03, -0.01, 0.12], [-0.02, 0.0, 0.11]])
    m = MeasureSet(I, I, I, I, np.zeros((3, 3)), p, p, p, p)
    lin = linearize(ParameterSet.identity(3), m, full(m))
    np.testing.assert_array_equal(lin.residual_vector(), np.zeros_like(lin.residual_vector()))
    assert lin.cost() == 0.0


@pytest.mark.parametrize("fixed,x5_fixed", [((), None), (("x3",), None), (("x1", "x4"), [0, 3, 7])])
def test_column_count(s1_measures, fixed, x5_fixed):
    m = s1_measures
    mask = None
    if x5_fixed is not None:
        mask = np.zeros(m.n, bool)
        mask[x5_fixed] = True
    params = ParameterSet.from_measures(m, fixed=frozenset(fixed), x5_fixed=mask)
    lin = linearize(params, m, full(m))
    expected = 24 + 3 * m.n - 6 * len(fixed) - 3 * (0 if mask is None else mask.sum())
    assert lin.layout.n_columns == expected
    assert lin.jacobian().shape[1] == expected


def test_pose_columns_come_first_in_parameter_order(s1_measures):
    L = ColumnLayout.of(ParameterSet.identity(4, fixed=frozenset({"x2"})))
    assert L.pose_offsets == {"x1": 0, "x3": 6, "x4": 12}
    assert L.n_pose == 18


def _max_fd_violation(J, Jfd, atol=1e-5, rtol=1e-4):
    return np.max(np.abs(J - Jfd) - np.maximum(atol, rtol * np.abs(Jfd)))


@pytest.mark.parametrize("anchor", ["m7", "m6"])
def test_analytic_jacobians_match_central_differences(anchor):
    """Over 100+ randomised evaluation points (points x perturbed parameter sets)."""
    rng = np.random.default_rng(7)
    evaluated = 0
    for seed in range(3):
        m = world(seed)
        cfg = full(m, sft_a_anchor=anchor)
        for _ in range(2):
            x = perturbed(ParameterSet.from_measures(m), rng, rot=0.2, trans=0.05, flow=0.01)
            raw = solver._analytic_blocks(x, m, cfg)
            fd = finite_difference_blocks(x, m, cfg, 1e-6)
            assert set(raw) == set(BLOCKS)
            for b, (r, jacs) in raw.items():
                np.testing.assert_array_equal(r, fd[b][0])
                assert set(jacs) == set(fd[b][1])
                for name, J in jacs.items():
                    assert _max_fd_violation(J, fd[b][1][name]) <= 0, (b, name)
            evaluated += m.n
    assert evaluated >= 100


def test_autodiff_matches_analytic(s1_measures, rng):
    m = s1_measures
    for anchor in ("m7", "m6"):
        cfg = full(m, sft_a_anchor=anchor)
        x = perturbed(ParameterSet.from_measures(m), rng, rot=0.3, trans=0.05)
        ad = autodiff_blocks(x, m, cfg)
        an = solver._analytic_blocks(x, m, cfg)
        for b in BLOCKS:
            np.testing.assert_allclose(ad[b][0], an[b][0], atol=1e-14)
            for name in an[b][1]:
                np.testing.assert_allclose(ad[b][1][name], an[b][1][name], atol=1e-12, err_msg=f"{b}/{name}")


def test_fd_check_mode_passes_on_correct_jacobians(s1_measures, rng):
    m = s1_measures
    x = perturbed(ParameterSet.from_measures(m), rng)
    a = linearize(x, m, full(m), "fd_check")
    b = linearize(x, m, full(m), "analytic")
    np.testing.assert_array_equal(a.jacobian().toarray(), b.jacobian().toarray())


def test_fd_check_mode_catches_a_wrong_jacobian(s1_measures, monkeypatch):
    m = s1_measures
    good = solver._analytic_blocks

    def broken(params, measures, config):
        raw = good(params, measures, config)
        r, jacs = raw["KC"]
        jacs["x3"] = jacs["x3"] * 1.01
        return raw

    monkeypatch.setattr(solver, "_analytic_blocks", broken)
    with pytest.raises(DerivativeMismatch, match="KC/x3"):
        linearize(ParameterSet.from_measures(m), m, full(m), "fd_check")


def test_sparse_normal_equations_equal_dense_product(s1_measures, rng):
    m = s1_measures
    rho = {b: float(rng.uniform(0.5, 2.0)) for b in BLOCKS}
    mask = np.zeros(m.n, bool)
    mask[[1, 5]] = True
    x = perturbed(ParameterSet.from_measures(m, fixed=frozenset({"x2"}), x5_fixed=mask), rng)
    lin = linearize(x, m, ProblemConfig(rho=rho, ks5_indices=range(0, m.n, 3)))
    J = lin.jacobian().toarray()
    w = lin.row_weights()
    r = lin.residual_vector()
    H, g = lin.normal_equations().dense()
    np.testing.assert_allclose(H, J.T @ (w[:, None] * J), atol=1e-12)
    np.testing.assert_allclose(g, J.T @ (w * r), atol=1e-14)
    assert lin.cost() == pytest.approx(0.5 * np.sum(w * r**2), rel=1e-12)


def test_linearize_rejects_size_mismatch(s1_measures):
    with pytest.raises(ValueError, match="points"):
        linearize(ParameterSet.identity(2), s1_measures, ProblemConfig())


def test_non_finite_residual_reports_block_and_point(s1_measures):
    m = s1_measures
    x5 = m.m5.copy()
    x5[7, 1] = np.nan
    x = replace(ParameterSet.from_measures(m), x5=x5)
    with pytest.raises(NonFiniteError) as exc:
        linearize(x, m, full(m))
    assert exc.value.block == "SFT_A" and exc.value.index == 7


def test_solve_reports_numerical_failure_instead_of_raising(s1_measures):
    m = s1_measures
    x5 = m.m5.copy()
    x5[3] = np.inf
    rep = solve(m, full(m), replace(ParameterSet.from_measures(m), x5=x5))
    assert rep.termination == "numerical_failure"
    assert not rep.converged


# ---- solve -----------------------------------------------------------------


def test_ground_truth_init_converges_immediately(s1_measures):
    m = s1_measures
    rep = solve(m, full(m), ParameterSet.from_measures(m))
    assert rep.iterations <= 1
    assert rep.final_cost <= 1e-18
    assert rep.converged


def test_experiment1_setting_recovers_everything():
    for seed in (0, 1):
        m = world(seed)
        meas = m.with_available({"m1", "m2", "m3", "m6", "m7", "m8", "m9"})
        init = ParameterSet.identity(m.n, fixed=frozenset({"x3"}))
        init = replace(init, x3=m.m3)
        rep = solve(meas, ProblemConfig(active=EXP1), init)
        assert rep.converged
        assert add_transform(m.m1, rep.params.x1, m.m7) <= 1e-6
        assert add_transform(m.m2, rep.params.x2, m.m9) <= 1e-6
        assert add_transform(m.m4, rep.params.x4, m.m9) <= 1e-6
        assert add_flow(m.m5, rep.params.x5) <= 1e-6


def test_experiment0_setting_is_a_gauge_family(s1_measures, rng):
    m = s1_measures
    meas = m.with_available({"m1", "m2", "m6", "m7", "m8", "m9"})
    cfg = ProblemConfig(active=EXP1)
    a = solve(meas, cfg, ParameterSet.identity(m.n), SolveOptions(rank_diagnostics=True))
    b = solve(meas, cfg, perturbed(ParameterSet.identity(m.n), rng, rot=0.1, trans=0.02), SolveOptions(rank_diagnostics=True))
    assert abs(a.final_cost - b.final_cost) <= 1e-10
    assert add_transform(a.params.x3, b.params.x3, m.m8) > 1e-3
    assert a.rank.deficient(1e-8) and b.rank.deficient(1e-8)


def test_accepted_costs_never_increase(rng):
    for seed in range(3):
        m = world(seed)
        rep = solve(m, full(m), perturbed(ParameterSet.identity(m.n), rng))
        assert np.all(np.diff(rep.cost_trace) <= 0)
        assert rep.final_cost <= rep.initial_cost
        assert rep.wall_time_ms >= 0


def test_fixing_a_parameter_at_truth_does_not_hurt(s1_measures):
    m = s1_measures
    cfg = full(m)
    free = solve(m, cfg, ParameterSet.identity(m.n))
    for p in ("x1", "x2", "x3", "x4"):
        init = replace(ParameterSet.identity(m.n, fixed=frozenset({p})), **{p: getattr(m, f"m{p[1]}")})
        fixed = solve(m, cfg, init)
        for q in ("x1", "x2", "x3", "x4"):
            if q == p:
                continue
            probes = {"x1": m.m7, "x2": m.m9, "x3": m.m8, "x4": m.m9}[q]
            truth = getattr(m, f"m{q[1]}")
            e_fixed = add_transform(truth, fixed.params.pose(q), probes)
            e_free = add_transform(truth, free.params.pose(q), probes)
            assert e_fixed <= e_free + 1e-9
        assert add_flow(m.m5, fixed.params.x5) <= add_flow(m.m5, free.params.x5) + 1e-9


def test_max_iterations_is_reported(s1_measures):
    m = s1_measures
    rep = solve(m, full(m), ParameterSet.identity(m.n), SolveOptions(max_iterations=1))
    assert rep.iterations == 1
    assert rep.termination == "max_iterations"


def test_autodiff_solve_matches_analytic_solve(rng):
    m = world(3, 30)
    init = perturbed(ParameterSet.identity(m.n), rng)
    a = solve(m, full(m), init)
    b = solve(m, full(m), init, SolveOptions(derivatives="autodiff"))
    assert a.iterations == b.iterations
    np.testing.assert_allclose(a.cost_trace, b.cost_trace, rtol=1e-8, atol=1e-20)


def test_solve_validates_inputs(s1_measures):
    m = s1_measures
    with pytest.raises(ValueError, match="points"):
        solve(m, ProblemConfig(), ParameterSet.identity(3))
    with pytest.raises(ValueError, match="unavailable"):
        solve(m.with_available({"m6", "m7"}), ProblemConfig(), ParameterSet.identity(m.n))


@pytest.mark.parametrize(
    "kw", [dict(max_iterations=0), dict(cost_tolerance=0.0), dict(gradient_tolerance=-1.0), dict(derivatives="x")]
)
def test_solve_options_validation(kw):
    with pytest.raises(ValueError):
        SolveOptions(**kw)


def test_solve_options_round_trip():
    o = SolveOptions(max_iterations=7, derivatives="autodiff", linear_solver="dense")
    assert SolveOptions.from_dict(o.to_dict()) == o


def test_warm_start_uses_closed_form_alignment(s1_measures):
    m = s1_measures
    x = warm_start(m)
    assert local(x.x1, rigid_align(m.m7, m.m6)).as_vector() == pytest.approx(np.zeros(6), abs=1e-15)
    assert add_transform(m.m1, x.x1, m.m7) <= 1e-9
    assert add_transform(m.m2, x.x2, m.m9) <= 1e-9
    fixed = warm_start(m, ParameterSet.identity(m.n, fixed=frozenset({"x1"})))
    assert local(fixed.x1, I).as_vector() == pytest.approx(np.zeros(6), abs=0)


# ---- elimination -----------------------------------------------------------


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.mark.parametrize("n,tol", [(1, 1e-10), (200, 1e-9)])
def test_elimination_matches_dense_solve(n, tol, rng):
    m = world(5, n) if n > 1 else world(5, 5)
    if n == 1:
        m = MeasureSet(m.m1, m.m2, m.m3, m.m4, *(getattr(m, k)[:1] for k in ("m5", "m6", "m7", "m8", "m9")))
    cfg = full(m)
    x = perturbed(ParameterSet.from_measures(m), rng)
    lin = linearize(x, m, cfg)
    for lam in (0.0, 1e-4, 1.0):
        if lam == 0.0 and n == 1:
            continue  # a single point leaves the undamped pose block singular
        assert _rel(eliminate_flow_blocks(lin, lam).solve(), dense_step(lin, lam)) <= tol


def test_elimination_with_every_flow_fixed_is_a_no_op(s1_measures, rng):
    m = s1_measures
    x = perturbed(ParameterSet.from_measures(m, x5_fixed=np.ones(m.n, bool)), rng)
    neq = linearize(x, m, full(m)).normal_equations()
    red = eliminate_flow_blocks(neq)
    np.testing.assert_array_equal(red.S, neq.H_pp)
    np.testing.assert_array_equal(red.rhs, -neq.g_p)
    assert red.solve().shape == (24,)


def test_singular_flow_block_falls_back_to_damped_solve():
    A = np.stack([np.eye(3), np.zeros((3, 3)), np.diag([1.0, 1.0, 0.0])])
    inv = solver._invert_flow_blocks(A)
    assert np.all(np.isfinite(inv))
    np.testing.assert_allclose(inv[0], np.eye(3))


def test_schur_and_dense_iterates_agree(rng):
    for seed in (0, 1):
        m = world(seed, 50)
        init = perturbed(ParameterSet.identity(m.n), rng)
        for cfg in (full(m), ProblemConfig(active=EXP1 | {"KS3"})):
            a = solve(m, cfg, init, SolveOptions(linear_solver="schur"))
            b = solve(m, cfg, init, SolveOptions(linear_solver="dense"))
            assert a.iterations == b.iterations
            np.testing.assert_allclose(a.cost_trace, b.cost_trace, rtol=1e-8, atol=1e-20)
            for p in ("x1", "x2", "x3", "x4"):
                assert np.linalg.norm(local(a.params.pose(p), b.params.pose(p)).as_vector()) <= 1e-8
            np.testing.assert_allclose(a.params.x5, b.params.x5, atol=1e-8)


# ---- diagnostics and timing ------------------------------------------------


def test_rank_diagnostics_separate_posed_from_gauge_problems(s1_measures):
    m = s1_measures
    gt = ParameterSet.from_measures(m)
    assert not rank_diagnostics(gt, m, full(m)).deficient()
    d = rank_diagnostics(gt, m, ProblemConfig(active=EXP1))
    assert d.deficient()
    assert d.n_columns == 24 + 3 * m.n


def test_wall_time_grows_at_most_linearly():
    ns = (50, 100, 200, 500)
    opts = SolveOptions(max_iterations=5, cost_tolerance=1e-300, gradient_tolerance=1e-300)
    times = []
    for n in ns:
        m = world(11, n)
        init = ParameterSet.identity(m.n)
        rep = [solve(m, full(m), init, opts) for _ in range(5)]
        assert all(r.iterations == 5 or r.termination != "max_iterations" for r in rep)
        times.append(np.median([r.wall_time_ms for r in rep]))
    slope, icpt = np.polyfit(ns, times, 1)
    pred = slope * np.asarray(ns) + icpt
    assert slope > 0
    assert np.all(np.asarray(times) <= 2 * pred)
