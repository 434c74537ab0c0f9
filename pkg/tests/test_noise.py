import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import poses
from mvsceneflow.geometry import Pose, quat_conj, quat_log, quat_mul
from mvsceneflow.noise import (
    CHI3_MEAN,
    NoiseSpec,
    perturb_measures,
    perturb_pose,
    perturb_vector,
    rotation_sigma_for,
)
from mvsceneflow.synthworld import derive_measures, generate, s1_config

MM = 1e-3
CHI3 = np.sqrt(8 / np.pi)


@pytest.fixture(scope="module")
def m500():
    cfg = s1_config(n_points=560)
    m = derive_measures(generate(cfg), cfg)
    assert m.n >= 500
    return m.permuted(np.arange(500))


def test_chi_constant():
    assert CHI3_MEAN == pytest.approx(1.5957691216057308, rel=1e-15)


# ---- perturb_vector ----------------------------------------------------------


def test_zero_sigma_vector_is_unchanged(rng):
    v = rng.normal(size=3)
    np.testing.assert_array_equal(perturb_vector(v, 0.0, rng), v)


def test_vector_noise_norm_follows_chi_distribution():
    rng = np.random.default_rng(0)
    v = np.zeros((100_000, 3))
    d = np.linalg.norm(perturb_vector(v, MM, rng) - v, axis=1)
    assert d.mean() == pytest.approx(MM * CHI3, rel=0.02)


def test_vector_noise_is_reproducible():
    a = perturb_vector(np.zeros(3), 1.0, np.random.default_rng(5))
    b = perturb_vector(np.zeros(3), 1.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


# ---- perturb_pose ------------------------------------------------------------


def _angle(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(quat_log(quat_mul(quat_conj(a.q), b.q))))


def test_zero_sigma_pose_is_unchanged(rng):
    T = Pose.from_rotvec((0.3, -0.2, 0.1), (1.0, 2.0, 3.0))
    out = perturb_pose(T, 0.0, 0.0, rng)
    np.testing.assert_array_equal(out.q, T.q)
    np.testing.assert_array_equal(out.t, T.t)


def test_translation_only_noise_keeps_rotation(rng):
    T = Pose.from_rotvec((0.3, -0.2, 0.1), (1.0, 2.0, 3.0))
    out = perturb_pose(T, MM, 0.0, rng)
    np.testing.assert_array_equal(out.q, T.q)
    assert abs(np.linalg.norm(out.q) - 1.0) <= 1e-12
    assert np.linalg.norm(out.t - T.t) > 0


def test_geodesic_angle_matches_tangent_gaussian():
    """A tangent N(0, s^2 I) rotates by |d|, whose mean is s * sqrt(8/pi)."""
    rng = np.random.default_rng(1)
    T = Pose.from_rotvec((0.5, 0.1, -0.4), (0.0, 0.0, 0.0))
    s = 0.02
    angles = np.array([_angle(T, perturb_pose(T, 0.0, s, rng)) for _ in range(100_000)])
    assert angles.mean() == pytest.approx(s * CHI3, rel=0.02)


@settings(max_examples=100, deadline=None)
@given(poses(), st.floats(0.0, 1.0), st.floats(0.0, 0.1), st.integers(0, 2**32 - 1))
def test_perturbed_poses_stay_valid(T, s_rot, s_trans, seed):
    out = perturb_pose(T, s_trans, s_rot, np.random.default_rng(seed))
    assert abs(np.linalg.norm(out.q) - 1.0) <= 1e-12
    assert out.q[0] >= 0


def test_rotation_sigma_rule_matches_translation_add():
    """At the radius, rotation noise moves points as far as translation noise."""
    rng = np.random.default_rng(2)
    r, s_t = 0.05, MM
    s_r = rotation_sigma_for(s_t, r)
    p = rng.normal(size=(100_000, 3))
    p *= r / np.linalg.norm(p, axis=1, keepdims=True)
    d = rng.normal(0, s_r, p.shape)
    rot_add = np.linalg.norm(np.cross(d, p), axis=1).mean()
    assert rot_add == pytest.approx(s_t * CHI3, rel=0.02)
    assert rotation_sigma_for(0.0, r) == 0.0


# ---- perturb_measures ----------------------------------------------------------


def test_zero_noise_reports_zero_input_add(s1_measures):
    noisy, rec = perturb_measures(s1_measures, NoiseSpec(seed=3))
    assert rec.in_da == rec.in_tf == rec.in_sf == 0.0
    np.testing.assert_array_equal(noisy.m6, s1_measures.m6)


def test_point_noise_level_at_500_points(m500):
    _, rec = perturb_measures(m500, NoiseSpec(sigma_point=MM, seed=4))
    assert rec.in_da == pytest.approx(MM * CHI3, rel=0.05)
    assert rec.in_tf == rec.in_sf == 0.0


def test_flow_noise_is_isolated(s1_measures):
    noisy, rec = perturb_measures(s1_measures, NoiseSpec(sigma_flow=MM, seed=5))
    assert rec.in_da == 0.0 and rec.in_tf == 0.0
    assert rec.in_sf > 0
    for k in ("m1", "m2", "m3", "m4"):
        np.testing.assert_array_equal(getattr(noisy, k).q, getattr(s1_measures, k).q)
        np.testing.assert_array_equal(getattr(noisy, k).t, getattr(s1_measures, k).t)


def test_pose_targets_limit_pose_noise(s1_measures):
    _, rec = perturb_measures(s1_measures, NoiseSpec(sigma_trans=MM, sigma_rot=0.01, seed=6, pose_targets=("m3",)))
    assert rec.in_tf_per_pose["m3"] > 0
    assert rec.in_tf_per_pose["m1"] == rec.in_tf_per_pose["m2"] == rec.in_tf_per_pose["m4"] == 0.0
    assert rec.in_tf == rec.in_tf_per_pose["m3"]


def test_ground_truth_is_untouched(s1_measures):
    before = s1_measures.to_dict()
    perturb_measures(s1_measures, NoiseSpec(MM, MM, MM, 0.01, seed=7))
    assert s1_measures.to_dict() == before


def test_input_add_scales_linearly_with_sigma(m500):
    sigmas = np.array([0.5, 1.0, 2.0, 5.0]) * MM
    da, sf, tf = [], [], []
    for s in sigmas:
        _, rec = perturb_measures(m500, NoiseSpec(sigma_point=s, sigma_flow=s, sigma_trans=s, seed=8))
        da.append(rec.in_da), sf.append(rec.in_sf), tf.append(rec.in_tf)
    for vals in (da, sf):
        slope = np.polyfit(sigmas, vals, 1)[0]
        assert slope == pytest.approx(CHI3, rel=0.05)
    # one draw per pose: linear in sigma, but no chi-mean to match
    np.testing.assert_allclose(np.array(tf) / sigmas, tf[0] / sigmas[0], rtol=1e-9)


def test_noise_commutes_with_point_reordering(s1_measures, rng):
    m = s1_measures
    spec = NoiseSpec(MM, MM, MM, 0.01, seed=9)
    order = rng.permutation(m.n)
    a, _ = perturb_measures(m, spec)
    b, _ = perturb_measures(m.permuted(order), spec)
    for k in ("m5", "m6", "m7", "m8", "m9"):
        np.testing.assert_array_equal(getattr(b, k), getattr(a, k)[order])
    np.testing.assert_array_equal(a.m1.q, b.m1.q)
    np.testing.assert_array_equal(a.m1.t, b.m1.t)


def test_propagated_and_independent_models(s1_measures):
    m = s1_measures
    p, _ = perturb_measures(m, NoiseSpec(sigma_point=MM, seed=10))
    np.testing.assert_allclose(p.m8 - m.m8, p.m6 - m.m6, atol=1e-18)
    np.testing.assert_allclose(p.m9 - m.m9, p.m7 - m.m7, atol=1e-18)
    q, _ = perturb_measures(m, NoiseSpec(sigma_point=MM, seed=10, da_model="independent"))
    np.testing.assert_array_equal(q.m6, p.m6)
    assert np.abs((q.m8 - m.m8) - (q.m6 - m.m6)).max() > 1e-5


def test_same_seed_same_noise(s1_measures):
    spec = NoiseSpec(MM, MM, MM, 0.01, seed=11)
    a, ra = perturb_measures(s1_measures, spec)
    b, rb = perturb_measures(s1_measures, spec)
    assert a.to_dict() == b.to_dict() and ra == rb


@pytest.mark.parametrize(
    "kw", [dict(sigma_point=-1.0), dict(sigma_rot=float("nan")), dict(pose_targets=("m5",)), dict(da_model="x")]
)
def test_noise_spec_validation(kw):
    with pytest.raises(ValueError):
        NoiseSpec(**kw)


def test_noise_spec_round_trip():
    s = NoiseSpec(0.001, 0.002, 0.003, 0.004, 5, ("m1", "m3"), "independent")
    assert NoiseSpec.from_dict(s.to_dict()) == s
