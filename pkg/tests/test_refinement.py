import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import K_REF, copy_tracks, gradient_config, gradient_errors, make_state, perturb, ring_scene
from oracles import grid_scale, rodrigues
from raysfm.geometry import Intrinsics, Pose, align_and_evaluate, project, rotvec_to_matrix
from raysfm.refinement import (RefinementError, ScaleAnchor, SolverOptions, backproject_ray, build_problem,
                               evaluate_cost, finalize, huber, huber_derivative, optimal_scale, ray_residual,
                               refine_epoch, residuals_and_jacobians, solve)

seeds = st.integers(0, 2**32 - 1)


# --- elementary operations -----------------------------------------------------

def test_backproject_examples():
    K = Intrinsics(100, 120, 50, 40, 100, 80)
    assert np.allclose(backproject_ray(K, Pose.identity(), [50, 40]), [0, 0, 1], atol=1e-15)
    flipped = Pose.from_matrix(rodrigues([0, 1, 0], 180), np.zeros(3))
    assert np.allclose(backproject_ray(K, flipped, [50, 40]), [0, 0, -1], atol=1e-15)


def test_backproject_parallel_to_point():
    from conftest import random_intrinsics, random_pose

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        K, T = random_intrinsics(rng), random_pose(rng, 3.0)
        X = T.center + T.R.T @ np.r_[rng.uniform(-1, 1, 2), 1.0] * rng.uniform(0.5, 20)
        nu = backproject_ray(K, T, project(K, T, X))
        v = (X - T.center) / np.linalg.norm(X - T.center)
        worst = max(worst, np.linalg.norm(np.cross(nu, v)), abs(np.linalg.norm(nu) - 1))
        assert nu @ v > 0
    assert worst < 1e-9


def test_ray_residual_examples():
    z = [0, 0, 1]
    assert np.array_equal(ray_residual(5, z, [0, 0, 5], [0, 0, 0]), [0, 0, 0])
    assert np.array_equal(ray_residual(0, z, [1, 2, 3], [1, 2, 3]), [0, 0, 0])
    assert np.array_equal(ray_residual(5, z, [1, 0, 5], [0, 0, 0]), [-1, 0, 0])


def test_huber_examples():
    assert huber(0.05, 0.1) == pytest.approx(0.00125, abs=1e-15)
    assert huber(0.2, 0.1) == pytest.approx(0.015, abs=1e-15)
    assert huber_derivative(0.1, 0.1) == pytest.approx(0.1)
    eps = 1e-9
    left = (huber(0.1, 0.1) - huber(0.1 - eps, 0.1)) / eps
    right = (huber(0.1 + eps, 0.1) - huber(0.1, 0.1)) / eps
    assert left == pytest.approx(0.1, abs=1e-6) and right == pytest.approx(0.1, abs=1e-6)
    assert huber(0.1 - 1e-12, 0.1) == pytest.approx(huber(0.1 + 1e-12, 0.1), abs=1e-12)


def test_optimal_scale_examples():
    assert optimal_scale([0, 0, 1], [0, 0, 5], [0, 0, 0]) == 5
    assert optimal_scale([0, 0, 1], [3, 4, 0], [0, 0, 0]) == 0
    assert optimal_scale([0, 0, 1], [0, 0, -2], [0, 0, 0]) == 0


def test_optimal_scale_matches_grid_search():
    rng = np.random.default_rng(1)
    for _ in range(100):
        nu = rng.normal(size=3)
        nu /= np.linalg.norm(nu)
        C = rng.normal(size=3)
        X = rng.normal(scale=3, size=3)
        d_grid, res = grid_scale(nu, X - C, 10.0)
        d = float(optimal_scale(nu, X, C))
        assert abs(min(d, 10.0) - d_grid) <= res


# --- Jacobians ---------------------------------------------------------------------

def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(100):
        rel_j, rel_g = gradient_errors(*gradient_config(rng))
        assert rel_j <= 1e-5 and rel_g <= 1e-5


def test_residual_clamps_behind_camera():
    nu = np.array([[0.0, 0.0, 1.0]])
    r, d, Jp, Jc, Jx = residuals_and_jacobians(nu, np.array([[1.0, 2.0, -3.0]]), np.zeros((1, 3)))
    assert d[0] == 0 and np.array_equal(r[0], [-1, -2, 3])
    assert np.array_equal(Jx[0], -np.eye(3)) and np.array_equal(Jp[0], np.zeros((3, 3)))


# --- solve ----------------------------------------------------------------------------------

def _problem(poses, tracks, free, anchor=None, seed=0):
    return build_problem(poses, {k: K_REF for k in poses}, tracks, free, seed, anchor)


def _anchor(poses, a=1):
    return ScaleAnchor(0, a, float(np.linalg.norm(poses[a].center - poses[0].center)))


def test_solve_at_ground_truth():
    rng = np.random.default_rng(3)
    poses, X, tracks = ring_scene(rng)
    res = solve(_problem(poses, tracks, set(poses) - {0}, _anchor(poses)))
    assert res.iterations <= 2 and res.cost < 1e-18


def test_solve_recovers_from_perturbation():
    rng = np.random.default_rng(4)
    gt, X, tracks = ring_scene(rng, n_cams=8, n_pts=80)
    init = {k: (p if k == 0 else perturb(rng, p, 1.0, 0.01)) for k, p in gt.items()}
    prob = _problem(init, tracks, set(gt) - {0}, _anchor(gt))
    res = solve(prob)
    out = {k: (p if p is not None else init[k]) for k, p in res.poses.items()}
    ev = align_and_evaluate(out, gt)
    assert ev.mean_rotation_deg < 1e-3 and ev.mean_translation < 1e-5
    assert max(max(v) for v in ev.per_image.values()) < 1e-3
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))


def test_solve_zero_free_variables():
    rng = np.random.default_rng(5)
    poses, X, tracks = ring_scene(rng)
    prob = _problem(poses, [], set())
    res = solve(prob)
    assert res.iterations == 0 and res.reason == "no_free_variables"
    noisy = copy_tracks(tracks, X + 0.01)
    prob = _problem(poses, noisy, set())
    prob.points = prob.points.copy()
    # fixing every point too: zero free variables, cost equals direct evaluation
    prob.obs_track = prob.obs_track[:0]
    prob.obs_camera = prob.obs_camera[:0]
    prob.bearings, prob.obs_uv = prob.bearings[:0], prob.obs_uv[:0]
    res = solve(prob)
    assert res.cost == evaluate_cost(prob, prob.R, prob.C, prob.points, SolverOptions())
    assert np.array_equal(res.points, prob.points)


@given(seeds)
@settings(max_examples=10, deadline=None)
def test_costs_monotone(seed):
    rng = np.random.default_rng(seed)
    gt, X, tracks = ring_scene(rng, n_cams=5, n_pts=40)
    init = {k: (p if k == 0 else perturb(rng, p, 3.0, 0.05)) for k, p in gt.items()}
    noisy = copy_tracks(tracks, X + rng.normal(scale=0.05, size=X.shape))
    res = solve(_problem(init, noisy, set(gt) - {0}, _anchor(gt)))
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))
    assert res.cost <= res.initial_cost


def test_huber_quadratic_regime():
    rng = np.random.default_rng(6)
    gt, X, tracks = ring_scene(rng, n_cams=5, n_pts=40)
    noisy = copy_tracks(tracks, X + rng.normal(scale=0.005, size=X.shape))
    prob = _problem(gt, noisy, set(gt) - {0}, _anchor(gt))
    opts = SolverOptions(anchor_weight=0.0)
    res = solve(prob, opts)
    r, _ = residuals_and_jacobians(np.einsum("mi,mij->mj", prob.bearings, prob.R[prob.obs_camera]),
                                   prob.points[prob.obs_track], prob.C[prob.obs_camera], need_jac=False)
    assert np.linalg.norm(r, axis=1).max() < 0.1
    assert abs(res.initial_cost - 0.5 * np.sum(r ** 2)) < 1e-12
    # final state as well
    R = np.array([(res.poses[c] or Pose.from_center(prob.R[k], prob.C[k])).R for k, c in enumerate(prob.camera_ids)])
    C = np.array([(res.poses[c] or Pose.from_center(prob.R[k], prob.C[k])).center
                  for k, c in enumerate(prob.camera_ids)])
    r2, _ = residuals_and_jacobians(np.einsum("mi,mij->mj", prob.bearings, R[prob.obs_camera]),
                                    res.points[prob.obs_track], C[prob.obs_camera], need_jac=False)
    assert np.linalg.norm(r2, axis=1).max() < 0.1
    assert abs(res.cost - 0.5 * np.sum(r2 ** 2)) < 1e-12


def test_gauge_invariance():
    rng = np.random.default_rng(7)
    gt, X, tracks = ring_scene(rng, n_cams=6, n_pts=50)
    init = {k: (p if k == 0 else perturb(rng, p, 2.0, 0.02)) for k, p in gt.items()}
    noisy = copy_tracks(tracks, X + rng.normal(scale=0.02, size=X.shape))
    a = solve(_problem(init, noisy, set(gt) - {0}, _anchor(gt)))
    G = Pose.from_center(rotvec_to_matrix(rng.normal(size=3)), rng.normal(scale=3, size=3))
    Gi = G.inverse()
    init_g = {k: p.compose(Gi) for k, p in init.items()}
    noisy_g = copy_tracks(noisy, G.apply(np.array([t.point for t in noisy])))
    b = solve(_problem(init_g, noisy_g, set(gt) - {0}, _anchor(gt)))
    assert abs(a.cost - b.cost) < 1e-9
    for k in set(gt) - {0}:
        back = b.poses[k].compose(G)
        assert np.abs(back.matrix() - a.poses[k].matrix()).max() < 1e-6
    assert np.abs(G.apply(a.points) - b.points).max() < 1e-6


def test_scale_anchor_restores_scale():
    rng = np.random.default_rng(8)
    gt, X, tracks = ring_scene(rng, n_cams=6, n_pts=60)
    anchor = _anchor(gt)
    doubled = {k: Pose(p.q, 2 * p.t) for k, p in gt.items()}
    res = solve(_problem(doubled, copy_tracks(tracks, 2 * X), set(gt) - {0}, anchor))
    C = {k: res.poses[k].center for k in gt if k != 0}
    assert abs(np.linalg.norm(C[1]) / anchor.distance - 1) < 1e-6
    for k, c in C.items():
        assert np.linalg.norm(c - gt[k].center) / np.linalg.norm(gt[k].center) < 1e-6


def test_nonfinite_cost_reports_observation():
    rng = np.random.default_rng(9)
    gt, X, tracks = ring_scene(rng, n_cams=4, n_pts=10)
    prob = _problem(gt, tracks, {1})
    X = prob.points.copy()
    X[prob.obs_track[3]] = np.nan
    with pytest.raises(RefinementError, match="observation"):
        evaluate_cost(prob, prob.R, prob.C, X, SolverOptions())


def test_problem_invariants():
    rng = np.random.default_rng(10)
    gt, X, tracks = ring_scene(rng, n_cams=4, n_pts=10)
    with pytest.raises(ValueError, match="seed"):
        _problem(gt, tracks, {0, 1})
    prob = _problem(gt, tracks, {1})
    assert 0 in prob.fixed_ids
    obs = prob.observations
    assert all(abs(np.linalg.norm(o.ray) - 1) < 1e-9 and o.scale >= 0 for o in obs)
    with pytest.raises(ValueError):
        SolverOptions(huber_delta=0)


# --- staged refinement ------------------------------------------------------------------------

def test_refine_epoch_no_new_images():
    rng = np.random.default_rng(11)
    gt, X, tracks = ring_scene(rng, n_cams=4, n_pts=10)
    state = make_state(gt, tracks)
    assert refine_epoch(state, set()) is None and state.cost_curves == []


def test_refine_epoch_keeps_old_poses_fixed():
    rng = np.random.default_rng(12)
    gt, X, tracks = ring_scene(rng, n_cams=6, n_pts=60)
    init = {k: (p if k < 3 else perturb(rng, p, 1.0, 0.01)) for k, p in gt.items()}
    init[1] = perturb(rng, gt[1], 0.5, 0.005)  # an older, imperfect pose
    state = make_state(init, copy_tracks(tracks))
    before = {k: init[k] for k in (0, 1, 2)}
    refine_epoch(state, {3, 4, 5})
    for k, p in before.items():
        assert state.poses[k] == p
    assert len(state.cost_curves) == 1
    with pytest.raises(ValueError):
        refine_epoch(state, {0})


def test_finalize_fixed_point():
    rng = np.random.default_rng(13)
    gt, X, tracks = ring_scene(rng, n_cams=6, n_pts=60)
    state = make_state(gt, copy_tracks(tracks))
    res = finalize(state)
    assert abs(res.initial_cost - res.cost) < 1e-12
    for k in gt:
        assert np.abs(state.poses[k].matrix() - gt[k].matrix()).max() < 1e-9


def test_finalize_reduces_injected_drift():
    rng = np.random.default_rng(14)
    gt, X, tracks = ring_scene(rng, n_cams=10, n_pts=80)
    drifted = dict(gt)
    for j, k in enumerate(range(5, 10)):
        drifted[k] = perturb(rng, gt[k], 0.5 * (j + 1), 0.005 * (j + 1))
    state = make_state(drifted, copy_tracks(tracks), gt=gt)
    before = align_and_evaluate(state.poses, gt)
    finalize(state)
    after = align_and_evaluate(state.poses, gt)
    assert after.mean_rotation_deg < before.mean_rotation_deg
    assert after.mean_translation < before.mean_translation


def test_finalize_needs_two_images():
    rng = np.random.default_rng(15)
    gt, X, tracks = ring_scene(rng, n_cams=3, n_pts=10)
    state = SimpleNamespace(poses={0: gt[0]}, intrinsics={0: K_REF}, tracks=[], seed_id=0, scale_anchor=None,
                            cost_curves=[])
    with pytest.raises(ValueError, match="at least 2"):
        finalize(state)


def test_rotations_frozen_option():
    rng = np.random.default_rng(16)
    gt, X, tracks = ring_scene(rng, n_cams=5, n_pts=40)
    init = {k: (p if k == 0 else perturb(rng, p, 1.0, 0.01)) for k, p in gt.items()}
    res = solve(_problem(init, tracks, set(gt) - {0}, _anchor(gt)), SolverOptions(optimize_rotations=False))
    for k in set(gt) - {0}:
        assert math.isclose(abs(float(res.poses[k].q @ init[k].q)), 1.0, abs_tol=1e-12)
