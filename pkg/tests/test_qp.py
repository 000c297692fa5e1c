import numpy as np
import pytest
from scipy.optimize import nnls as scipy_nnls

from contactdiff.physics import build_cone, cone_edges, contact_matrices, contact_matrix, sample_cone_force
from contactdiff.qp import (
    QpCandidate,
    build_problem,
    grid_search_residual,
    kkt_residual,
    nnls,
    qp_error,
    qp_error_centers,
    solve_qp,
    solve_single_batch,
    surface_candidates,
)
from contactdiff.robot import forward_kinematics, load_preset, sample_surface_point

PLANAR = load_preset("planar3")
SPATIAL = load_preset("spatial7")


def random_contact(model, rng, link=None):
    q = rng.uniform(model.joint_limits[:, 0], model.joint_limits[:, 1])
    link = int(rng.integers(model.n_q)) if link is None else link
    r, n = sample_surface_point(model, forward_kinematics(model, q), link, rng)
    cone = build_cone(n, apex=r)
    F = sample_cone_force(cone, (10, 25), rng)
    return q, link, r, cone, F


def test_noiseless_single_contact_recovery():
    rng = np.random.default_rng(0)
    for _ in range(100):
        model = PLANAR if rng.random() < 0.5 else SPATIAL
        q, link, r, cone, F = random_contact(model, rng)
        b = contact_matrix(model, q, r, link) @ F
        sol = solve_qp(build_problem(model, q, b, [QpCandidate(r, link, cone)]))
        assert sol.residual < 1e-6
        assert np.max(np.abs(sol.forces[0] - F)) < 1e-5
        assert sol.converged and sol.kkt_residual < 1e-8


def test_zero_measurement_gives_zero_forces():
    rng = np.random.default_rng(1)
    q, link, r, cone, _ = random_contact(PLANAR, rng)
    sol = solve_qp(build_problem(PLANAR, q, np.zeros(9), [QpCandidate(r, link, cone)]))
    assert sol.residual == 0 and np.all(sol.forces == 0)
    pts = rng.normal(0, 0.3, (10, 3))
    assert qp_error(np.zeros(9), pts, PLANAR, q).residual == 0


def test_nnls_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(50):
        M = rng.normal(size=(9, int(rng.integers(2, 40))))
        b = rng.normal(size=9)
        x, ok, _ = nnls(M, b)
        ref, _ = scipy_nnls(M, b)
        assert ok
        assert np.linalg.norm(M @ x - b) == pytest.approx(np.linalg.norm(M @ ref - b), rel=1e-9, abs=1e-12)
        assert np.all(x >= 0)
        assert kkt_residual(M, b, x) < 1e-8


def test_nnls_iteration_cap_reports_best_iterate():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(9, 30))
    b = rng.normal(size=9)
    x, ok, it = nnls(M, b, max_iter=1)
    assert not ok and it == 1 and np.all(x >= 0)


def test_wrong_link_residual_matches_grid_oracle():
    rng = np.random.default_rng(4)
    done = 0
    while done < 20:
        q, link, r, _, F = random_contact(PLANAR, rng)
        b = contact_matrix(PLANAR, q, r, link) @ F
        other = (link + 1 + int(rng.integers(2))) % 3
        r2, n2 = sample_surface_point(PLANAR, forward_kinematics(PLANAR, q), other, rng)
        cone = build_cone(n2, mu=0.5, m_e=4, apex=r2)
        problem = build_problem(PLANAR, q, b, [QpCandidate(r2, other, cone)])
        sol = solve_qp(problem)
        M = problem.design_matrix()
        lam_max = max(2.0 * np.max(sol.weights), 1.0)
        oracle = grid_search_residual(M, b, lam_max, points=50, refine=3)
        assert sol.residual <= oracle * (1 + 1e-9)
        assert oracle == pytest.approx(sol.residual, rel=0.02, abs=1e-6)
        done += 1


def test_wrong_side_candidates_have_positive_residual():
    # all candidates push toward +y; the measurement needs a push along -y
    rng = np.random.default_rng(5)
    q = np.zeros(3)
    r = np.array([0.45, 0.045, 0.0])
    b = contact_matrix(PLANAR, q, r, 1) @ np.array([0.0, -15.0, 0.0])
    pts = np.column_stack([np.linspace(0.1, 0.8, 12), np.full(12, -0.05), np.zeros(12)])
    sol = qp_error(b, pts, PLANAR, q)
    assert sol.residual > 0.1 * np.linalg.norm(b)


def test_candidates_include_truth_noiseless():
    rng = np.random.default_rng(6)
    for _ in range(10):
        q, link, r, cone, F = random_contact(PLANAR, rng)
        b = contact_matrix(PLANAR, q, r, link) @ F
        pts = np.vstack([r, rng.normal(0, 0.3, (20, 3))])
        assert qp_error(b, pts, PLANAR, q).residual < 1e-4


def test_solution_invariants():
    rng = np.random.default_rng(7)
    q, link, r, cone, F = random_contact(SPATIAL, rng)
    b = contact_matrix(SPATIAL, q, r, link) @ F + rng.normal(0, 0.5, 13)
    pts = rng.normal(0, 0.3, (15, 3)) + SPATIAL.center
    sol = qp_error(b, pts, SPATIAL, q)
    assert sol.residual**2 == pytest.approx(sol.jts_err**2 + sol.base_f_err**2 + sol.base_t_err**2, abs=1e-9)
    # optimality against random feasible weights
    cands = surface_candidates(SPATIAL, q, pts)
    problem = build_problem(SPATIAL, q, b, cands)
    M = problem.design_matrix()
    for c, f in zip(cands, sol.forces):
        assert c.cone.contains_polyhedral(f, tol=1e-7)
    for _ in range(100):
        lam = (rng.random(M.shape[1]) < 0.3) * rng.exponential(2.0, M.shape[1])
        assert np.linalg.norm(b - M @ lam) >= sol.residual - 1e-12


def test_adding_candidates_never_increases_residual_and_scale_equivariance():
    rng = np.random.default_rng(8)
    q, link, r, cone, F = random_contact(PLANAR, rng)
    b = contact_matrix(PLANAR, q, r, link) @ F + rng.normal(0, 0.3, 9)
    pts = rng.normal(0, 0.3, (12, 3))
    prev = np.inf
    for k in range(1, 13):
        res = qp_error(b, pts[:k], PLANAR, q).residual
        assert res <= prev + 1e-10
        prev = res
    s1 = qp_error(b, pts, PLANAR, q)
    s3 = qp_error(3.0 * b, pts, PLANAR, q)
    assert s3.residual == pytest.approx(3.0 * s1.residual, rel=1e-8)
    np.testing.assert_allclose(s3.w_star, 3.0 * s1.w_star, atol=1e-8)


def test_cluster_center_variant():
    rng = np.random.default_rng(9)
    q, link, r, cone, F = random_contact(PLANAR, rng)
    b = contact_matrix(PLANAR, q, r, link) @ F
    pts = r + rng.normal(0, 1e-4, (64, 3))
    sol = qp_error_centers(b, pts, 1, PLANAR, q)
    assert sol.forces.shape == (1, 3)
    assert sol.residual < 0.05 * np.linalg.norm(b)


def test_single_batch_solver_matches_nnls():
    rng = np.random.default_rng(10)
    q, link, r, cone, F = random_contact(SPATIAL, rng)
    b = contact_matrix(SPATIAL, q, r, link) @ F + rng.normal(0, 0.2, 13)
    poses = forward_kinematics(SPATIAL, q)
    links = rng.integers(0, 7, 40)
    pts, nrm = zip(*[sample_surface_point(SPATIAL, poses, int(l), rng) for l in links])
    pts, nrm = np.array(pts), np.array(nrm)
    A = contact_matrices(SPATIAL, q, pts, links)
    E = cone_edges(nrm, 0.5, 8)
    res, forces = solve_single_batch(A, E, b, 0.5)
    for i in range(40):
        M = A[i] @ E[i].T
        lam, _, _ = nnls(M, b)
        assert res[i] == pytest.approx(np.sum((b - M @ lam) ** 2), rel=1e-7, abs=1e-10)
