import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contactdiff.physics import (
    Contact,
    ExtWrench,
    build_cone,
    cone_edges,
    contact_matrices,
    contact_matrix,
    emulate_dob,
    noise_vector,
    polyhedral_margins,
    sample_cone_force,
    total_wrench,
)
from contactdiff.robot import axis_angle_matrix, forward_kinematics, load_preset, point_jacobian, sample_surface_point

PLANAR = load_preset("planar3")
SPATIAL = load_preset("spatial7")


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# -- contact matrix --------------------------------------------------------------


def test_zero_force_gives_zero_wrench():
    A = contact_matrix(SPATIAL, np.ones(7), [0.1, 0.2, 0.3], 4)
    assert A.shape == (13, 3)
    np.testing.assert_array_equal(A @ np.zeros(3), np.zeros(13))


def test_base_torque_rows_are_cross_product():
    A = contact_matrix(PLANAR, np.zeros(3), [1.0, 0, 0], 2)
    w = A @ [0, 1.0, 0]
    np.testing.assert_allclose(w[3:6], [0, 1, 0])
    np.testing.assert_allclose(w[6:], [0, 0, 1])


def test_planar_lever_arms():
    A = contact_matrix(PLANAR, np.zeros(3), [0.9, 0, 0], 2)
    w = A @ [0, 10.0, 0]
    np.testing.assert_allclose(w[:3], [9, 6, 3], atol=1e-12)


def test_contact_matrix_rows_match_fd_jacobian():
    rng = np.random.default_rng(0)
    q = rng.uniform(-1, 1, 7)
    r, _ = sample_surface_point(SPATIAL, forward_kinematics(SPATIAL, q), 5, rng)
    A = contact_matrix(SPATIAL, q, r, 5)
    np.testing.assert_array_equal(A[:7], point_jacobian(SPATIAL, q, r, 5).T)
    np.testing.assert_array_equal(A[7:10], np.eye(3))


def test_batched_contact_matrices_match():
    rng = np.random.default_rng(1)
    q = rng.uniform(-1, 1, 7)
    poses = forward_kinematics(SPATIAL, q)
    links = rng.integers(0, 7, 20)
    r = np.stack([sample_surface_point(SPATIAL, poses, int(l), rng)[0] for l in links])
    A = contact_matrices(SPATIAL, q, r, links)
    for i in range(20):
        np.testing.assert_allclose(A[i], contact_matrix(SPATIAL, q, r[i], int(links[i])), atol=1e-15)


def test_contact_matrix_rejects_bad_point():
    with pytest.raises(ValueError):
        contact_matrix(PLANAR, np.zeros(3), [0.0, 1.0], 0)


# -- total wrench -----------------------------------------------------------------


def _contact(model, q, link, rng, F=None):
    r, n = sample_surface_point(model, forward_kinematics(model, q), link, rng)
    if F is None:
        F = sample_cone_force(build_cone(n), (10, 25), rng)
    return Contact(r=r, F=np.asarray(F, float), link_index=link, normal=n)


def test_total_wrench_cases():
    rng = np.random.default_rng(2)
    q = np.array([0.2, -0.5, 0.9])
    assert np.all(total_wrench(PLANAR, q, []).stacked() == 0)
    a = _contact(PLANAR, q, 0, rng)
    b = _contact(PLANAR, q, 2, rng)
    np.testing.assert_array_equal(total_wrench(PLANAR, q, [a]).stacked(), contact_matrix(PLANAR, q, a.r, 0) @ a.F)
    both = total_wrench(PLANAR, q, [a, b])
    summed = total_wrench(PLANAR, q, [a]) + total_wrench(PLANAR, q, [b])
    np.testing.assert_array_equal(both.stacked(), summed.stacked())


def test_two_contacts_on_one_link_rejected():
    rng = np.random.default_rng(3)
    q = np.zeros(3)
    with pytest.raises(ValueError):
        total_wrench(PLANAR, q, [_contact(PLANAR, q, 1, rng), _contact(PLANAR, q, 1, rng)])


def test_base_rotation_covariance():
    rng = np.random.default_rng(4)
    q = np.array([0.1, 0.7, -0.4])
    c = _contact(PLANAR, q, 2, rng)
    R = axis_angle_matrix(np.array([0, 0, 1.0]), np.pi / 2)
    q_rot = q + np.array([np.pi / 2, 0, 0])
    rotated = Contact(r=R @ c.r, F=R @ c.F, link_index=2, normal=R @ c.normal)
    w, w_rot = total_wrench(PLANAR, q, [c]), total_wrench(PLANAR, q_rot, [rotated])
    np.testing.assert_allclose(w_rot.f_base, R @ w.f_base, atol=1e-12)
    np.testing.assert_allclose(w_rot.t_base, R @ w.t_base, atol=1e-12)
    np.testing.assert_allclose(w_rot.tau_ext, w.tau_ext, atol=1e-12)


def test_ext_wrench_stack_round_trip():
    w = ExtWrench.from_stacked(np.arange(9.0), 3)
    np.testing.assert_array_equal(w.tau_ext, [0, 1, 2])
    np.testing.assert_array_equal(w.stacked(), np.arange(9.0))
    with pytest.raises(ValueError):
        ExtWrench.from_stacked(np.arange(8.0), 3)


# -- cones ------------------------------------------------------------------------


def test_zero_friction_cone_is_a_ray():
    cone = build_cone(unit([1, 2, 3]), mu=0.0)
    np.testing.assert_allclose(cone.edges, np.tile(-unit([1, 2, 3]), (8, 1)), atol=1e-15)
    F = sample_cone_force(cone, (10, 25), np.random.default_rng(5))
    np.testing.assert_allclose(unit(F), -unit([1, 2, 3]), atol=1e-15)


def test_mu_one_half_angle():
    cone = build_cone(np.array([0, 0, 1.0]), mu=1.0)
    np.testing.assert_allclose(cone.edges[:, 2], -1 / np.sqrt(2), atol=1e-15)


def test_cone_argument_errors():
    with pytest.raises(ValueError):
        build_cone(np.array([0, 0, 2.0]))
    with pytest.raises(ValueError):
        build_cone(np.array([0, 0, 1.0]), mu=0.5, m_e=3)
    with pytest.raises(ValueError):
        build_cone(np.array([0, 0, 1.0]), mu=-0.1)
    with pytest.raises(ValueError):
        sample_cone_force(build_cone(np.array([0, 0, 1.0])), (25, 10), np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1),
    st.floats(0.05, 1.5),
    st.integers(4, 16),
)
def test_edges_lie_on_cone(normal, mu, m_e):
    cone = build_cone(unit(normal), mu, m_e)
    np.testing.assert_allclose(cone.edges @ cone.axis, 1 / np.sqrt(1 + mu * mu), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(cone.edges, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(cone_edges(unit(normal)[None], mu, m_e)[0], cone.edges)


def test_sampled_forces_bounds_and_membership():
    rng = np.random.default_rng(6)
    cone = build_cone(unit([0.3, -1, 0.2]), mu=0.5)
    F = np.stack([sample_cone_force(cone, (10, 25), rng) for _ in range(10_000)])
    mag = np.linalg.norm(F, axis=1)
    assert mag.min() >= 10 and mag.max() <= 25
    fn = F @ cone.axis
    ft = np.linalg.norm(F - fn[:, None] * cone.axis, axis=1)
    assert np.all(ft <= cone.mu * fn + 1e-9)
    assert np.all(polyhedral_margins(cone, F) >= 0)
    # symmetric about the axis: mean direction converges to it
    d = F / mag[:, None]
    mean = d.mean(axis=0)
    perp = mean - (mean @ cone.axis) * cone.axis
    sigma = np.sqrt(np.mean(np.sum((d - (d @ cone.axis)[:, None] * cone.axis) ** 2, axis=1)) / 2 / len(d))
    assert np.linalg.norm(perp) < 3 * np.sqrt(2) * sigma
    assert all(cone.contains(f) and cone.contains_polyhedral(f) for f in F[:50])


# -- disturbance observer emulation -------------------------------------------------------


def test_dob_step_response():
    bw = 20.0
    u = np.ones((200, 2)) * [3.0, -2.0]
    y = emulate_dob(u, bw)
    n = np.arange(200)
    np.testing.assert_allclose(y, (1 - np.exp(-2 * np.pi * bw * n * 1e-3))[:, None] * [3.0, -2.0], atol=1e-12)
    k = int(round(3 / (2 * np.pi * bw) / 1e-3))
    assert abs(y[k, 0] - 3.0) <= 0.051 * 3.0


def test_dob_zero_and_linearity():
    assert np.all(emulate_dob(np.zeros((50, 9))) == 0)
    u = np.random.default_rng(7).normal(size=(100, 9))
    np.testing.assert_allclose(emulate_dob(2.5 * u), 2.5 * emulate_dob(u), atol=1e-12)


def test_dob_noise_statistics():
    rng = np.random.default_rng(8)
    std = noise_vector(3)
    y = emulate_dob(np.zeros((10_000, 9)), noise_std=std, rng=rng)
    np.testing.assert_allclose(y.std(axis=0), std, rtol=0.05)
    y2 = emulate_dob(np.zeros((10_000, 9)), noise_std=std, rng=np.random.default_rng(8))
    np.testing.assert_array_equal(y, y2)


def test_dob_errors():
    with pytest.raises(ValueError):
        emulate_dob(np.zeros((5, 3)), bandwidth_hz=0)
    with pytest.raises(ValueError):
        emulate_dob(np.zeros((5, 3)), noise_std=0.1)
