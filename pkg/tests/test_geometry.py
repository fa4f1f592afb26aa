import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from mapstitch.geometry import (RigidTransform, quat_exp, quat_to_matrix, random_transform,
                                rigid_fit, se3_adjoint, so3_exp, so3_log)

seeds = st.integers(0, 2 ** 32 - 1)


@given(seeds)
def test_compose_with_inverse_is_identity(seed):
    T = random_transform(np.random.default_rng(seed), max_translation=100.0)
    ang, dist = (T @ T.inverse()).distance_to(RigidTransform.identity())
    assert ang < 1e-9 and dist < 1e-9


@given(seeds)
def test_quaternion_stays_unit_under_composition(seed):
    rng = np.random.default_rng(seed)
    T = RigidTransform.identity()
    for _ in range(50):
        T = T @ random_transform(rng)
        assert abs(np.linalg.norm(T.rotation) - 1) < 1e-9


@given(seeds)
def test_rotation_matrix_matches_scipy(seed):
    q = np.random.default_rng(seed).normal(size=4)
    q /= np.linalg.norm(q)
    R_ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    assert np.allclose(quat_to_matrix(q), R_ref, atol=1e-12)


@given(seeds)
def test_exp_log_round_trip(seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=3)
    phi *= rng.uniform(0, 3.0) / np.linalg.norm(phi)
    assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)
    assert np.allclose(quat_to_matrix(quat_exp(phi)), Rotation.from_rotvec(phi).as_matrix(),
                       atol=1e-12)


def test_small_angle_branches():
    phi = np.array([1e-12, -2e-12, 5e-13])
    assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-15)


@given(seeds)
def test_oplus_ominus_inverse(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    d = rng.normal(size=6) * 0.3
    assert np.allclose(T.oplus(d).ominus(T), d, atol=1e-9)


@given(seeds)
def test_adjoint_maps_tangent_perturbations(seed):
    # T (I + xi) = (I + Ad_T xi) T to first order
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    xi = rng.normal(size=6) * 1e-6
    right = T.matrix() @ RigidTransform.identity().oplus(xi).matrix()
    left = RigidTransform.identity().oplus(se3_adjoint(T) @ xi).matrix() @ T.matrix()
    assert np.allclose(right, left, rtol=0, atol=1e-10)


@settings(max_examples=50)
@given(seeds)
def test_rigid_fit_recovers_transform(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    src = rng.normal(size=(20, 3)) * 5
    est = rigid_fit(src, T.apply(src))
    ang, dist = est.distance_to(T)
    assert ang < 1e-9 and dist < 1e-9
