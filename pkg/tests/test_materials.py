import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from splatsim.errors import DegenerateDeformationError, ParameterError
from splatsim.materials import (Elasticity, MaterialModel, MaterialParams, Plasticity, derive_moduli, dev,
                                drucker_prager_delta_gamma, herschel_bulkley_step, kirchhoff_fixed_corotated,
                                kirchhoff_herschel_bulkley, kirchhoff_neo_hookean, kirchhoff_stvk, polar_rotation,
                                return_map_drucker_prager, return_map_von_mises, svd3)

P = MaterialParams(E=3.0, nu=0.3)


def rotations(n, seed):
    return Rotation.random(n, random_state=seed).as_matrix()


def random_F(n, seed, lo=0.5, hi=2.0):
    rng = np.random.default_rng(seed)
    U, V = rotations(n, seed), rotations(n, seed + 1000)
    s = rng.uniform(lo, hi, (n, 3))
    return (U * s[:, None, :]) @ np.swapaxes(V, 1, 2)


# ---- independent energy densities (plain numpy svd) ----------------------------

def psi_fc(F, p):
    s = np.linalg.svd(F, compute_uv=False)
    J = np.linalg.det(F)
    return p.mu * np.sum((s - 1) ** 2) + 0.5 * p.lam * (J - 1) ** 2


def psi_stvk(F, p):
    e = np.log(np.linalg.svd(F, compute_uv=False))
    return p.mu * np.sum(e * e) + 0.5 * p.lam * np.sum(e) ** 2


def psi_nh(F, p):
    lj = np.log(np.linalg.det(F))
    return 0.5 * p.mu * (np.sum(F * F) - 3) - p.mu * lj + 0.5 * p.lam * lj ** 2


def psi_hb(F, p):
    # kappa/2 (J^2/2 - 1/2 - log J) + mu/2 (tr(J^{-2/3} b) - 3)
    J = np.linalg.det(F)
    return 0.5 * p.kappa * (0.5 * (J * J - 1) - np.log(J)) + 0.5 * p.mu * (np.sum(F * F) * J ** (-2 / 3) - 3)


def fd_kirchhoff(psi, F, p, h=1e-6):
    P_ = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            Fp, Fm = F.copy(), F.copy()
            Fp[i, j] += h
            Fm[i, j] -= h
            P_[i, j] = (psi(Fp, p) - psi(Fm, p)) / (2 * h)
    return P_ @ F.T


STRESSES = [
    ("fixed_corotated", kirchhoff_fixed_corotated, psi_fc),
    ("stvk", kirchhoff_stvk, psi_stvk),
    ("neo_hookean", kirchhoff_neo_hookean, psi_nh),
    ("herschel_bulkley", kirchhoff_herschel_bulkley, psi_hb),
]


# ---- moduli -------------------------------------------------------------------

def test_moduli_examples():
    mu, lam, kappa = derive_moduli(1.0, 0.25)
    assert (mu, lam) == pytest.approx((0.4, 0.4), rel=1e-15)
    assert kappa == pytest.approx(2 / 3, rel=1e-15)
    assert derive_moduli(2.0, 0.0) == pytest.approx((1.0, 0.0, 2 / 3), rel=1e-15)


def test_moduli_against_high_precision():
    mpmath.mp.dps = 50
    E, nu = mpmath.mpf("1e6"), mpmath.mpf("0.49")
    ref = (E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu)), E / (3 * (1 - 2 * nu)))
    got = derive_moduli(1e6, 0.49)
    for g, r in zip(got, ref):
        assert abs(g - float(r)) <= 1e-13 * float(r)


@pytest.mark.parametrize("E,nu", [(1.0, 0.5), (1.0, 0.7), (1.0, -0.1), (0.0, 0.3), (-1.0, 0.3)])
def test_moduli_reject(E, nu):
    with pytest.raises(ParameterError):
        derive_moduli(E, nu)


def test_params_reject_negative_extras():
    with pytest.raises(ParameterError):
        MaterialParams(E=1, nu=0.2, yield_stress=-1)
    with pytest.raises(ParameterError):
        MaterialParams(E=1, nu=0.2, density=0)


def test_model_pairing_invariants():
    with pytest.raises(ParameterError):
        MaterialModel(Elasticity.FIXED_COROTATED, Plasticity.HERSCHEL_BULKLEY)
    with pytest.raises(ParameterError):
        MaterialModel(Elasticity.HERSCHEL_BULKLEY, Plasticity.NONE)
    with pytest.raises(ParameterError):
        MaterialModel(Elasticity.NEO_HOOKEAN, Plasticity.DRUCKER_PRAGER)
    m = MaterialModel.from_name("Drucker-Prager", P)
    assert (m.elasticity, m.plasticity) == (Elasticity.STVK, Plasticity.DRUCKER_PRAGER)
    assert MaterialModel.from_name("fixed_corotated", P).plasticity is Plasticity.NONE
    with pytest.raises(ParameterError):
        MaterialModel.from_name("jelly", P)


# ---- decompositions -----------------------------------------------------------

def test_svd3_examples():
    U, s, V = svd3(np.eye(3))
    for M in (U, V):
        np.testing.assert_array_equal(M, np.eye(3))
    np.testing.assert_array_equal(s, [1, 1, 1])
    U, s, V = svd3(np.diag([3.0, 2, 1]))
    np.testing.assert_array_equal(s, [3, 2, 1])
    np.testing.assert_allclose(U, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(V, np.eye(3), atol=1e-15)


def test_svd3_random_reconstruction():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(5000, 3, 3))
    U, s, V = svd3(F)
    rec = (U * s[:, None, :]) @ np.swapaxes(V, 1, 2)
    err = np.linalg.norm(rec - F, axis=(1, 2)) / np.linalg.norm(F, axis=(1, 2))
    assert err.max() <= 1e-10
    np.testing.assert_allclose(np.linalg.det(U), 1, atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(V), 1, atol=1e-12)
    assert np.all(np.abs(s[:, 0]) >= np.abs(s[:, 1])) and np.all(np.abs(s[:, 1]) >= np.abs(s[:, 2]))
    # a negative singular value appears only for reflections, and only in the last slot
    assert np.all(s[:, :2] >= 0)
    np.testing.assert_array_equal(s[:, 2] < 0, np.linalg.det(F) < 0)


def test_svd3_degenerate_inputs_deterministic():
    cases = [np.zeros((3, 3)), np.diag([1.0, 1, 0]), np.outer([1.0, 2, 3], [0, 1, 1]), np.diag([2.0, 2, 2]),
             np.diag([1.0, -1, 1])]
    for F in cases:
        U, s, V = svd3(F)
        U2, s2, V2 = svd3(F.copy())
        np.testing.assert_array_equal(U, U2)
        np.testing.assert_allclose(U @ np.diag(s) @ V.T, F, atol=1e-14)
        np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(np.linalg.det(V), 1, atol=1e-14)


def test_polar_examples():
    R0 = rotations(1, 3)[0]
    np.testing.assert_allclose(polar_rotation(R0), R0, atol=1e-14)
    np.testing.assert_allclose(polar_rotation(np.diag([2.0, 3, 4])), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(polar_rotation(R0 @ np.diag([2.0, 1, 1])), R0, atol=1e-10)
    with pytest.raises(DegenerateDeformationError):
        polar_rotation(np.diag([1.0, 1, -1]))


def test_polar_is_closest_rotation():
    F = random_F(200, 4)
    R = polar_rotation(F)
    d0 = np.linalg.norm(F - R, axis=(1, 2))
    for Q in rotations(20, 5):
        other = R @ Q if not np.allclose(Q, np.eye(3)) else R
        assert np.all(np.linalg.norm(F - other, axis=(1, 2)) >= d0 - 1e-12)


# ---- stresses -----------------------------------------------------------------

@pytest.mark.parametrize("name,tau,psi", STRESSES)
def test_stress_matches_energy_derivative(name, tau, psi):
    for F in random_F(100, 11):
        t = tau(F, P)
        ref = fd_kirchhoff(psi, F, P)
        assert np.linalg.norm(t - ref) <= 1e-4 * np.linalg.norm(ref), name


@pytest.mark.parametrize("name,tau,psi", STRESSES)
def test_stress_objectivity_and_rest(name, tau, psi):
    F = random_F(100, 12)
    R = rotations(100, 13)
    lhs = tau(R @ F, P)
    rhs = R @ tau(F, P) @ np.swapaxes(R, 1, 2)
    assert np.abs(lhs - rhs).max() <= 1e-8
    np.testing.assert_allclose(tau(np.eye(3), P), 0, atol=1e-15)
    t = tau(F, P)
    assert np.abs(t - np.swapaxes(t, 1, 2)).max() <= 1e-9 * np.abs(t).max()


def test_rotation_is_stress_free():
    R = rotations(50, 14)
    for _, tau, _ in STRESSES:
        assert np.abs(tau(R, P)).max() < 1e-12


def test_fixed_corotated_stretch_example():
    F = np.diag([1.1, 1.0, 1.0])
    ref = fd_kirchhoff(psi_fc, F, P)
    assert np.linalg.norm(kirchhoff_fixed_corotated(F, P) - ref) <= 1e-4 * np.linalg.norm(ref)


def test_stvk_hencky_example():
    t = kirchhoff_stvk(np.diag([math.e, 1.0, 1.0]), P)
    np.testing.assert_allclose(t, np.diag([2 * P.mu + P.lam, P.lam, P.lam]), rtol=1e-14, atol=1e-15)


def test_stvk_literal_form_is_not_symmetric():
    F = random_F(1, 15)[0]
    t = kirchhoff_stvk(F, P, literal=True)
    assert np.abs(t - t.T).max() > 1e-3
    # symmetric stretches agree in both forms
    S = F.T @ F
    np.testing.assert_allclose(kirchhoff_stvk(S, P, literal=True), kirchhoff_stvk(S, P), atol=1e-12)


def test_neo_hookean_examples():
    p = MaterialParams(E=2.0, nu=0.0)  # mu = 1, lambda = 0
    np.testing.assert_allclose(kirchhoff_neo_hookean(np.diag([2.0, 1, 1]), p), np.diag([3.0, 0, 0]))
    # the literal form keeps a unit coefficient on log(J)
    np.testing.assert_allclose(kirchhoff_neo_hookean(np.diag([2.0, 1, 1]), p, literal=True),
                               np.diag([3.0, 0, 0]) + np.log(2.0) * np.eye(3))
    assert np.abs(kirchhoff_neo_hookean(np.eye(3), P, literal=True)).max() == 0
    F = np.diag([1.2, 1.0, 1.0])
    diff = kirchhoff_neo_hookean(F, P) - kirchhoff_neo_hookean(F, P, literal=True)
    np.testing.assert_allclose(diff, (P.lam - 1) * np.log(1.2) * np.eye(3), rtol=1e-14)


@pytest.mark.parametrize("name,tau,psi", STRESSES)
def test_degenerate_deformation_raises(name, tau, psi):
    with pytest.raises(DegenerateDeformationError):
        tau(np.diag([1.0, 1.0, -0.5]), P)


def test_degenerate_error_carries_index():
    F = np.broadcast_to(np.eye(3), (5, 3, 3)).copy()
    F[3] = np.diag([1.0, 0.0, 1.0])
    with pytest.raises(DegenerateDeformationError) as exc:
        kirchhoff_fixed_corotated(F, P)
    assert exc.value.index == 3


def test_library_energy_matches_reference():
    F = random_F(20, 16)
    for name, psi in [("fixed_corotated", psi_fc), ("stvk", psi_stvk), ("neo_hookean", psi_nh)]:
        m = MaterialModel.from_name(name, P)
        np.testing.assert_allclose(m.energy_density(F), [psi(f, P) for f in F], rtol=1e-12)
    m = MaterialModel.from_name("herschel-bulkley", P)
    np.testing.assert_allclose(m.energy_density(F), [psi_hb(f, P) for f in F], rtol=1e-12)


# ---- return maps --------------------------------------------------------------

DP = MaterialParams(E=3.0, nu=0.3, friction_angle=math.radians(30))


def _hencky(F):
    return np.log(np.linalg.svd(F, compute_uv=False))


def test_drucker_prager_expansion_resets_to_identity():
    out = return_map_drucker_prager(np.diag([1.2, 1.1, 1.05]), DP)
    np.testing.assert_allclose(out, np.eye(3), atol=1e-15)
    R = rotations(1, 20)[0]
    F = R @ np.diag([1.3, 1.0, 0.9]) @ rotations(1, 21)[0].T
    assert np.log([1.3, 1.0, 0.9]).sum() > 0
    np.testing.assert_allclose(np.linalg.svd(return_map_drucker_prager(F, DP), compute_uv=False), 1, atol=1e-14)


def test_drucker_prager_inside_unchanged():
    F = np.diag([0.9, 0.91, 0.92])
    assert drucker_prager_delta_gamma(np.log(np.diag(F)), DP) <= 0
    np.testing.assert_array_equal(return_map_drucker_prager(F, DP), F)


def test_drucker_prager_projection_lands_on_cone():
    rng = np.random.default_rng(22)
    U, V = rotations(200, 23), rotations(200, 24)
    s = np.exp(rng.uniform(-0.3, 0.3, (200, 3)) - 0.05)
    s *= np.exp(-np.log(s).sum(axis=1, keepdims=True) / 3 - rng.uniform(0.001, 0.05, (200, 1)))
    F = (U * s[:, None, :]) @ np.swapaxes(V, 1, 2)
    eps = np.log(s)
    assert np.all(eps.sum(1) < 0)
    dg0 = drucker_prager_delta_gamma(eps, DP)
    assert (dg0 > 0).sum() > 150  # shear-dominant cases dominate the sample
    out = return_map_drucker_prager(F, DP)
    dg = drucker_prager_delta_gamma(np.array([_hencky(f) for f in out]), DP)
    assert np.all(dg <= 1e-8)
    # on the cone exactly where the trial state was outside it
    assert np.all(np.abs(dg[dg0 > 0]) <= 1e-8)
    # volumetric Hencky strain is not changed by the projection
    np.testing.assert_allclose([_hencky(f).sum() for f in out], eps.sum(1), atol=1e-12)


@pytest.mark.parametrize("mapper,p", [(return_map_drucker_prager, DP),
                                      (return_map_von_mises, MaterialParams(E=3.0, nu=0.3, yield_stress=0.05))])
def test_return_maps_idempotent_and_rotation_free(mapper, p):
    F = random_F(300, 25, 0.6, 1.6)
    once = mapper(F, p)
    twice = mapper(once, p)
    assert np.abs(twice - once).max() <= 1e-8
    R = rotations(50, 26)
    np.testing.assert_allclose(mapper(R, p), R, atol=1e-14)


def test_von_mises_examples():
    p = MaterialParams(E=2.0, nu=0.0, yield_stress=0.1)  # mu = 1
    np.testing.assert_array_equal(return_map_von_mises(np.eye(3), p), np.eye(3))
    out = return_map_von_mises(np.diag([2.0, 0.5, 1.0]), p)
    eps = np.log(np.diag(out))
    assert abs(np.linalg.norm(eps - eps.mean()) - 0.05) <= 1e-10
    # zero yield stress removes the deviatoric strain and keeps the volume
    p0 = MaterialParams(E=2.0, nu=0.0, yield_stress=0.0)
    F = random_F(50, 27)
    out = return_map_von_mises(F, p0)
    for f, o in zip(F, out):
        e = _hencky(o)
        assert np.abs(e - e.mean()).max() <= 1e-12
        assert abs(e.sum() - _hencky(f).sum()) <= 1e-12


def test_von_mises_closed_form_radial_return_on_diagonal():
    rng = np.random.default_rng(28)
    p = MaterialParams(E=5.0, nu=0.25, yield_stress=0.2)
    for _ in range(200):
        s = np.exp(rng.uniform(-0.5, 0.5, 3))
        eps = np.log(s)
        ehat = eps - eps.mean()
        limit = p.yield_stress / (2 * p.mu)
        nrm = np.linalg.norm(ehat)
        expected = eps if nrm <= limit else eps.mean() + ehat * (limit / nrm)
        out = return_map_von_mises(np.diag(s), p)
        # the result is diagonal up to the permutation the SVD picks
        assert np.abs(out - np.diag(np.diag(out))).max() <= 1e-12
        np.testing.assert_allclose(np.log(np.diag(out)), expected, atol=1e-10)
        e = np.log(np.diag(out))
        assert np.linalg.norm(e - e.mean()) <= limit + 1e-8


HB = MaterialParams(E=3.0, nu=0.3, yield_stress=0.1, viscosity=0.0)


def _dev_norm(tau):
    return np.linalg.norm(dev(tau), axis=(-2, -1))


def test_herschel_bulkley_identity_and_elastic_branch():
    F_E, tau = herschel_bulkley_step(np.eye(3), HB, 1e-3)
    np.testing.assert_array_equal(F_E, np.eye(3))
    assert np.abs(tau).max() < 1e-15
    big = MaterialParams(E=3.0, nu=0.3, yield_stress=100.0, viscosity=1.0)
    F = np.eye(3) + 0.01 * np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    F_E, _ = herschel_bulkley_step(F, big, 1e-3)
    np.testing.assert_array_equal(F_E, F)


def test_herschel_bulkley_zero_yield_zero_viscosity_limit():
    p = MaterialParams(E=3.0, nu=0.3, yield_stress=0.0, viscosity=0.0)
    F = random_F(100, 30, 0.7, 1.4)
    F_E, tau = herschel_bulkley_step(F, p, 1e-3)
    assert _dev_norm(tau).max() <= 1e-10
    J = np.linalg.det(F)
    np.testing.assert_allclose(np.linalg.det(F_E), J, rtol=1e-12)
    np.testing.assert_allclose(np.trace(tau, axis1=1, axis2=2) / 3, 0.5 * p.kappa * (J * J - 1), rtol=1e-10)


def test_herschel_bulkley_relaxation_formula():
    p = MaterialParams(E=3.0, nu=0.3, yield_stress=0.05, viscosity=0.02)
    dt = 1e-2
    F = random_F(100, 31, 0.7, 1.4)
    s_trial = _dev_norm(kirchhoff_herschel_bulkley(F, p))
    limit = math.sqrt(2 / 3) * p.yield_stress
    F_E, tau = herschel_bulkley_step(F, p, dt)
    expected = np.where(s_trial > limit, s_trial - (s_trial - limit) / (1 + p.viscosity / (2 * p.mu * dt)), s_trial)
    np.testing.assert_allclose(_dev_norm(tau), expected, rtol=1e-10)
    np.testing.assert_allclose(np.linalg.det(F_E), np.linalg.det(F), rtol=1e-12)
    # the rotation of the trial state is kept
    np.testing.assert_allclose(polar_rotation(F_E), polar_rotation(F), atol=1e-10)


def test_herschel_bulkley_rate_independent_projection_idempotent():
    F = random_F(100, 32, 0.7, 1.4)
    once, tau = herschel_bulkley_step(F, HB, 1e-3)
    assert _dev_norm(tau).max() <= math.sqrt(2 / 3) * HB.yield_stress + 1e-8
    twice, _ = herschel_bulkley_step(once, HB, 1e-3)
    assert np.abs(twice - once).max() <= 1e-8


def test_herschel_bulkley_rejects_bad_dt():
    with pytest.raises(ParameterError):
        herschel_bulkley_step(np.eye(3), HB, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.5, 2.0), min_size=3, max_size=3), st.integers(0, 2 ** 31))
def test_model_project_keeps_positive_determinant(sv, seed):
    U, V = rotations(1, seed % 10000)[0], rotations(1, seed % 9973 + 1)[0]
    F = U @ np.diag(sv) @ V.T
    for name, p in [("von mises", MaterialParams(E=2, nu=0.3, yield_stress=0.1)), ("drucker-prager", DP),
                    ("herschel-bulkley", MaterialParams(E=2, nu=0.3, yield_stress=0.1, viscosity=0.1))]:
        out = MaterialModel.from_name(name, p).project(F, 1e-3)
        assert np.linalg.det(out) > 0
