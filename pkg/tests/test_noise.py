import numpy as np
import pytest
from hypothesis import given, strategies as st

from elastinv.errors import DomainError, InvalidInputError
from elastinv.fem import MeshModel, apply_load, assemble_stiffness, forward_solve
from elastinv.noise import (GammaOperator, NoiseSpec, build_gamma, gamma_matrix, realized_snr_db,
                            sample_measurements, snr_to_sigma)


def test_noise_spec_rejects_negative():
    with pytest.raises(DomainError):
        NoiseSpec(sigma_w=-1.0)


def test_snr_to_sigma_closed_form():
    mesh = MeshModel(3, 3)
    u = np.zeros(18)
    u[mesh.free_dofs] = 2.0
    # |u|^2 = 12 * 4, E|n|^2 = 12 sigma^2 -> 20 dB means sigma = 2 / 10
    assert snr_to_sigma(mesh, u, 20.0) == pytest.approx(0.2, rel=1e-14)
    assert snr_to_sigma(mesh, u, np.inf) == 0.0
    with pytest.raises(DomainError):
        snr_to_sigma(mesh, np.zeros(18), 30.0)


def test_realized_snr_matches_target_on_average():
    mesh = MeshModel(16, 16)
    x = np.full(mesh.n_nodes, 0.125)
    f = apply_load(mesh, 1e-3)
    u = forward_solve(mesh, x, f)
    s = snr_to_sigma(mesh, u, 35.0)
    snrs = [realized_snr_db(u, sample_measurements(mesh, x, f, NoiseSpec(0, s, seed)).u_m)
            for seed in range(20)]
    assert np.mean(snrs) == pytest.approx(35.0, abs=0.2)


def test_sampling_is_seeded_and_spares_dirichlet():
    mesh = MeshModel(4, 4)
    x = np.full(16, 0.2)
    f = apply_load(mesh, 1e-3)
    a = sample_measurements(mesh, x, f, NoiseSpec(1e-6, 1e-6, seed=5))
    b = sample_measurements(mesh, x, f, NoiseSpec(1e-6, 1e-6, seed=5))
    c = sample_measurements(mesh, x, f, NoiseSpec(1e-6, 1e-6, seed=6))
    np.testing.assert_array_equal(a.u_m, b.u_m)
    assert not np.array_equal(a.u_m, c.u_m)
    assert not a.u_m[mesh.dirichlet_dofs].any()
    assert not a.f[mesh.dirichlet_dofs].any()


def test_zero_displacement_noise_reduces_to_scaled_identity():
    mesh = MeshModel(3, 4)
    G = gamma_matrix(mesh, np.ones(12), NoiseSpec(sigma_w=0.3))
    np.testing.assert_array_equal(G, 0.09 * np.eye(mesh.free_dofs.size))


def test_gamma_matches_dense_oracle_on_tiny_mesh(rng):
    mesh = MeshModel(3, 3)
    x = rng.uniform(0.1, 1.0, 9)
    spec = NoiseSpec(sigma_w=1e-3, sigma_n=2e-2)
    K = assemble_stiffness(mesh, x).toarray()
    free = mesh.free_dofs
    Kff = K[np.ix_(free, free)]
    oracle = 1e-6 * np.eye(free.size) + 4e-4 * Kff @ Kff.T
    np.testing.assert_allclose(build_gamma(mesh, x, spec).matrix, oracle, rtol=1e-10, atol=1e-18)


def test_noiseless_gamma_is_identity():
    mesh = MeshModel(3, 3)
    g = build_gamma(mesh, np.ones(9), NoiseSpec())
    np.testing.assert_array_equal(g.matrix, np.eye(mesh.free_dofs.size))


@given(seed=st.integers(0, 2**32 - 1), sw=st.floats(1e-8, 1e-2), sn=st.floats(0, 1e-2))
def test_gamma_spd_and_whitening(seed, sw, sn):
    mesh = MeshModel(4, 4)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 1.0, 16)
    g = build_gamma(mesh, x, NoiseSpec(sigma_w=sw, sigma_n=sn))
    np.testing.assert_array_equal(g.matrix, g.matrix.T)
    r = rng.standard_normal(g.size)
    direct = r @ np.linalg.solve(g.matrix, r)
    assert g.weighted_norm_sq(r) == pytest.approx(direct, rel=1e-8)
    z = g.whiten(r)
    assert z @ z == pytest.approx(g.weighted_norm_sq(r), rel=1e-12)
    assert g.weighted_norm_sq(r) > 0


def test_weighted_norm_against_inverse(rng):
    A = rng.standard_normal((4, 4))
    G = GammaOperator(A @ A.T + 4 * np.eye(4))
    r = rng.standard_normal(4)
    assert G.weighted_norm_sq(r) == pytest.approx(r @ np.linalg.inv(G.matrix) @ r, rel=1e-12)
    np.testing.assert_allclose(G.solve(r), np.linalg.inv(G.matrix) @ r, rtol=1e-12)
    assert G.weighted_norm_sq(np.zeros(4)) == 0.0
    assert GammaOperator.identity(4).weighted_norm_sq(r) == pytest.approx(r @ r, rel=1e-15)


def test_gamma_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        GammaOperator.identity(3).solve(np.ones(4))


def test_gamma_rejects_bad_modulus():
    mesh = MeshModel(3, 3)
    with pytest.raises(DomainError):
        build_gamma(mesh, -np.ones(9), NoiseSpec(1e-3, 1e-3))
