import numpy as np
import pytest
from hypothesis import given, strategies as st

from elastinv.errors import DomainError, InvalidInputError
from elastinv.fem import (LoadSpec, MeshModel, apply_load, assemble_stiffness, build_design_matrix,
                          forward_solve, nodal_stiffness_blocks, plane_strain_matrix)


def gauss3_blocks(h, nu):
    """Independent 3x3 Gauss-Legendre integration of the weighted element stiffness."""
    pts, wts = np.polynomial.legendre.leggauss(3)
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    C = plane_strain_matrix(nu)
    out = np.zeros((4, 8, 8))
    for xi, wx in zip(pts, wts):
        for eta, wy in zip(pts, wts):
            B = np.zeros((3, 8))
            N = np.zeros(4)
            for a, (xa, ya) in enumerate(corners):
                N[a] = (1 + xa * xi) * (1 + ya * eta) / 4
                dx = xa * (1 + ya * eta) / 4 * 2 / h
                dy = ya * (1 + xa * xi) / 4 * 2 / h
                B[0, 2 * a] = dx
                B[1, 2 * a + 1] = dy
                B[2, 2 * a] = dy
                B[2, 2 * a + 1] = dx
            kg = B.T @ C @ B * (h / 2) ** 2 * wx * wy
            out += N[:, None, None] * kg
    return out


def test_blocks_match_three_point_quadrature():
    np.testing.assert_allclose(nodal_stiffness_blocks(1e-3, 0.45), gauss3_blocks(1e-3, 0.45),
                               rtol=1e-12, atol=1e-12)


def test_unit_element_stiffness_spectrum():
    ke = MeshModel(3, 3).unit_element_stiffness
    assert np.allclose(ke, ke.T, atol=0)
    ev = np.linalg.eigvalsh(ke)
    assert np.sum(np.abs(ev) <= 1e-9 * ev.max()) == 3
    assert ev.min() > -1e-9 * ev.max()


def test_known_square_element_entry():
    # square Q4, plane strain, unit modulus and thickness:
    # k11 = c * ((1 - nu) / 3 + (1 - 2 nu) / 6), c = 1 / ((1 + nu)(1 - 2 nu))
    nu = 0.3
    ke = nodal_stiffness_blocks(1.0, nu).sum(axis=0)
    c = 1 / ((1 + nu) * (1 - 2 * nu))
    k11 = c * ((1 - nu) / 3 + (1 - 2 * nu) / 2 / 3)
    assert ke[0, 0] == pytest.approx(k11, rel=1e-14)


def test_default_dirichlet_is_bottom_row():
    mesh = MeshModel(3, 4)
    bottom = np.arange(8, 12)
    assert set(mesh.dirichlet_dofs) == set(2 * bottom) | set(2 * bottom + 1)
    assert mesh.free_dofs.size == 2 * 8


@pytest.mark.parametrize("kwargs, exc", [
    (dict(rows=1, cols=4), InvalidInputError),
    (dict(rows=3, cols=3, poisson_ratio=0.5), DomainError),
    (dict(rows=3, cols=3, element_size=0.0), DomainError),
    (dict(rows=3, cols=3, dirichlet_dofs=[]), InvalidInputError),
    (dict(rows=3, cols=3, dirichlet_dofs=[18]), InvalidInputError),
])
def test_mesh_validation(kwargs, exc):
    with pytest.raises(exc):
        MeshModel(**kwargs)


def test_assembly_rejects_nonpositive_modulus():
    mesh = MeshModel(3, 3)
    x = np.ones(9)
    x[4] = 0.0
    with pytest.raises(DomainError):
        assemble_stiffness(mesh, x)
    x[4] = np.nan
    with pytest.raises(DomainError):
        assemble_stiffness(mesh, x)


def test_stiffness_is_linear_in_modulus(rng):
    mesh = MeshModel(4, 5)
    a, b = rng.uniform(0.1, 1, 20), rng.uniform(0.1, 1, 20)
    free = mesh.free_dofs
    K = lambda x: assemble_stiffness(mesh, x).toarray()[np.ix_(free, free)]
    np.testing.assert_allclose(K(2 * a + 3 * b), 2 * K(a) + 3 * K(b), rtol=1e-12, atol=1e-12)


def test_dirichlet_rows_are_identity():
    mesh = MeshModel(3, 3)
    K = assemble_stiffness(mesh, np.ones(9)).toarray()
    d = mesh.dirichlet_dofs
    np.testing.assert_array_equal(K[d][:, d], np.eye(d.size))
    assert not K[np.ix_(d, mesh.free_dofs)].any()


@given(rows=st.integers(2, 8), cols=st.integers(2, 8), seed=st.integers(0, 2**32 - 1))
def test_design_matrix_identity(rows, cols, seed):
    mesh = MeshModel(rows, cols)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 2.0, mesh.n_nodes)
    u = rng.standard_normal(mesh.n_dofs)
    u[mesh.dirichlet_dofs] = 0.0
    Ku = assemble_stiffness(mesh, x) @ u
    Dx = build_design_matrix(mesh, u) @ x
    free = mesh.free_dofs
    assert np.linalg.norm(Dx[free] - Ku[free]) <= 1e-12 * np.linalg.norm(Ku[free])


def test_design_matrix_ignores_dirichlet_entries(rng):
    mesh = MeshModel(4, 4)
    u = rng.standard_normal(mesh.n_dofs)
    v = u.copy()
    v[mesh.dirichlet_dofs] = 0.0
    np.testing.assert_array_equal(build_design_matrix(mesh, u), build_design_matrix(mesh, v))
    assert not build_design_matrix(mesh, u)[mesh.dirichlet_dofs].any()


def test_forward_solve_satisfies_equilibrium(rng):
    mesh = MeshModel(6, 5)
    x = rng.uniform(0.1, 0.8, mesh.n_nodes)
    f = apply_load(mesh, LoadSpec())
    u = forward_solve(mesh, x, f)
    free = mesh.free_dofs
    r = (assemble_stiffness(mesh, x) @ u - f)[free]
    assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(f)
    assert not u[mesh.dirichlet_dofs].any()


@given(scale=st.floats(0.1, 10.0))
def test_uniform_stiffening_scales_displacement(scale):
    mesh = MeshModel(4, 4)
    f = apply_load(mesh, 1e-3)
    u1 = forward_solve(mesh, np.full(16, 0.2), f)
    u2 = forward_solve(mesh, np.full(16, 0.2 * scale), f)
    np.testing.assert_allclose(u2 * scale, u1, rtol=1e-9, atol=1e-20)


def test_compression_points_toward_fixed_edge():
    mesh = MeshModel(5, 5)
    u = forward_solve(mesh, np.full(25, 0.125), apply_load(mesh, LoadSpec()))
    axial_top = u[2 * np.arange(5) + 1]
    assert np.all(axial_top > 0)


def test_load_is_consistent_nodal_traction():
    mesh = MeshModel(3, 4, element_size=2e-3)
    f = apply_load(mesh, LoadSpec(magnitude=1.0))
    np.testing.assert_allclose(f[2 * np.arange(4) + 1], 2e-3 * np.array([0.5, 1, 1, 0.5]))
    assert f.sum() == pytest.approx(3 * 2e-3)


def test_zero_load_gives_zero_displacement():
    mesh = MeshModel(3, 3)
    assert not forward_solve(mesh, np.ones(9), np.zeros(18)).any()
