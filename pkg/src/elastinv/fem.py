"""Bilinear-quad plane-strain FEM on a structured 2D grid.

Nodes are numbered row-major, ``node = row * cols + col``; row 0 is the top
edge. Each node carries two DOFs interleaved as (lateral, axial), so DOF
``2 * node`` moves along the columns and ``2 * node + 1`` along the rows.

The stiffness is linear in the nodal modulus ``x``: the modulus is
interpolated with the element shape functions to the 2x2 Gauss points, which
gives one 8x8 block per (element, local node) pair.  ``K(x)`` and ``D(u)`` are
both scattered from these four blocks, so the third-order tensor linking them
is never formed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DomainError, InvalidInputError, SingularSystemError

_GAUSS = 1.0 / np.sqrt(3.0)
# local node order: (r, c), (r, c+1), (r+1, c+1), (r+1, c)
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


def plane_strain_matrix(poisson_ratio: float) -> np.ndarray:
    """Constitutive matrix for unit Young's modulus under plane strain."""
    nu = poisson_ratio
    c = 1.0 / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return c * np.array([[1.0 - nu, nu, 0.0],
                         [nu, 1.0 - nu, 0.0],
                         [0.0, 0.0, (1.0 - 2.0 * nu) / 2.0]])


def nodal_stiffness_blocks(element_size: float, poisson_ratio: float) -> np.ndarray:
    """Return a (4, 8, 8) array: the element stiffness for unit modulus at one
    local node and zero at the other three. Their sum is the unit element
    stiffness."""
    C = plane_strain_matrix(poisson_ratio)
    h = element_size
    det_j = (h / 2.0) ** 2
    blocks = np.zeros((4, 8, 8))
    for xi, eta in [(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)]:
        shape = (1.0 + _XI * xi) * (1.0 + _ETA * eta) / 4.0
        dn_dx = _XI * (1.0 + _ETA * eta) / 4.0 * (2.0 / h)
        dn_dy = _ETA * (1.0 + _XI * xi) / 4.0 * (2.0 / h)
        B = np.zeros((3, 8))
        B[0, 0::2] = dn_dx
        B[1, 1::2] = dn_dy
        B[2, 0::2] = dn_dy
        B[2, 1::2] = dn_dx
        kg = B.T @ C @ B * det_j
        blocks += shape[:, None, None] * kg[None]
    return blocks


@dataclass(frozen=True, eq=False)
class MeshModel:
    rows: int
    cols: int
    element_size: float = 1e-3
    poisson_ratio: float = 0.45
    dirichlet_dofs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise InvalidInputError(f"mesh needs at least 2x2 nodes, got {self.rows}x{self.cols}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise DomainError(f"poisson_ratio must lie in [0, 0.5), got {self.poisson_ratio}")
        if self.element_size <= 0:
            raise DomainError("element_size must be positive")
        if self.dirichlet_dofs is None:
            bottom = np.arange((self.rows - 1) * self.cols, self.rows * self.cols)
            dofs = np.sort(np.concatenate([2 * bottom, 2 * bottom + 1]))
        else:
            dofs = np.unique(np.asarray(self.dirichlet_dofs, dtype=np.int64))
        if dofs.size == 0:
            raise InvalidInputError("at least one Dirichlet DOF is required")
        if dofs.min() < 0 or dofs.max() >= 2 * self.n_nodes:
            raise InvalidInputError("Dirichlet DOF index out of range")
        object.__setattr__(self, "dirichlet_dofs", dofs)

        r, c = np.meshgrid(np.arange(self.rows - 1), np.arange(self.cols - 1), indexing="ij")
        n0 = (r * self.cols + c).ravel()
        conn = np.stack([n0, n0 + 1, n0 + self.cols + 1, n0 + self.cols], axis=1)
        edofs = np.stack([2 * conn, 2 * conn + 1], axis=-1).reshape(len(conn), 8)
        free = np.setdiff1d(np.arange(2 * self.n_nodes), dofs)
        blocks = nodal_stiffness_blocks(self.element_size, self.poisson_ratio)
        for name, value in [("element_node_map", conn), ("element_dofs", edofs),
                            ("free_dofs", free), ("node_blocks", blocks)]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_elements(self) -> int:
        return (self.rows - 1) * (self.cols - 1)

    @property
    def unit_element_stiffness(self) -> np.ndarray:
        return self.node_blocks.sum(axis=0)

    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = True
        return mask


def _as_nodal(mesh: MeshModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != mesh.n_nodes:
        raise InvalidInputError(f"elasticity has {x.size} values, mesh has {mesh.n_nodes} nodes")
    return x


def _as_dofs(mesh: MeshModel, v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != mesh.n_dofs:
        raise InvalidInputError(f"{what} has {v.size} entries, mesh has {mesh.n_dofs} DOFs")
    return v


def check_elasticity(mesh: MeshModel, x) -> np.ndarray:
    x = _as_nodal(mesh, x)
    if not np.all(np.isfinite(x)):
        raise DomainError("elasticity contains non-finite values")
    if np.any(x <= 0):
        raise DomainError(f"elasticity must be strictly positive (min {x.min():.3g})")
    return x


def assemble_stiffness(mesh: MeshModel, x, check: bool = True) -> sp.csr_matrix:
    """Global stiffness K(x), Dirichlet rows/cols replaced by identity."""
    x = check_elasticity(mesh, x) if check else _as_nodal(mesh, x)
    ke = np.einsum("ea,aij->eij", x[mesh.element_node_map], mesh.node_blocks)
    edofs = mesh.element_dofs
    rows = np.repeat(edofs, 8, axis=1).ravel()
    cols = np.tile(edofs, (1, 8)).ravel()
    keep = ~(mesh.dirichlet_mask()[rows] | mesh.dirichlet_mask()[cols])
    d = mesh.dirichlet_dofs
    rows = np.concatenate([rows[keep], d])
    cols = np.concatenate([cols[keep], d])
    data = np.concatenate([ke.ravel()[keep], np.ones(d.size)])
    return sp.csr_matrix((data, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))


def forward_solve(mesh: MeshModel, x, f) -> np.ndarray:
    """Solve K(x) u = f by Cholesky on the free block."""
    f = _as_dofs(mesh, f, "force")
    K = assemble_stiffness(mesh, x)
    free = mesh.free_dofs
    u = np.zeros(mesh.n_dofs)
    if not np.any(f[free]):
        return u
    Kff = K[free][:, free].toarray()
    try:
        factor = sla.cho_factor(Kff, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"K(x) is not SPD on a {mesh.rows}x{mesh.cols} mesh with "
            f"{mesh.dirichlet_dofs.size} Dirichlet DOFs") from exc
    u[free] = sla.cho_solve(factor, f[free])
    return u


def build_design_matrix(mesh: MeshModel, u) -> np.ndarray:
    """Dense D(u) with D(u) @ x == K(x) @ u on every free row.

    Dirichlet rows are zero; Dirichlet entries of ``u`` are ignored, matching
    the zeroed columns of K(x).
    """
    u = _as_dofs(mesh, u, "displacement").copy()
    u[mesh.dirichlet_dofs] = 0.0
    ue = u[mesh.element_dofs]
    contrib = np.einsum("aij,ej->eai", mesh.node_blocks, ue)
    D = np.zeros((mesh.n_dofs, mesh.n_nodes))
    for a in range(4):
        cols = np.broadcast_to(mesh.element_node_map[:, a:a + 1], mesh.element_dofs.shape)
        np.add.at(D, (mesh.element_dofs, cols), contrib[:, a, :])
    D[mesh.dirichlet_dofs] = 0.0
    return D


@dataclass(frozen=True)
class LoadSpec:
    """Uniform axial traction on the top edge, pushing toward the fixed bottom."""
    magnitude: float = 1e-3


def apply_load(mesh: MeshModel, load: LoadSpec | float) -> np.ndarray:
    magnitude = load.magnitude if isinstance(load, LoadSpec) else float(load)
    if not np.isfinite(magnitude):
        raise DomainError("load magnitude must be finite")
    weights = np.full(mesh.cols, 1.0)
    weights[[0, -1]] = 0.5
    f = np.zeros(mesh.n_dofs)
    top = np.arange(mesh.cols)
    f[2 * top + 1] = magnitude * mesh.element_size * weights
    f[mesh.dirichlet_dofs] = 0.0
    return f
