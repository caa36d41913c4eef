"""Measurement noise and the signal-dependent covariance of the linearized model.

Displacements are observed as ``u_m = u + n`` and forces as ``f + w``. Moving
``n`` to the force side gives the effective noise ``w - K(x) n`` with
covariance ``Gamma = s_w^2 I + s_n^2 K(x) K(x)^T`` on the free DOFs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, InvalidInputError, SingularSystemError
from .fem import MeshModel, assemble_stiffness, check_elasticity, forward_solve


@dataclass(frozen=True)
class NoiseSpec:
    sigma_w: float = 0.0
    sigma_n: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_w < 0 or self.sigma_n < 0:
            raise DomainError("noise standard deviations must be non-negative")

    @property
    def noiseless(self) -> bool:
        return self.sigma_w == 0 and self.sigma_n == 0


@dataclass(eq=False)
class MeasurementSet:
    f: np.ndarray
    u_m: np.ndarray
    noise: NoiseSpec
    ground_truth: np.ndarray | None = None
    u_clean: np.ndarray | None = field(default=None, repr=False)

    def check(self, mesh: MeshModel) -> None:
        if self.f.size != mesh.n_dofs or self.u_m.size != mesh.n_dofs:
            raise InvalidInputError(
                f"measurement sizes f={self.f.size}, u_m={self.u_m.size} "
                f"do not match mesh DOFs {mesh.n_dofs}")


def snr_to_sigma(mesh: MeshModel, u, snr_db: float) -> float:
    """Per-DOF noise level so that 10 log10(|u|^2 / E|n|^2) equals ``snr_db``,
    with noise on the free DOFs only."""
    u = np.asarray(u, dtype=np.float64).ravel()
    norm = np.linalg.norm(u)
    if norm == 0:
        raise DomainError("SNR is undefined for an all-zero signal")
    if np.isposinf(snr_db):
        return 0.0
    m = mesh.free_dofs.size
    return float(norm / (np.sqrt(m) * 10.0 ** (snr_db / 20.0)))


def realized_snr_db(u, u_m) -> float:
    u = np.asarray(u).ravel()
    return float(10.0 * np.log10(np.sum(u ** 2) / np.sum((np.asarray(u_m).ravel() - u) ** 2)))


def sample_measurements(mesh: MeshModel, x_true, f_clean, spec: NoiseSpec) -> MeasurementSet:
    x_true = check_elasticity(mesh, x_true)
    f_clean = np.asarray(f_clean, dtype=np.float64).ravel()
    u = forward_solve(mesh, x_true, f_clean)
    rng = np.random.default_rng(spec.seed)
    free = mesh.free_dofs
    n = rng.standard_normal(free.size)
    w = rng.standard_normal(free.size)
    u_m = u.copy()
    u_m[free] += spec.sigma_n * n
    f = f_clean.copy()
    f[free] += spec.sigma_w * w
    return MeasurementSet(f=f, u_m=u_m, noise=spec, ground_truth=x_true.copy(), u_clean=u)


class GammaOperator:
    """Covariance of the effective force noise, restricted to free DOFs.

    Holds the dense matrix and its lower Cholesky factor. A noiseless spec
    yields the identity: any SPD weight leaves the noise-free fit unchanged.
    """

    def __init__(self, matrix: np.ndarray, ridge: float = 0.0):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.ridge = ridge
        self.chol = np.linalg.cholesky(self.matrix)
        self.matrix.setflags(write=False)
        self.chol.setflags(write=False)

    @classmethod
    def identity(cls, size: int) -> "GammaOperator":
        return cls(np.eye(size))

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def _check(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.size:
            raise InvalidInputError(f"residual has {r.shape[0]} rows, Gamma is {self.size}x{self.size}")
        return r

    def whiten(self, r) -> np.ndarray:
        """L^{-1} r; accepts vectors or matrices."""
        return sla.solve_triangular(self.chol, self._check(r), lower=True)

    def solve(self, r) -> np.ndarray:
        """Gamma^{-1} r via two triangular solves."""
        z = self.whiten(r)
        return sla.solve_triangular(self.chol, z, lower=True, trans="T")

    def weighted_norm_sq(self, r) -> float:
        z = self.whiten(r)
        return float(z @ z)


def gamma_matrix(mesh: MeshModel, x, spec: NoiseSpec) -> np.ndarray:
    free = mesh.free_dofs
    Kff = assemble_stiffness(mesh, x)[free][:, free].toarray()
    return spec.sigma_w ** 2 * np.eye(free.size) + spec.sigma_n ** 2 * (Kff @ Kff.T)


def build_gamma(mesh: MeshModel, x, spec: NoiseSpec) -> GammaOperator:
    x = check_elasticity(mesh, x)
    if spec.noiseless:
        return GammaOperator.identity(mesh.free_dofs.size)
    G = gamma_matrix(mesh, x, spec)
    G = 0.5 * (G + G.T)
    try:
        return GammaOperator(G)
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-10 * np.trace(G) / mesh.n_dofs
    try:
        return GammaOperator(G + ridge * np.eye(G.shape[0]), ridge=ridge)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"Gamma is not SPD even after ridge {ridge:.3g} "
            f"(sigma_w={spec.sigma_w}, sigma_n={spec.sigma_n})") from exc
