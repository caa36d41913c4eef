"""Fixed-point / projected gradient descent solver for the regularized
weighted least-squares elasticity problem.

Outer loop: freeze the covariance at the current estimate. Inner loop: run
projected gradient steps on

    J(x) = s * 1/2 ||f - D(u_m) x||^2_{Gamma^{-1}} + lambda * k * C(x),   x > 0

where ``s`` is the data-term scale (see ``ReconConfig.data_normalization``)
and ``k = ReconConfig.lambda_unit`` fixes what one unit of lambda means
relative to the normalized data term. With ``lambda = 0`` this is the
unregularized maximum-likelihood estimate.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .critic import CriticNet
from .errors import DomainError, InvalidInputError, NumericalAbort
from .fem import MeshModel, build_design_matrix
from .metrics_io import atomic_write_text, write_egrid
from .noise import GammaOperator, MeasurementSet, build_gamma

log = logging.getLogger(__name__)


@dataclass
class ReconConfig:
    lam: float = 10.0
    epsilon: float | str = 0.7
    gd_steps: int = 100
    outer_iters: int = 3
    fixed_point_tol: float = 1e-3
    # "constant": start every run at init_value, so a regularized run and its
    # ML baseline see the same start and step budget. "ml": warm-start
    # regularized runs from the ML solution.
    init: str = "constant"
    init_value: float = 0.125
    positivity_floor: float = 1e-6
    # "lipschitz": divide the data term by the top eigenvalue of D^T Gamma^-1 D
    # at each covariance refresh, so step sizes are fractions of 1/L.
    # "none": use the data term as written.
    data_normalization: str = "lipschitz"
    # 0 disables the early exit on small relative change within the GD loop
    inner_tol: float = 0.0
    power_iters: int = 200
    # critic weight per unit lambda. With lipschitz data scaling the data
    # term has unit curvature, so lambda = 10 weighs the critic at 2e-3.
    lambda_unit: float = 2e-4

    def __post_init__(self):
        if self.epsilon != "auto" and not float(self.epsilon) >= 0:
            raise InvalidInputError("epsilon must be non-negative or 'auto'")
        if self.gd_steps < 1 or self.outer_iters < 1:
            raise InvalidInputError("gd_steps and outer_iters must be at least 1")
        if self.lam < 0:
            raise InvalidInputError("lambda must be non-negative")
        if self.init not in ("constant", "ml"):
            raise InvalidInputError(f"unknown init mode {self.init!r}")
        if self.data_normalization not in ("lipschitz", "none"):
            raise InvalidInputError(f"unknown data_normalization {self.data_normalization!r}")
        if self.positivity_floor <= 0:
            raise InvalidInputError("positivity_floor must be positive")
        if not self.lambda_unit > 0:
            raise InvalidInputError("lambda_unit must be positive")


@dataclass
class ReconResult:
    x_hat: np.ndarray
    objective_trace: list[float]
    gamma_log: list[dict]
    wall_time: float
    rank: int | None = None
    converged: bool = False
    epsilon_halved: bool = False

    def sidecar(self, cfg: ReconConfig) -> dict:
        return {"objective_trace": self.objective_trace, "gamma_log": self.gamma_log,
                "wall_time_s": self.wall_time, "design_matrix_rank": self.rank,
                "converged": self.converged, "epsilon_halved": self.epsilon_halved,
                "config": asdict(cfg)}


class Problem:
    """Free-DOF rows of the linearized model f = D(u_m) x, built once."""

    def __init__(self, mesh: MeshModel, meas: MeasurementSet):
        meas.check(mesh)
        self.mesh = mesh
        self.meas = meas
        free = mesh.free_dofs
        self.D = build_design_matrix(mesh, meas.u_m)[free]
        self.f = np.asarray(meas.f, dtype=np.float64).ravel()[free]

    @property
    def shape(self):
        return self.mesh.rows, self.mesh.cols

    def residual(self, x) -> np.ndarray:
        return self.f - self.D @ np.asarray(x).ravel()

    def gamma(self, x) -> GammaOperator:
        return build_gamma(self.mesh, x, self.meas.noise)

    def rank(self, tol: float | None = None) -> int:
        """Numerical rank via column-pivoted QR."""
        r = sla.qr(self.D, mode="r", pivoting=True)[0]
        diag = np.abs(np.diag(r))
        if tol is None:
            tol = diag[0] * max(self.D.shape) * np.finfo(float).eps
        return int(np.sum(diag > tol))


@dataclass
class Whitened:
    """Data term with the covariance frozen: 1/2 * scale * ||A x - b||^2."""
    A: np.ndarray
    b: np.ndarray
    scale: float = 1.0
    lipschitz: float = field(default=np.nan)

    @classmethod
    def build(cls, problem: Problem, gamma: GammaOperator) -> "Whitened":
        return cls(A=gamma.whiten(problem.D), b=gamma.whiten(problem.f))

    def value(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * self.scale * float(r @ r)

    def gradient(self, x) -> np.ndarray:
        return self.scale * (self.A.T @ (self.A @ x - self.b))


def power_iteration(A: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """Largest eigenvalue of A^T A from a fixed start vector."""
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        new = float(np.linalg.norm(w))
        if new == 0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return lam


def objective(x, problem: Problem, gamma: GammaOperator, critic: CriticNet | None = None,
              lam: float = 0.0, scale: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if np.any(x <= 0):
        raise DomainError("objective is defined for x > 0 only")
    value = 0.5 * scale * gamma.weighted_norm_sq(problem.residual(x))
    if lam and critic is not None:
        value += lam * float(critic.score(x.reshape(problem.shape))[0])
    return value


def objective_gradient(x, problem: Problem, gamma: GammaOperator, critic: CriticNet | None = None,
                       lam: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Exact gradient: -s D^T Gamma^{-1} (f - D x) + lambda grad C(x)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = -scale * (problem.D.T @ gamma.solve(problem.residual(x)))
    if lam and critic is not None:
        _, gc = critic.score_and_input_grad(x.reshape(problem.shape))
        g = g + lam * gc.ravel()
    return g


def _critic_terms(critic, x, shape, lam):
    if not lam or critic is None:
        return 0.0, 0.0
    score, gc = critic.score_and_input_grad(x.reshape(shape))
    return score, gc.ravel()


def gd_step(x, data: Whitened, epsilon: float, critic: CriticNet | None = None,
            lam: float = 0.0, floor: float = 1e-6, shape=None) -> np.ndarray:
    """x' = max(x - epsilon * grad J(x), floor)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = data.gradient(x)
    if lam and critic is not None:
        _, gc = critic.score_and_input_grad(x.reshape(shape))
        g = g + lam * gc.ravel()
    if not np.all(np.isfinite(g)):
        raise NumericalAbort("non-finite gradient in projected GD step")
    return np.maximum(x - epsilon * g, floor)


def _run_inner(x, data: Whitened, eps: float, cfg: ReconConfig, critic, lam, shape, trace):
    """Projected GD with a frozen covariance. Returns (x, eps, halved)."""
    score, gc = _critic_terms(critic, x, shape, lam)
    value = data.value(x) + lam * score
    rises, halved = 0, False
    for _ in range(cfg.gd_steps):
        g = data.gradient(x) + lam * gc
        if not np.all(np.isfinite(g)):
            raise NumericalAbort("non-finite gradient in projected GD step")
        x_new = np.maximum(x - eps * g, cfg.positivity_floor)
        score, gc = _critic_terms(critic, x_new, shape, lam)
        new_value = data.value(x_new) + lam * score
        if not np.isfinite(new_value):
            raise NumericalAbort("objective became non-finite")
        trace.append(new_value)
        rises = rises + 1 if new_value > value else 0
        if rises >= 10:
            if halved:
                raise NumericalAbort(f"objective rose for 10 consecutive steps even at epsilon={eps:g}")
            eps *= 0.5
            halved = True
            rises = 0
            log.warning("objective rising; halving epsilon to %g", eps)
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300)
        x, value = x_new, new_value
        if cfg.inner_tol and change < cfg.inner_tol:
            break
    return x, eps, halved


def reconstruct(mesh: MeshModel, meas: MeasurementSet, critic: CriticNet | None, cfg: ReconConfig,
                x0=None, problem: Problem | None = None, report_rank: bool = True) -> ReconResult:
    """Alternate covariance refreshes with projected GD on the frozen problem.

    Initialization: ``x0`` if given; otherwise the constant ``init_value``,
    or for ``init='ml'`` with lambda > 0 the unregularized solution.
    """
    t0 = time.perf_counter()
    if cfg.lam > 0 and critic is None:
        raise InvalidInputError("lambda > 0 needs a critic")
    problem = problem or Problem(mesh, meas)
    lam = cfg.lam * cfg.lambda_unit if critic is not None else 0.0
    shape = problem.shape
    trace: list[float] = []
    gamma_log: list[dict] = []

    if x0 is not None:
        x = np.asarray(x0, dtype=np.float64).ravel().copy()
    elif lam > 0 and cfg.init == "ml":
        ml_cfg = ReconConfig(**{**asdict(cfg), "lam": 0.0, "init": "constant"})
        x = reconstruct(mesh, meas, None, ml_cfg, problem=problem, report_rank=False).x_hat.ravel()
    else:
        x = np.full(mesh.n_nodes, cfg.init_value)
    x = np.maximum(x, cfg.positivity_floor)

    halved_any, converged = False, False
    for outer in range(cfg.outer_iters):
        gamma = problem.gamma(x)
        data = Whitened.build(problem, gamma)
        L = power_iteration(data.A, cfg.power_iters)
        data.lipschitz = L
        if cfg.data_normalization == "lipschitz":
            data.scale = 1.0 / L
        if cfg.epsilon == "auto":
            eps = 0.9 / (data.scale * L)
        else:
            eps = float(cfg.epsilon)
        x_prev = x.copy()
        x, _, halved = _run_inner(x, data, eps, cfg, critic, lam, shape, trace)
        halved_any |= halved
        change = float(np.linalg.norm(x - x_prev) / np.linalg.norm(x_prev))
        gamma_log.append({"outer": outer, "lipschitz": L, "scale": data.scale, "epsilon": eps,
                          "ridge": gamma.ridge, "relative_change": change})
        log.debug("outer %d: L=%.4g eps=%.4g change=%.3g", outer, L, eps, change)
        if change < cfg.fixed_point_tol:
            converged = True
            break

    rank = problem.rank() if report_rank and mesh.n_nodes <= 4096 else None
    if rank is not None and rank < mesh.n_nodes:
        log.warning("design matrix is rank deficient: rank %d < %d unknowns", rank, mesh.n_nodes)
    return ReconResult(x_hat=x.reshape(shape), objective_trace=trace, gamma_log=gamma_log,
                       wall_time=time.perf_counter() - t0, rank=rank, converged=converged,
                       epsilon_halved=halved_any)


def write_result(out_dir, name: str, result: ReconResult, cfg: ReconConfig) -> None:
    out = Path(out_dir)
    write_egrid(out / f"{name}.egrid", result.x_hat)
    atomic_write_text(out / f"{name}.json", json.dumps(result.sidecar(cfg), indent=2))


def _reconstruct_item(args):
    name, mesh, meas, critic, cfg, x0 = args
    try:
        return name, reconstruct(mesh, meas, critic, cfg, x0=x0), None
    except NumericalAbort as exc:
        return name, None, exc
    except (DomainError, ArithmeticError, ValueError) as exc:
        return name, None, exc


def reconstruct_dataset(data_dir, critic: CriticNet | None, cfg: ReconConfig, out_dir,
                        jobs: int = 1, init_dir=None) -> tuple[list[str], dict[str, Exception]]:
    """Reconstruct every item of a dataset directory into ``out_dir``.

    ``init_dir`` optionally supplies warm starts (``NNNN.egrid`` per item),
    e.g. the ML images, so they are not recomputed. Failures are logged and
    skipped; the caller decides the exit status from the returned dict.
    """
    from .phantom import load_dataset, mesh_from_manifest
    from .metrics_io import read_egrid

    mesh = mesh_from_manifest(data_dir)
    tasks = []
    for name, _, meas in load_dataset(data_dir, verify=True):
        x0 = None
        if init_dir is not None and (Path(init_dir) / f"{name}.egrid").exists():
            x0 = read_egrid(Path(init_dir) / f"{name}.egrid")[:, :, 0].astype(np.float64)
        tasks.append((name, mesh, meas, critic, cfg, x0))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_reconstruct_item, tasks))
    else:
        results = [_reconstruct_item(t) for t in tasks]
    done, failed = [], {}
    for name, result, exc in results:
        if exc is not None:
            log.error("item %s failed: %s", name, exc)
            failed[name] = exc
            continue
        write_result(out_dir, name, result, cfg)
        done.append(name)
    return done, failed


def make_noisy_training_images(data_dir, cfg: ReconConfig, out_dir, jobs: int = 1):
    """ML reconstructions (lambda forced to 0) of every dataset item."""
    ml_cfg = ReconConfig(**{**asdict(cfg), "lam": 0.0})
    return reconstruct_dataset(data_dir, None, ml_cfg, out_dir, jobs=jobs)
