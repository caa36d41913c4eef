import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elastinv.critic import CriticNet
from elastinv.errors import DomainError, InvalidInputError, NumericalAbort
from elastinv.fem import LoadSpec, MeshModel, apply_load
from elastinv.noise import GammaOperator, MeasurementSet, NoiseSpec, build_gamma, sample_measurements
from elastinv.phantom import PhantomSpec, generate_phantom, make_dataset, simulate_item
from elastinv.reconstruct import (Problem, _run_inner, ReconConfig, Whitened, gd_step, make_noisy_training_images,
                                  objective, objective_gradient, power_iteration, reconstruct,
                                  reconstruct_dataset, write_result)
from elastinv.metrics_io import evaluate, read_egrid

SMALL = ((4, 3, 1, 1), (4, 3, 2, 1))


def noiseless(mesh, seed=0):
    x = generate_phantom(PhantomSpec(rows=mesh.rows, cols=mesh.cols, seed=seed))
    return x, sample_measurements(mesh, x, apply_load(mesh, 1e-3), NoiseSpec())


def noisy(mesh, seed=0, snr=35.0):
    x = generate_phantom(PhantomSpec(rows=mesh.rows, cols=mesh.cols, seed=seed))
    return x, simulate_item(mesh, x, LoadSpec(), snr, 40.0, seed)


def test_config_validation():
    for kwargs in (dict(epsilon=-1.0), dict(gd_steps=0), dict(lam=-1.0), dict(init="zeros"),
                   dict(data_normalization="max"), dict(positivity_floor=0.0)):
        with pytest.raises(InvalidInputError):
            ReconConfig(**kwargs)


def test_defaults():
    cfg = ReconConfig()
    assert (cfg.lam, cfg.epsilon, cfg.gd_steps, cfg.outer_iters) == (10.0, 0.7, 100, 3)


def test_scalar_step_by_hand():
    # one unknown: J = 1/2 (f - d x)^2, x' = x + eps d (f - d x)
    data = Whitened(A=np.array([[2.0]]), b=np.array([3.0]))
    x = gd_step(np.array([0.5]), data, 0.1)
    assert x[0] == pytest.approx(0.5 + 0.1 * 2 * (3 - 1.0))
    np.testing.assert_array_equal(gd_step(np.array([0.5]), data, 0.0), [0.5])
    assert gd_step(np.array([0.5]), data, 10.0)[0] == pytest.approx(0.5 + 10 * 2 * 2)
    assert gd_step(np.array([0.5]), Whitened(A=np.array([[2.0]]), b=np.array([-3.0])), 10.0)[0] == 1e-6


def test_power_iteration_matches_svd(rng):
    A = rng.standard_normal((30, 12))
    assert power_iteration(A, 2000, 1e-14) == pytest.approx(np.linalg.norm(A, 2) ** 2, rel=1e-8)


def test_objective_reductions(rng):
    mesh = MeshModel(4, 4)
    x, meas = noiseless(mesh)
    p = Problem(mesh, meas)
    eye = GammaOperator.identity(mesh.free_dofs.size)
    assert objective(x, p, eye) == pytest.approx(0.0, abs=1e-30)
    y = x * rng.uniform(0.8, 1.2, x.shape)
    r = p.f - p.D @ y.ravel()
    assert objective(y, p, eye) == pytest.approx(0.5 * r @ r, rel=1e-12)
    with pytest.raises(DomainError):
        objective(-y, p, eye)


def fd_gradient(fun, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("size, layers", [(4, SMALL), (16, None)])
def test_full_gradient_finite_difference(size, layers):
    mesh = MeshModel(size, size)
    x, meas = noisy(mesh, seed=2)
    p = Problem(mesh, meas)
    gamma = build_gamma(mesh, x, meas.noise)
    kwargs = {} if layers is None else {"conv_layers": layers, "hidden": 8}
    critic = CriticNet((size, size), seed=1, **kwargs)
    y = x.ravel() * 1.1
    scale = 1.0 / power_iteration(gamma.whiten(p.D))
    fun = lambda v: objective(v, p, gamma, critic, 0.3, scale)
    g = objective_gradient(y, p, gamma, critic, 0.3, scale)
    num = fd_gradient(fun, y, 1e-6)
    assert np.linalg.norm(g - num) <= 1e-4 * np.linalg.norm(num)


def test_matches_projected_landweber_oracle():
    mesh = MeshModel(6, 6)
    x, meas = noiseless(mesh, seed=4)
    D = Problem(mesh, meas).D
    f = meas.f[mesh.free_dofs]
    for norm, eps in (("none", 0.5 / np.linalg.norm(D, 2) ** 2), ("lipschitz", 0.7)):
        cfg = ReconConfig(lam=0, epsilon=eps, gd_steps=25, outer_iters=1, data_normalization=norm,
                          power_iters=5000)
        res = reconstruct(mesh, meas, None, cfg)
        step = eps if norm == "none" else eps / np.linalg.norm(D, 2) ** 2
        y = np.full(36, 0.125)
        for _ in range(25):
            y = np.maximum(y - step * D.T @ (D @ y - f), 1e-6)
        np.testing.assert_allclose(res.x_hat.ravel(), y, rtol=1e-10, atol=1e-14)


def test_exact_recovery_zero_noise():
    mesh = MeshModel(8, 8)
    x, meas = noiseless(mesh, seed=1)
    res = reconstruct(mesh, meas, None, ReconConfig(lam=0, epsilon="auto", gd_steps=20000, outer_iters=2))
    assert res.rank == 64
    assert evaluate(res.x_hat, x).rel_l2 <= 1e-3
    assert np.all(np.diff(res.objective_trace) <= 0)
    assert res.converged


@given(seed=st.integers(0, 1000))
def test_monotone_and_positive_with_auto_step(seed):
    mesh = MeshModel(6, 6)
    x, meas = noisy(mesh, seed=seed)
    res = reconstruct(mesh, meas, None, ReconConfig(lam=0, epsilon="auto", gd_steps=30, outer_iters=1),
                      report_rank=False)
    assert np.all(np.diff(res.objective_trace) <= 1e-12 * abs(res.objective_trace[0]))
    assert res.x_hat.min() >= 1e-6


def test_regularized_needs_critic():
    mesh = MeshModel(4, 4)
    _, meas = noiseless(mesh)
    with pytest.raises(InvalidInputError):
        reconstruct(mesh, meas, None, ReconConfig(lam=1.0))


def unstable_mode(eps):
    # A^T A has eigenvalue 2 on (1, -1); a step eps > 1 makes that mode grow by |1 - 2 eps|
    data = Whitened(A=np.array([[1.0, -1.0]]), b=np.array([0.0]))
    x0 = np.array([1000.0, 1000.0]) + 1e-12 * np.array([1.0, -1.0])
    return data, x0


def test_divergence_halves_step_once():
    data, x0 = unstable_mode(1.5)
    cfg = ReconConfig(lam=0, gd_steps=200)
    x, eps, halved = _run_inner(x0, data, 1.5, cfg, None, 0.0, (1, 2), [])
    assert halved and eps == 0.75
    assert abs(x[0] - x[1]) < 1e-9


def test_repeated_divergence_aborts():
    data, x0 = unstable_mode(3.0)
    with pytest.raises(NumericalAbort):
        _run_inner(x0, data, 3.0, ReconConfig(lam=0, gd_steps=200), None, 0.0, (1, 2), [])


def test_measurement_size_mismatch():
    mesh = MeshModel(4, 4)
    bad = MeasurementSet(f=np.zeros(10), u_m=np.zeros(32), noise=NoiseSpec())
    with pytest.raises(InvalidInputError):
        Problem(mesh, bad)


def test_regularized_run_and_sidecar(tmp_path):
    mesh = MeshModel(8, 8)
    x, meas = noisy(mesh)
    critic = CriticNet((8, 8), seed=0, conv_layers=SMALL, hidden=8)
    cfg = ReconConfig(lam=0.01, gd_steps=5, outer_iters=2)
    res = reconstruct(mesh, meas, critic, cfg)
    assert len(res.objective_trace) == 10 and len(res.gamma_log) == 2
    write_result(tmp_path, "0000", res, cfg)
    side = json.loads((tmp_path / "0000.json").read_text())
    assert side["config"]["lam"] == 0.01 and side["design_matrix_rank"] == 64
    assert read_egrid(tmp_path / "0000.egrid").shape == (8, 8, 1)


def test_noisy_training_images(tmp_path):
    mesh = MeshModel(8, 8)
    spec = PhantomSpec(rows=8, cols=8, seed=3)
    make_dataset(spec, 2, mesh, snr_db=np.inf, force_snr_db=np.inf, out_dir=tmp_path / "clean")
    cfg = ReconConfig(lam=10.0, epsilon="auto", gd_steps=20000, outer_iters=1)
    done, failed = make_noisy_training_images(tmp_path / "clean", cfg, tmp_path / "ml")
    assert done == ["0000", "0001"] and not failed
    side = json.loads((tmp_path / "ml" / "0000.json").read_text())
    assert side["config"]["lam"] == 0.0
    for name in done:
        truth = read_egrid(tmp_path / "clean" / "truth" / f"{name}.egrid")
        assert evaluate(read_egrid(tmp_path / "ml" / f"{name}.egrid"), truth).rel_l2 <= 1e-3


def test_lower_snr_gives_worse_ml_images():
    mesh = MeshModel(8, 8)
    cfg = ReconConfig(lam=0, gd_steps=100, outer_iters=3)
    mse = {}
    for snr in (35.0, 50.0):
        items = make_dataset(PhantomSpec(rows=8, cols=8, seed=9), 20, mesh, snr_db=snr)
        mse[snr] = np.mean([evaluate(reconstruct(mesh, m, None, cfg, report_rank=False).x_hat, x).mse
                            for x, m in items])
    assert mse[35.0] > mse[50.0]


def test_dataset_reconstruction_is_deterministic(tmp_path):
    mesh = MeshModel(8, 8)
    make_dataset(PhantomSpec(rows=8, cols=8, seed=1), 2, mesh, out_dir=tmp_path / "d")
    cfg = ReconConfig(lam=0, gd_steps=10, outer_iters=1)
    reconstruct_dataset(tmp_path / "d", None, cfg, tmp_path / "a")
    reconstruct_dataset(tmp_path / "d", None, cfg, tmp_path / "b")
    for name in ("0000", "0001"):
        assert (tmp_path / "a" / f"{name}.egrid").read_bytes() == (tmp_path / "b" / f"{name}.egrid").read_bytes()
