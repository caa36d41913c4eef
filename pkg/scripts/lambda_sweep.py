"""Sweep the regularization weight on a validation dataset.

Trains a critic on the first ``count - held_out`` items of a dataset drawn
from ``--dataset-seed`` and reports, for each lambda, the mean relative error
on the remaining items and how many beat the ML reconstruction. The dataset
seed should differ from the one used for final evaluation.

    python3 scripts/lambda_sweep.py --dataset-seed 1 --lambdas 0,5,10,15,25
"""
import argparse
import dataclasses
import time

import numpy as np

from elastinv.config import RunConfig
from elastinv.critic import train_critic_arrays
from elastinv.metrics_io import evaluate
from elastinv.phantom import make_dataset
from elastinv.reconstruct import Problem, ReconConfig, reconstruct


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset-seed", type=int, default=1)
    ap.add_argument("--lambdas", default="0,5,10,15,25")
    ap.add_argument("--init", choices=("constant", "ml"), default="constant")
    args = ap.parse_args()

    cfg = RunConfig()
    mesh = cfg.mesh.build()
    spec = cfg.phantom.spec(cfg.mesh, args.dataset_seed)
    items = make_dataset(spec, cfg.phantom.count, mesh, cfg.load, cfg.noise.snr_db, cfg.noise.force_snr_db)
    n_train = cfg.phantom.count - cfg.phantom.held_out
    t0 = time.perf_counter()

    ml_cfg = dataclasses.replace(cfg.recon, lam=0.0)
    problems = [Problem(mesh, m) for _, m in items]
    ml = [reconstruct(mesh, m, None, ml_cfg, problem=p, report_rank=False).x_hat
          for (_, m), p in zip(items, problems)]
    clean = np.array([x for x, _ in items[:n_train]])
    critic, trace = train_critic_arrays(clean, np.array(ml[:n_train]), cfg.train)
    print(f"ML + critic training: {time.perf_counter() - t0:.0f} s, final training gap {trace[-1]['gap']:.3f}")

    test = list(zip(items[n_train:], problems[n_train:], ml[n_train:]))
    base = np.array([evaluate(xm, x).rel_l2 for (x, _), _, xm in test])
    print(f"ML mean rel L2 {base.mean():.4f}")
    print("lambda  effective  mean_rel_l2  wins")
    for lam in (float(v) for v in args.lambdas.split(",")):
        rcfg = dataclasses.replace(cfg.recon, lam=lam, init=args.init)
        err = np.array([evaluate(reconstruct(mesh, m, critic, rcfg, problem=p, report_rank=False).x_hat, x).rel_l2
                        for (x, m), p, _ in test])
        print(f"{lam:6g}  {lam * rcfg.lambda_unit:9.2e}  {err.mean():11.4f}  {int(np.sum(err < base))}/{len(err)}",
              flush=True)


if __name__ == "__main__":
    main()
