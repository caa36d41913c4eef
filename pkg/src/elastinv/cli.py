"""Command line entry point: ``elastinv <stage> --config run.json``.

Stages share one output tree::

    <out>/data/{train,test}/      phantoms, measurements, manifest.json
    <out>/noisy/{train,test}/     ML reconstructions (critic training input)
    <out>/critic/                 critic.eckp, loss_trace.csv
    <out>/recon/                  regularized reconstructions + JSON sidecars
    <out>/eval/                   metrics.csv, summary.json, cross-section CSVs

Exit codes: 0 success, 1 usage or config error, 2 partial failure,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .critic import CriticNet, train_critic
from .errors import ElastInvError, InvalidInputError, NumericalAbort
from .metrics_io import (aggregate, atomic_write_text, cross_section_csv, evaluate, read_egrid)
from .phantom import make_dataset
from .reconstruct import make_noisy_training_images, reconstruct_dataset
from .seeding import derive_seed

log = logging.getLogger("elastinv")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_NUMERICAL = 0, 1, 2, 3
SPLITS = ("train", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    atomic_write_text(out_dir / "config.json", cfg.dumps() + "\n")


def _status(failed: dict) -> int:
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_gen_data(cfg: RunConfig, out: Path, jobs: int) -> int:
    mesh = cfg.mesh.build()
    n_test = cfg.phantom.held_out
    n_train = cfg.phantom.count - n_test
    if n_train < 1 or n_test < 0:
        raise ConfigError("phantom.held_out must be smaller than phantom.count")
    skipped = 0
    for split, count in zip(SPLITS, (n_train, n_test)):
        if count == 0:
            continue
        spec = cfg.phantom.spec(cfg.mesh, derive_seed(cfg.seed, f"data/{split}"))
        items = make_dataset(spec, count, mesh, cfg.load, cfg.noise.snr_db, cfg.noise.force_snr_db,
                             out_dir=out / "data" / split, skip_failures=True)
        skipped += sum(item is None for item in items)
        _echo_config(cfg, out / "data" / split)
    log.info("gen-data: %d train, %d test, %d skipped", n_train, n_test, skipped)
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_make_noisy(cfg: RunConfig, out: Path, jobs: int) -> int:
    failed = {}
    for split in SPLITS:
        data = out / "data" / split
        if not (data / "manifest.json").exists():
            continue
        dest = out / "noisy" / split
        done, bad = make_noisy_training_images(data, cfg.recon, dest, jobs=jobs)
        failed.update({f"{split}/{k}": v for k, v in bad.items()})
        _echo_config(cfg, dest)
        log.info("make-noisy %s: %d written, %d failed", split, len(done), len(bad))
    return _status(failed)


def cmd_train(cfg: RunConfig, out: Path, jobs: int) -> int:
    dest = out / "critic"
    _, trace = train_critic(out / "data" / "train" / "truth", out / "noisy" / "train", cfg.train, dest)
    _echo_config(cfg, dest)
    log.info("train: %d steps, final gap %.4g", len(trace), trace[-1]["gap"] if trace else float("nan"))
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, out: Path, jobs: int, checkpoint: str | None = None,
                    split: str = "test") -> int:
    critic = None
    if cfg.recon.lam > 0:
        critic = CriticNet.load(checkpoint or out / "critic" / "critic.eckp")
    # warm starts from the stored ML images avoid recomputing them
    init = out / "noisy" / split
    use_init = cfg.recon.init == "ml" and cfg.recon.lam > 0 and init.is_dir()
    dest = out / "recon"
    done, failed = reconstruct_dataset(out / "data" / split, critic, cfg.recon, dest, jobs=jobs,
                                       init_dir=init if use_init else None)
    _echo_config(cfg, dest)
    log.info("reconstruct: %d written, %d failed", len(done), len(failed))
    return _status(failed)


def evaluate_dirs(recon_dir, truth_dir, out_dir, baseline_dir=None, row: int | None = None) -> dict:
    """Score every ``NNNN.egrid`` in ``recon_dir`` against ``truth_dir``.

    With ``baseline_dir`` (e.g. the ML images) the summary also reports
    how often the reconstruction beats the baseline.
    """
    recon_dir, truth_dir, out_dir = Path(recon_dir), Path(truth_dir), Path(out_dir)
    names = sorted(p.stem for p in recon_dir.glob("*.egrid"))
    if not names:
        raise InvalidInputError(f"no reconstructions in {recon_dir}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["id", "rel_l2", "mse", "psnr", "contrast_ratio"]
    if baseline_dir is not None:
        header += ["baseline_rel_l2"]
    writer.writerow(header)
    reports, base_reports = [], []
    for name in names:
        x_hat = read_egrid(recon_dir / f"{name}.egrid")[:, :, 0].astype(np.float64)
        x_true = read_egrid(truth_dir / f"{name}.egrid")[:, :, 0].astype(np.float64)
        rep = evaluate(x_hat, x_true)
        reports.append(rep)
        d = rep.to_dict()
        line = [name, d["rel_l2"], d["mse"], d["psnr"], d["contrast_ratio"]]
        if baseline_dir is not None:
            base = read_egrid(Path(baseline_dir) / f"{name}.egrid")[:, :, 0].astype(np.float64)
            base_reports.append(evaluate(base, x_true))
            line.append(base_reports[-1].rel_l2)
        writer.writerow(line)
        r = x_true.shape[0] // 2 if row is None else row
        atomic_write_text(out_dir / "cross_sections" / f"{name}.csv", cross_section_csv(x_hat, r))
    atomic_write_text(out_dir / "metrics.csv", buf.getvalue())
    summary = {"count": len(reports), "aggregate": aggregate(reports)}
    if base_reports:
        wins = sum(a.rel_l2 < b.rel_l2 for a, b in zip(reports, base_reports))
        summary["baseline"] = {"aggregate": aggregate(base_reports), "wins": wins,
                               "win_fraction": wins / len(reports)}
    atomic_write_text(out_dir / "summary.json", json.dumps(summary, indent=2))
    return summary


def cmd_eval(cfg: RunConfig, out: Path, jobs: int, recon_dir=None, truth_dir=None,
             baseline_dir=None) -> int:
    recon_dir = Path(recon_dir or out / "recon")
    truth_dir = Path(truth_dir or out / "data" / "test" / "truth")
    if baseline_dir is None and (out / "noisy" / "test").is_dir():
        baseline_dir = out / "noisy" / "test"
    dest = out / "eval"
    summary = evaluate_dirs(recon_dir, truth_dir, dest, baseline_dir)
    _echo_config(cfg, dest)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_run(cfg: RunConfig, out: Path, jobs: int) -> int:
    worst = EXIT_OK
    for stage in (cmd_gen_data, cmd_make_noisy, cmd_train, cmd_reconstruct, cmd_eval):
        worst = max(worst, stage(cfg, out, jobs))
    return worst


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults if omitted)")
    common.add_argument("--output", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-item stages")

    parser = _Parser(prog="elastinv", description="Adversarially regularized elastography reconstruction")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="simulate phantoms and measurements")
    sub.add_parser("make-noisy", parents=[common], help="ML reconstructions for critic training")
    sub.add_parser("train", parents=[common], help="train the critic")
    p = sub.add_parser("reconstruct", parents=[common], help="regularized reconstruction of the test split")
    p.add_argument("--checkpoint", help="critic checkpoint (default <out>/critic/critic.eckp)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p = sub.add_parser("eval", parents=[common], help="metrics and cross-sections")
    p.add_argument("--recon-dir")
    p.add_argument("--truth-dir")
    p.add_argument("--baseline-dir", help="images to compare against (default <out>/noisy/test)")
    sub.add_parser("run", parents=[common], help="all stages in order")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        changes["seed"] = args.seed
    if args.output is not None:
        changes["output_dir"] = args.output
    return dataclasses.replace(cfg, **changes)


def _setup_logging() -> None:
    level = os.environ.get("ELASTINV_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out = Path(cfg.output_dir)
        handlers = {"gen-data": cmd_gen_data, "make-noisy": cmd_make_noisy, "train": cmd_train,
                    "reconstruct": cmd_reconstruct, "eval": cmd_eval, "run": cmd_run}
        extra = {}
        if args.command == "reconstruct":
            extra = {"checkpoint": args.checkpoint, "split": args.split}
        elif args.command == "eval":
            extra = {"recon_dir": args.recon_dir, "truth_dir": args.truth_dir,
                     "baseline_dir": args.baseline_dir}
        return handlers[args.command](cfg, out, args.jobs, **extra)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (InvalidInputError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except ElastInvError as exc:
        log.error("%s", exc)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
