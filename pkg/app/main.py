#!/usr/bin/env python3
# -*- coding: utf-8 -*-
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from app.core.config import ExperimentConfig, load_config, with_overrides
from app.core.errors import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, exit_code_for
from app.core.logging import setup_logging
from app.engine.analysis import fuzz_lemma1
from app.harness.experiment import PLOT_CSV_FIELDS, run_experiment
from app.harness.selftest import run_selftest
from app.harness.sweep import AXES, SWEEP_CSV_FIELDS, parse_axis_values, sweep
from app.infra.checkpoints import save_checkpoint
from app.infra.client_pool import ClientPool
from app.infra.results_repo import ResultsRepository

log = logging.getLogger("main")


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "runtime.out_dir": args.out,
        "runtime.workers": args.workers,
        "algorithm.method": getattr(args, "method", None),
        "algorithm.grouping": getattr(args, "grouping", None),
        "algorithm.fusion": getattr(args, "fusion", None),
        "algorithm.beta": getattr(args, "beta", None),
    }
    cfg = load_config(args.config, overrides)
    stages = getattr(args, "stages", None)
    if stages is not None:
        # --stages replaces any capacity rule from the file
        cfg = with_overrides(cfg, {
            "schedule.stages": stages,
            "schedule.capacities": None,
            "schedule.initial_capacity": None,
            "schedule.growth": None,
        })
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = run_experiment(cfg)
    repo = ResultsRepository(cfg.runtime.out_dir)
    repo.save_run(result.metrics.records, PLOT_CSV_FIELDS, result.plot, result.summary)
    save_checkpoint(result.model, repo.path("model.json"))
    s = result.summary
    log.info(
        "Done: %d rounds, final loss %.6g, test loss %s, %d bytes, %d compute units",
        s["total_rounds"], s["final_loss"], s["final_test_loss"], s["total_bytes"], s["total_compute_units"],
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    values = parse_axis_values(args.axis, args.values)
    rows = sweep(cfg, args.axis, values, ClientPool(cfg.runtime.workers))
    ResultsRepository(cfg.runtime.out_dir).save_sweep(SWEEP_CSV_FIELDS, rows)
    return EXIT_OK


def cmd_verify_lemma(args: argparse.Namespace) -> int:
    cfg = _config(args)
    betas = [args.beta] if args.beta is not None else [0.1, 0.15, 0.5]
    report = fuzz_lemma1(args.trials, betas=betas, seed=cfg.seed)
    ResultsRepository(cfg.runtime.out_dir).save_lemma(report)
    if report["violations"]:
        log.warning("Fusion-shift bound violated in %d checks", len(report["violations"]))
    return EXIT_OK


def cmd_self_test(args: argparse.Namespace) -> int:
    cfg = _config(args)
    results = run_selftest(full=args.full)
    ResultsRepository(cfg.runtime.out_dir).write_json("selftest.json", [r.to_dict() for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("Self-test failed: %s", ", ".join(failed))
        return EXIT_RUNTIME
    log.info("Self-test passed: %d checks", len(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="devft", description="Staged federated LoRA fine-tuning simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON or YAML experiment config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--workers", type=int, default=None, help="client worker threads")
    algo = argparse.ArgumentParser(add_help=False)
    algo.add_argument("--method", choices=["devft", "end2end"], default=None)
    algo.add_argument("--grouping", choices=["spectral", "random", "even"], default=None)
    algo.add_argument("--fusion", choices=["dblf", "sum", "r_one"], default=None)
    algo.add_argument("--beta", type=float, default=None)
    algo.add_argument("--stages", type=int, default=None)

    sub = p.add_subparsers(dest="cmd", required=True)
    pr = sub.add_parser("run", parents=[common, algo], help="run one experiment")
    pr.set_defaults(func=cmd_run)

    ps = sub.add_parser("sweep", parents=[common, algo], help="one-axis parameter sweep")
    ps.add_argument("--axis", choices=list(AXES), required=True)
    ps.add_argument("--values", type=str, required=True, help="comma-separated values, e.g. 2,4,8")
    ps.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("verify-lemma", parents=[common], help="fuzz the fusion-shift bound")
    pl.add_argument("--trials", type=int, default=100)
    pl.add_argument("--beta", type=float, default=None)
    pl.set_defaults(func=cmd_verify_lemma)

    pt = sub.add_parser("self-test", parents=[common], help="run the acceptance checks")
    pt.add_argument("--full", action="store_true", help="include the 10-seed method comparison")
    pt.set_defaults(func=cmd_self_test)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return EXIT_OK if not e.code else EXIT_VALIDATION
    load_dotenv()
    setup_logging()
    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_RUNTIME:
            log.exception("Command %s failed: %s", args.cmd, e)
        else:
            log.error("Invalid configuration: %s", e)
        return code


if __name__ == "__main__":
    sys.exit(main())
