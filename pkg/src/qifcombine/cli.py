"""Command-line interface.

Subcommands:

    fit       monolithic end-to-end run from a job config with CSV sources
    worker    one cohort's round-1 fit (or round-2 score pass) to a payload file
    combine   coordinator: integrate summary payloads, optionally fold in
              round-2 scores, write the report
    simulate  Monte Carlo study from a TOML design file
    test      homogeneity test comparing two report files with nested partitions

Exit codes: 0 success; 2 configuration error; 3 numerical failure;
4 non-convergence (partial output was written).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .combine import Partition
from .errors import (
    ConfigError,
    DegenerateFitError,
    InsufficientDataError,
    NestingError,
    PayloadError,
    QifError,
    SingularMatrixError,
)
from .inference import FitStatistic, nested_test
from .runtime import (
    JobConfig,
    coordinate,
    run_monolithic_config,
    scores_path,
    summary_path,
    worker_round1,
    worker_round2,
    write_broadcast,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_NONCONVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qifcombine",
        description="Quadratic inference function estimation with one-round combination",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="monolithic end-to-end run")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--mode", choices=("monolithic",), default=None,
                       help="override the config's mode")
    p_fit.add_argument("--second-round", action="store_true",
                       help="also compute the goodness-of-fit statistic")

    p_wrk = sub.add_parser("worker", help="one cohort's local pass")
    p_wrk.add_argument("--config", required=True)
    p_wrk.add_argument("--cohort", type=int, default=None,
                       help="cohort id (required if the config lists several)")
    p_wrk.add_argument("--round", type=int, choices=(1, 2), default=1)
    p_wrk.add_argument("--broadcast", default=None,
                       help="broadcast file from the coordinator (round 2)")
    p_wrk.add_argument("--out", required=True)

    p_cmb = sub.add_parser("combine", help="coordinator over summary payloads")
    p_cmb.add_argument("--config", required=True)
    p_cmb.add_argument("--summaries", nargs="*", default=[],
                       help="summary payload files (default: summary_k*.qifs in --out)")
    p_cmb.add_argument("--scores", nargs="*", default=None,
                       help="round-2 score payload files")
    p_cmb.add_argument("--second-round", action="store_true",
                       help="emit a broadcast file for the score round")
    p_cmb.add_argument("--out", required=True)

    p_sim = sub.add_parser("simulate", help="Monte Carlo study from a design file")
    p_sim.add_argument("--design", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--replications", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)

    p_tst = sub.add_parser("test", help="nested-partition homogeneity test")
    p_tst.add_argument("--fine", required=True, help="report.json of the finer partition")
    p_tst.add_argument("--coarse", required=True, help="report.json of the coarser partition")
    p_tst.add_argument("--out", default=None)
    return parser


def _cmd_fit(args) -> int:
    config = JobConfig.from_file(args.config)
    if args.mode:
        config = replace(config, mode=args.mode)
    if config.mode != "monolithic":
        raise ConfigError(
            f"'fit' runs monolithically but the config declares mode {config.mode!r}; "
            "pass --mode monolithic to override"
        )
    if args.second_round:
        config = replace(config, second_round=True)
    summaries, result, stat = run_monolithic_config(config)
    from .report import write_report

    write_report(args.out, result, stat, summaries)
    bad = result.diagnostics.get("non_converged_sources", [])
    if bad:
        print(f"warning: sources {bad} did not converge; see report diagnostics",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_OK


def _cmd_worker(args) -> int:
    config = JobConfig.from_file(args.config)
    cohorts = config.cohorts()
    cohort = args.cohort
    if cohort is None:
        if len(cohorts) != 1:
            raise ConfigError(
                f"config lists cohorts {cohorts}; pass --cohort to pick one"
            )
        cohort = cohorts[0]
    elif cohort not in cohorts:
        raise ConfigError(f"cohort {cohort} not in config (has {cohorts})")
    if args.round == 1:
        path, converged = worker_round1(config, cohort, args.out)
        print(f"summary written to {path}")
        return EXIT_OK if converged else EXIT_NONCONVERGED
    if not args.broadcast:
        raise ConfigError("round 2 requires --broadcast from the coordinator")
    path = worker_round2(config, cohort, args.broadcast, args.out)
    print(f"scores written to {path}")
    return EXIT_OK


def _cmd_combine(args) -> int:
    config = JobConfig.from_file(args.config)
    out = Path(args.out)
    summary_files = list(args.summaries)
    if not summary_files:
        summary_files = sorted(str(p) for p in out.glob("summary_k*.qifs"))
    if not summary_files:
        raise ConfigError(
            "no summary payloads found; expected files for cohorts "
            f"{config.cohorts()} (summary_k<K>.qifs under {out} or --summaries)"
        )
    score_files = args.scores
    if score_files is None and (args.second_round or config.second_round):
        found = sorted(str(p) for p in out.glob("scores_k*.qifs"))
        score_files = found or None
    summaries, result, stat = coordinate(config, summary_files, score_files)
    from .report import write_report

    write_report(out, result, stat, summaries)
    if (args.second_round or config.second_round) and stat is None:
        path = write_broadcast(out, result)
        print(
            f"broadcast written to {path}; run workers with --round 2 and re-combine "
            "with --scores to obtain the fit statistic"
        )
    bad = result.diagnostics.get("non_converged_sources", [])
    if bad:
        print(f"warning: sources {bad} did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .simulate import load_design, run_study

    design, study_config, replications = load_design(args.design)
    if args.replications is not None:
        replications = args.replications
    if args.seed is not None:
        design = replace(design, seed=args.seed)
    metrics = run_study(design, replications, study_config)
    from .report import write_metrics

    write_metrics(args.out, metrics)
    for row in metrics.rows():
        print("group {group} {coefficient:>9}: RMSE={RMSE:.4g} ESE={ESE:.4g} "
              "ASE={ASE:.4g} B={B:+.4g} CI={CI:.3f} L={L:.4g} ERR={ERR:.3f}".format(**row))
    if metrics.n_failed:
        print(f"warning: {metrics.n_failed} replications excluded (non-convergence)",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _statistic_from_report(path) -> FitStatistic:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"report not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    fs = doc.get("fit_statistic")
    if fs is None:
        raise ConfigError(f"{path}: report carries no fit statistic (run with a second round)")
    partition = Partition(
        groups=tuple(tuple((int(j), int(k)) for j, k in g) for g in doc["partition"]),
        J=int(doc["J"]), K=int(doc["K"]),
    )
    return FitStatistic(
        q_n=float(fs["q_n"]),
        df=int(fs["df"]),
        p_value=float("nan") if fs["p_value"] is None else float(fs["p_value"]),
        bic=float(fs["bic"]),
        N=int(doc["N"]),
        partition=partition,
        p=int(doc["p"]),
        model_key=tuple(tuple(entry) for entry in doc.get("model_key", [])),
    )


def _cmd_test(args) -> int:
    from .inference import compare_bic

    fine = _statistic_from_report(args.fine)
    coarse = _statistic_from_report(args.coarse)
    res = nested_test(fine, coarse)
    pv = "nan" if math.isnan(res.p_value) else f"{res.p_value:.6g}"
    print(f"Q = {res.statistic:.6g}  df = {res.df}  p = {pv}"
          + ("  (negative statistic clamped to 0)" if res.clamped else ""))
    ranked = compare_bic([(fine.partition, fine), (coarse.partition, coarse)])
    best = "fine" if ranked[0][1] is fine else "coarse"
    print(f"criterion: fine {fine.bic:.6g} vs coarse {coarse.bic:.6g} "
          f"-> {best} partition preferred")
    if args.out:
        from .report import write_nested_test

        write_nested_test(args.out, fine, coarse, res)
        print(f"test record written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fit": _cmd_fit,
        "worker": _cmd_worker,
        "combine": _cmd_combine,
        "simulate": _cmd_simulate,
        "test": _cmd_test,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, PayloadError, NestingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularMatrixError, InsufficientDataError, DegenerateFitError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except QifError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
