"""Worker/coordinator execution and the monolithic pipeline.

Estimation is a single communication round: each worker fits every block of
its cohort locally, assembles the within-cohort score covariance, and ships
one summary file to the coordinator, which combines them in closed form.
The optional goodness-of-fit statistic adds exactly one more round: the
coordinator broadcasts the integrated estimate, workers re-evaluate their
mean scores there, and the coordinator forms the statistic from those score
vectors and the round-1 weight.  No configuration triggers further rounds.

Worker payloads never contain outcome or covariate rows; all blocks of a
cohort must live on one worker because the cross-block covariance needs
per-participant products across blocks.

The number of threads used for within-worker block fits comes from the
``QIF_THREADS`` environment variable (default 1); results are collected by
block index, so the thread count never changes any output.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .combine import (
    CohortSummary,
    IntegrateOptions,
    IntegratedResult,
    Partition,
    build_cohort_summary,
    integrate,
)
from .dataio import read_source_csv
from .errors import ConfigError
from .inference import FitStatistic, q_statistic
from .serialize import read_scores, read_summary, write_scores, write_summary
from .source import SolverControl, SourceData, extended_score, fit_source

CONFIG_VERSION = 1
BROADCAST_VERSION = 1

MODES = ("monolithic", "worker", "coordinator")


@dataclass
class SourceSpec:
    j: int
    k: int
    path: str
    link: str
    basis: str


@dataclass
class JobConfig:
    """Parsed job configuration shared by all CLI modes."""

    mode: str
    sources: list
    partition: Partition
    solver: SolverControl = field(default_factory=SolverControl)
    options: IntegrateOptions = field(default_factory=IntegrateOptions)
    second_round: bool = False
    summary_format: str = "binary"

    @classmethod
    def from_file(cls, path) -> "JobConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
        return cls.from_dict(doc, base=Path(path).parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "JobConfig":
        if doc.get("format_version") != CONFIG_VERSION:
            raise ConfigError(
                f"config format_version must be {CONFIG_VERSION}, got {doc.get('format_version')}"
            )
        mode = doc.get("mode", "monolithic")
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        raw_sources = doc.get("sources")
        if not raw_sources:
            raise ConfigError("config lists no sources")
        sources = []
        for item in raw_sources:
            try:
                path = item["path"]
                if base is not None and not os.path.isabs(path):
                    path = str(base / path)
                sources.append(SourceSpec(
                    j=int(item["j"]), k=int(item["k"]), path=path,
                    link=item["link"], basis=item["basis"],
                ))
            except KeyError as exc:
                raise ConfigError(f"source entry missing field {exc}")
        J = max(s.j for s in sources)
        K = max(s.k for s in sources)
        partition = parse_partition(doc.get("partition", "pooled"), J, K)
        declared = {(s.j, s.k) for s in sources}
        needed = set(partition.sources())
        if needed - declared:
            raise ConfigError(
                f"partition references undeclared sources: {sorted(needed - declared)}"
            )
        if len(declared) != len(sources):
            raise ConfigError("duplicate (j, k) source entries")
        solver = SolverControl(**doc.get("solver", {}))
        pca = doc.get("pca", {})
        options = IntegrateOptions(
            pca=bool(pca.get("enabled", False)),
            pca_threshold=float(pca.get("threshold", 1e-10)),
        )
        fmt = doc.get("summary_format", "binary")
        if fmt not in ("binary", "json"):
            raise ConfigError("summary_format must be 'binary' or 'json'")
        return cls(
            mode=mode,
            sources=sources,
            partition=partition,
            solver=solver,
            options=options,
            second_round=bool(doc.get("second_round", False)),
            summary_format=fmt,
        )

    def cohorts(self) -> list:
        return sorted({s.k for s in self.sources})

    def cohort_sources(self, k: int) -> list:
        return sorted((s for s in self.sources if s.k == k), key=lambda s: s.j)


def parse_partition(spec, J: int, K: int) -> Partition:
    if isinstance(spec, str):
        factories = {
            "pooled": Partition.pooled,
            "singletons": Partition.singletons,
            "by_block": Partition.by_block,
        }
        if spec not in factories:
            raise ConfigError(
                f"unknown partition shortcut {spec!r}; expected one of {sorted(factories)}"
            )
        return factories[spec](J, K)
    try:
        groups = tuple(tuple((int(j), int(k)) for j, k in group) for group in spec)
        return Partition(groups=groups, J=J, K=K)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid partition specification: {exc}")


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("QIF_THREADS", "1")))
    except ValueError:
        return 1


def fit_cohort(datasets: dict, solver: SolverControl) -> dict:
    """Fit every block of one cohort; deterministic regardless of threads."""
    threads = _thread_count()
    blocks = sorted(datasets)
    if threads == 1 or len(blocks) == 1:
        return {j: fit_source(datasets[j], ctrl=solver) for j in blocks}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {j: pool.submit(fit_source, datasets[j], None, solver) for j in blocks}
        return {j: futures[j].result() for j in blocks}


def load_cohort_data(config: JobConfig, k: int) -> dict:
    specs = config.cohort_sources(k)
    if not specs:
        raise ConfigError(f"config declares no sources for cohort {k}")
    return {s.j: read_source_csv(s.path, link=s.link, basis=s.basis) for s in specs}


def summary_path(out_dir, k: int) -> Path:
    return Path(out_dir) / f"summary_k{k}.qifs"


def scores_path(out_dir, k: int) -> Path:
    return Path(out_dir) / f"scores_k{k}.qifs"


def broadcast_path(out_dir) -> Path:
    return Path(out_dir) / "broadcast.json"


def worker_round1(config: JobConfig, cohort: int, out_dir) -> tuple[Path, bool]:
    """Fit one cohort and write its summary payload.

    Returns the payload path and whether every block converged (the payload
    is written either way, with flags; the coordinator decides).
    """
    datasets = load_cohort_data(config, cohort)
    fits = fit_cohort(datasets, config.solver)
    summary = build_cohort_summary(cohort, fits)
    out = summary_path(out_dir, cohort)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_summary(out, summary, mode=config.summary_format)
    return out, all(f.converged for f in fits.values())


def write_broadcast(out_dir, result: IntegratedResult) -> Path:
    path = broadcast_path(out_dir)
    doc = {
        "format_version": BROADCAST_VERSION,
        "p": result.p,
        "partition": [list(map(list, g)) for g in result.partition.groups],
        "J": result.partition.J,
        "K": result.partition.K,
        "theta": [result.group_estimate(g).tolist() for g in range(result.partition.G)],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def read_broadcast(path) -> tuple[Partition, np.ndarray]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"broadcast file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    if doc.get("format_version") != BROADCAST_VERSION:
        raise ConfigError("unsupported broadcast format version")
    partition = Partition(
        groups=tuple(tuple((int(j), int(k)) for j, k in g) for g in doc["partition"]),
        J=int(doc["J"]),
        K=int(doc["K"]),
    )
    theta = np.asarray(doc["theta"], dtype=float)
    return partition, theta


def worker_round2(config: JobConfig, cohort: int, broadcast, out_dir) -> Path:
    """Re-evaluate the cohort's mean scores at the broadcast estimates."""
    partition, theta = read_broadcast(broadcast)
    datasets = load_cohort_data(config, cohort)
    scores = {}
    n = None
    for j, data in datasets.items():
        g = partition.group_of(j, cohort)
        scores[(j, cohort)] = extended_score(data, theta[g])[0]
        n = data.n
    out = scores_path(out_dir, cohort)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, cohort, n, scores)
    return out


def read_summaries(paths, expected_cohorts) -> list:
    summaries = [read_summary(p) for p in paths]
    got = {s.cohort_id for s in summaries}
    missing = set(expected_cohorts) - got
    if missing:
        raise ConfigError(
            f"missing cohort summaries for cohorts {sorted(missing)}; "
            f"expected {sorted(expected_cohorts)}, received {sorted(got)}"
        )
    return summaries


def coordinate(config: JobConfig, summary_files, score_files=None):
    """Combine round-1 summaries; fold in round-2 scores when provided.

    Returns (summaries, result, stat) where stat is None unless score files
    covering every source were supplied.
    """
    summaries = read_summaries(summary_files, config.cohorts())
    result = integrate(summaries, config.partition, config.options)
    stat = None
    if score_files:
        score_means: dict = {}
        for path in score_files:
            _, _, scores = read_scores(path)
            score_means.update(scores)
        stat = q_statistic(score_means, summaries, result, config.options)
    return summaries, result, stat


def run_monolithic(
    data: dict,
    partition: Partition,
    solver: SolverControl | None = None,
    options: IntegrateOptions | None = None,
    second_round: bool = False,
):
    """End-to-end pipeline over in-memory data.

    ``data`` maps cohort k to {block j: SourceData}.  Returns
    (summaries, result, stat) with stat None unless ``second_round``.
    """
    solver = solver or SolverControl()
    options = options or IntegrateOptions()
    summaries = []
    for k in sorted(data):
        fits = fit_cohort(data[k], solver)
        summaries.append(build_cohort_summary(k, fits))
    result = integrate(summaries, partition, options)
    stat = None
    if second_round:
        score_means = {}
        for k in sorted(data):
            for j, d in data[k].items():
                g = partition.group_of(j, k)
                score_means[(j, k)] = extended_score(d, result.group_estimate(g))[0]
        stat = q_statistic(score_means, summaries, result, options)
    return summaries, result, stat


def run_monolithic_config(config: JobConfig):
    """Monolithic pipeline driven by a job config with CSV sources."""
    data: dict = {}
    for k in config.cohorts():
        data[k] = load_cohort_data(config, k)
    return run_monolithic(
        data,
        config.partition,
        solver=config.solver,
        options=config.options,
        second_round=config.second_round,
    )
