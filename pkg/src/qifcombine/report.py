"""Report rendering: JSON, delimited tables, and figures.

Every report path writes machine-readable output (a versioned JSON document
plus CSV tables) and matplotlib figures next to them: a coefficient forest
plot for integrated fits and a per-source fit diagnostic; study reports get
a metrics figure comparing empirical and model-based standard errors and
coverage.  Floats serialize through Python's repr, which round-trips
float64 exactly.  PNG metadata is stripped so identical inputs yield
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib
import numpy as np
from scipy import stats

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .combine import IntegratedResult  # noqa: E402
from .inference import FitStatistic, NestedTestResult  # noqa: E402
from .simulate import MetricsReport  # noqa: E402

REPORT_VERSION = 1

_PNG_META = {"Software": None}  # drop the default tag for reproducible bytes


def _coef_label(i: int) -> str:
    return "intercept" if i == 0 else f"x{i}"


def report_dict(result: IntegratedResult, stat: FitStatistic | None = None,
                summaries=None) -> dict:
    """Assemble the versioned report document."""
    p = result.p
    groups = []
    for g, members in enumerate(result.partition.groups):
        theta = result.group_estimate(g)
        ase = np.sqrt(np.diag(result.group_covariance(g)))
        z = np.divide(theta, ase, out=np.full_like(theta, np.nan), where=ase > 0)
        pvals = 2.0 * stats.norm.sf(np.abs(z))
        groups.append({
            "group": g + 1,
            "sources": [list(jk) for jk in members],
            "coefficients": [_coef_label(i) for i in range(p)],
            "estimate": theta.tolist(),
            "ase": ase.tolist(),
            "wald_z": z.tolist(),
            "p_value": pvals.tolist(),
        })
    doc = {
        "format_version": REPORT_VERSION,
        "N": result.N,
        "p": p,
        "partition": [list(map(list, g)) for g in result.partition.groups],
        "J": result.partition.J,
        "K": result.partition.K,
        "pca_rank": result.pca_rank,
        "groups": groups,
        "covariance": result.covariance.tolist(),
        "diagnostics": _jsonable(result.diagnostics),
        "model_key": [list(entry) for entry in result.model_key],
    }
    if stat is not None:
        doc["fit_statistic"] = {
            "q_n": stat.q_n,
            "df": stat.df,
            "p_value": None if math.isnan(stat.p_value) else stat.p_value,
            "bic": stat.bic,
        }
    if summaries is not None:
        per_source = []
        for cs in sorted(summaries, key=lambda s: s.cohort_id):
            for j in cs.block_order:
                f = cs.fits[j]
                s = f.S_hat.shape[0] // p if p else 0
                df = f.S_hat.shape[0] - p
                per_source.append({
                    "j": j,
                    "k": cs.cohort_id,
                    "n": cs.n,
                    "link": f.link_kind,
                    "basis": f.basis_family,
                    "s": s,
                    "theta": f.theta_hat.tolist(),
                    "q": f.q_value,
                    "df": df,
                    "q_p_value": float(stats.chi2.sf(f.q_value, df)) if df > 0 else None,
                    "converged": f.converged,
                    "iterations": f.iterations,
                    "ridged": f.ridged,
                })
        doc["per_source"] = per_source
    return doc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_coefficients_csv(path, doc: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "coefficient", "estimate", "ase", "wald_z", "p_value"])
        for grp in doc["groups"]:
            for i, name in enumerate(grp["coefficients"]):
                writer.writerow([
                    grp["group"], name,
                    f"{grp['estimate'][i]:.17g}", f"{grp['ase'][i]:.17g}",
                    f"{grp['wald_z'][i]:.17g}", f"{grp['p_value'][i]:.17g}",
                ])


def forest_figure(doc: dict, path) -> None:
    """Coefficient forest plot: estimate with 95% intervals, by group."""
    labels, est, lo, hi = [], [], [], []
    for grp in doc["groups"]:
        for i, name in enumerate(grp["coefficients"]):
            labels.append(f"g{grp['group']}:{name}")
            e, a = grp["estimate"][i], grp["ase"][i]
            est.append(e)
            lo.append(e - 1.959963984540054 * a)
            hi.append(e + 1.959963984540054 * a)
    ypos = np.arange(len(labels))[::-1]
    fig, ax = plt.subplots(figsize=(6.0, 0.4 * len(labels) + 1.2))
    ax.hlines(ypos, lo, hi, color="steelblue", lw=2)
    ax.plot(est, ypos, "o", color="navy", ms=4)
    ax.axvline(0.0, color="grey", lw=0.8, ls=":")
    ax.set_yticks(ypos)
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("estimate (95% interval)")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def source_fit_figure(doc: dict, path) -> None:
    """Per-source over-identification values against their reference df."""
    rows = doc.get("per_source", [])
    if not rows:
        return
    labels = [f"j{r['j']}k{r['k']}" for r in rows]
    qs = [r["q"] for r in rows]
    cut = [stats.chi2.ppf(0.95, r["df"]) if r["df"] > 0 else 0.0 for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(rows) + 1.5), 3.2))
    ax.bar(x, qs, color="steelblue", label="Q value")
    ax.step(np.concatenate([x - 0.5, [x[-1] + 0.5]]), np.concatenate([cut, [cut[-1]]]),
            where="post", color="firebrick", lw=1.0, label="chi-sq 95% cutoff")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8, rotation=45)
    ax.set_ylabel("per-source Q")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def write_per_source_csv(path, doc: dict) -> None:
    """Plot-ready per-source fit table (Q against its chi-squared reference)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "k", "n", "link", "basis", "s", "q", "df",
                         "q_p_value", "converged", "iterations", "ridged"])
        for r in doc.get("per_source", []):
            writer.writerow([
                r["j"], r["k"], r["n"], r["link"], r["basis"], r["s"],
                f"{r['q']:.17g}", r["df"],
                "" if r["q_p_value"] is None else f"{r['q_p_value']:.17g}",
                r["converged"], r["iterations"], r["ridged"],
            ])


def write_report(out_dir, result: IntegratedResult, stat: FitStatistic | None = None,
                 summaries=None) -> dict:
    """Write report.json, delimited tables, and figures into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report_dict(result, stat, summaries)
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=1, allow_nan=True)
    write_coefficients_csv(out / "coefficients.csv", doc)
    forest_figure(doc, out / "forest.png")
    if "per_source" in doc:
        write_per_source_csv(out / "per_source.csv", doc)
        source_fit_figure(doc, out / "source_fit.png")
    return doc


def write_metrics(out_dir, metrics: MetricsReport, name: str = "metrics") -> None:
    """Write a study's metrics as CSV, JSON, and a summary figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = metrics.rows()
    with open(out / f"{name}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MetricsReport.COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v)
                             for k, v in row.items()})
    with open(out / f"{name}.json", "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=1)

    labels = [f"g{r['group']}:{r['coefficient']}" for r in rows]
    x = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(4.0, 0.55 * len(rows) + 1.5), 5.0),
                                   sharex=True)
    width = 0.38
    ax1.bar(x - width / 2, [r["ESE"] for r in rows], width, label="ESE", color="steelblue")
    ax1.bar(x + width / 2, [r["ASE"] for r in rows], width, label="ASE", color="darkorange")
    ax1.set_ylabel("standard error")
    ax1.legend(fontsize=8)
    ax2.bar(x, [r["CI"] for r in rows], 0.5, color="seagreen")
    ax2.axhline(0.95, color="firebrick", lw=0.9, ls="--")
    ax2.set_ylim(0.0, 1.05)
    ax2.set_ylabel("95% CI coverage")
    ax2.set_xticks(x)
    ax2.set_xticklabels(labels, fontsize=8, rotation=45)
    fig.tight_layout()
    fig.savefig(out / f"{name}.png", metadata=_PNG_META)
    plt.close(fig)


def write_nested_test(out_path, fine: FitStatistic, coarse: FitStatistic,
                      test: NestedTestResult) -> dict:
    from .inference import compare_bic

    ranked = compare_bic([(fine.partition, fine), (coarse.partition, coarse)])
    doc = {
        "format_version": REPORT_VERSION,
        "statistic": test.statistic,
        "df": test.df,
        "p_value": None if math.isnan(test.p_value) else test.p_value,
        "clamped": test.clamped,
        "fine": {"G": fine.partition.G, "q_n": fine.q_n, "df": fine.df, "bic": fine.bic},
        "coarse": {"G": coarse.partition.G, "q_n": coarse.q_n, "df": coarse.df,
                   "bic": coarse.bic},
        "bic_ranking": ["fine" if stat is fine else "coarse" for _, stat in ranked],
    }
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return doc
