"""Study metrics: selection quality, prediction AUC, traffic summaries.

Also contains the comparator every variable-selection study wants: per-site
univariable logistic regressions pooled by fixed-effects inverse-variance
meta-analysis, selecting the k covariates with the smallest Wald p-values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm, rankdata

log = logging.getLogger("fedboost.metrics")


class EmptyResultsError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Area under the ROC curve, exact Mann-Whitney form with tie handling.

    Equals P(score+ > score-) + 0.5 * P(tie) over all positive/negative
    pairs, computed through average ranks.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be binary 0/1")
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("both outcome classes are required")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def selection_metrics(inclusion_orders, beta_true, k: int = 10) -> tuple[float, float]:
    """Mean true-positive and false-positive selection over replicates.

    TPR: for each effect covariate, the fraction of replicates selecting it
    within the first k inclusions, averaged over effect covariates.  FPR:
    per replicate, the fraction of the first k selected covariates that
    carry no effect, averaged over replicates.
    """
    orders = [list(order) for order in inclusion_orders]
    if not orders:
        raise EmptyResultsError("no replicates to evaluate")
    effects = set(np.flatnonzero(np.asarray(beta_true)).tolist())
    selected = [set(order[:k]) for order in orders]
    if effects:
        tpr = float(np.mean([[e in sel for sel in selected].count(True) / len(orders)
                             for e in sorted(effects)]))
    else:
        tpr = 0.0
    fpr = float(np.mean([len([j for j in order[:k] if j not in effects]) / k
                         for order in orders]))
    return tpr, fpr


# --- univariable meta-analysis baseline -------------------------------------

def fit_univariable_logistic(x: np.ndarray, y: np.ndarray, max_iter: int = 25,
                             tol: float = 1e-8):
    """Newton fits of intercept-plus-slope logistic models, one per column.

    Returns (slopes, slope standard errors, usable mask).  Columns whose fit
    fails (singular information, divergence, no convergence within
    ``max_iter``) are masked out rather than reported.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    b0 = np.zeros(p)
    b1 = np.zeros(p)
    usable = np.ones(p, dtype=bool)
    converged = np.zeros(p, dtype=bool)
    se = np.full(p, np.nan)
    for _ in range(max_iter):
        eta = b0[None, :] + x * b1[None, :]
        mu = expit(eta)
        w = mu * (1.0 - mu)
        resid = y[:, None] - mu
        g0 = resid.sum(axis=0)
        g1 = (x * resid).sum(axis=0)
        s0 = w.sum(axis=0)
        s1 = (w * x).sum(axis=0)
        s2 = (w * x * x).sum(axis=0)
        det = s0 * s2 - s1 * s1
        bad = ~np.isfinite(det) | (det <= 1e-12 * np.maximum(s0 * s2, 1e-300))
        usable &= ~bad
        safe_det = np.where(bad, 1.0, det)
        d0 = (s2 * g0 - s1 * g1) / safe_det
        d1 = (s0 * g1 - s1 * g0) / safe_det
        step = usable & ~converged
        b0 = np.where(step, b0 + d0, b0)
        b1 = np.where(step, b1 + d1, b1)
        with np.errstate(invalid="ignore"):
            se = np.where(step, np.sqrt(s0 / safe_det), se)
        converged |= step & (np.maximum(np.abs(d0), np.abs(d1)) < tol)
        usable &= np.isfinite(b0) & np.isfinite(b1)
        if not (usable & ~converged).any():
            break
    usable &= converged & np.isfinite(se) & (se > 0)
    return b1, se, usable


def univariable_meta_baseline(site_data, k: int = 10):
    """Top-k covariates by fixed-effects pooled univariable p-values.

    ``site_data`` is a list of (x, y) pairs, one per site, on the raw scale.
    Per-site estimates that fail to fit are dropped for that covariate; a
    covariate with no usable estimate anywhere gets p = 1.
    """
    site_data = list(site_data)
    if not site_data:
        raise EmptyResultsError("no sites given")
    p = np.asarray(site_data[0][0]).shape[1]
    weight_sum = np.zeros(p)
    weighted_est = np.zeros(p)
    for x, y in site_data:
        slopes, ses, ok = fit_univariable_logistic(np.asarray(x, float),
                                                   np.asarray(y, float))
        w = np.where(ok, 1.0 / np.where(ok, ses, 1.0) ** 2, 0.0)
        weight_sum += w
        weighted_est += w * np.where(ok, slopes, 0.0)
    have_any = weight_sum > 0
    if not have_any.all():
        log.info("baseline: %d covariates had no usable site estimate",
                 int((~have_any).sum()))
    pooled = np.where(have_any, weighted_est / np.where(have_any, weight_sum, 1.0), 0.0)
    pooled_se = np.where(have_any, 1.0 / np.sqrt(np.where(have_any, weight_sum, 1.0)),
                         np.inf)
    z = np.where(have_any, pooled / pooled_se, 0.0)
    pvalues = np.where(have_any, 2.0 * norm.sf(np.abs(z)), 1.0)
    top = np.lexsort((np.arange(p), pvalues))[:k]
    return top, pvalues


# --- run records and summaries -----------------------------------------------

@dataclass
class RunRecord:
    """Everything one analysis run contributes to the study tables."""

    scenario: str
    n: int
    cohorts: int
    method: str
    replicate: int
    inclusion_order: list
    auc: float
    data_calls: int = 0
    covariance_calls: int = 0
    covariance_values: int = 0
    history: list = field(default_factory=list)


def summarize(records, truths: dict, k: int = 10) -> pd.DataFrame:
    """Aggregate run records per scenario, cohort count and method.

    ``truths`` maps scenario name to its truth vector.  Returns one row per
    group with mean TPR/FPR/AUC and mean traffic counts.
    """
    records = list(records)
    if not records:
        raise EmptyResultsError("no run records")
    rows = []
    keyfn = lambda r: (r.scenario, r.n, r.cohorts, r.method)
    for key in sorted({keyfn(r) for r in records}):
        group = [r for r in records if keyfn(r) == key]
        tpr, fpr = selection_metrics([r.inclusion_order for r in group],
                                     truths[key[0]], k=k)
        rows.append({
            "scenario": key[0], "n": key[1], "cohorts": key[2], "method": key[3],
            "replicates": len(group),
            "mean_tpr": tpr,
            "mean_fpr": fpr,
            "mean_auc": float(np.mean([r.auc for r in group])),
            "mean_data_calls": float(np.mean([r.data_calls for r in group])),
            "mean_covariance_calls": float(np.mean([r.covariance_calls for r in group])),
            "mean_covariance_values": float(np.mean([r.covariance_values for r in group])),
        })
    return pd.DataFrame(rows)


def write_metrics(summary: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(path, index=False)
    return path


METHOD_STYLES = {
    "full_local": dict(color="tab:blue", marker="s"),
    "full_global": dict(color="tab:grey", marker="o"),
    "pooled": dict(color="black", marker="^"),
    "baseline": dict(color="tab:red", marker="v"),
    "heuristic_local": dict(color="tab:green", marker="d"),
    "block_local": dict(color="tab:purple", marker="*"),
}


def plot_selection_summary(summary: pd.DataFrame, out_dir) -> list[Path]:
    """Selection/prediction curves against the number of cohorts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    metrics = [("mean_tpr", "true positive proportion"),
               ("mean_fpr", "false positive proportion"),
               ("mean_auc", "AUC")]
    for (scenario, n), block in summary.groupby(["scenario", "n"]):
        fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
        for ax, (column, label) in zip(axes, metrics):
            for method, series in block.groupby("method"):
                series = series.sort_values("cohorts")
                style = METHOD_STYLES.get(method, {})
                ax.plot(series["cohorts"], series[column], label=method, **style)
            ax.set_xlabel("cohorts")
            ax.set_ylabel(label)
            ax.set_ylim(0.0, 1.0)
        axes[0].legend(fontsize=7)
        fig.suptitle(f"{scenario}, n={n}")
        fig.tight_layout()
        path = out_dir / f"selection_{scenario}_n{n}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_calls_values(history: pd.DataFrame, out_dir) -> list[Path]:
    """Covariance traffic: transferred values against data calls.

    One panel per scenario/method with the per-replicate end states as a
    cloud and the per-model-size means marked.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (scenario, method), block in history.groupby(["scenario", "method"]):
        fig, ax = plt.subplots(figsize=(5, 4))
        ends = block.loc[block.groupby("replicate")["step"].idxmax()]
        ax.scatter(ends["covariance_calls"], ends["covariance_values"],
                   s=12, alpha=0.35, label="replicates")
        marks = (block.groupby("model_size")[["covariance_calls", "covariance_values"]]
                 .mean().reset_index())
        ax.scatter(marks["covariance_calls"], marks["covariance_values"],
                   marker="*", color="grey", s=90, label="mean per model size")
        for _, row in marks.iterrows():
            ax.annotate(f"{int(row['model_size'])}",
                        (row["covariance_calls"], row["covariance_values"]),
                        fontsize=7, xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel("covariance data calls")
        ax.set_ylabel("covariance values transferred")
        ax.set_title(f"{scenario} / {method}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"calls_values_{scenario}_{method}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
