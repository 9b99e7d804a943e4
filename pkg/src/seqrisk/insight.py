"""Subgroup-stratified performance/uncertainty and embedding-entropy analysis.

Stratified metrics are evaluated per (model, subgroup) over the member
prediction matrix; degenerate subgroups (empty, or single-class for
metrics that need both classes) are flagged rather than silently
dropped. Cross-subgroup correlation measures, over ensemble members,
whether specializing to one subgroup trades off against another.

Embedding-entropy reports rank every vocabulary token by the
differential entropy of its posterior embedding distribution and
correlate entropy against log10(1 + training count).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .bayeslayers import GaussianPosterior, embedding_entropy
from .uq import MetricError, dispersion, format_value, marginalize

log = logging.getLogger(__name__)


@dataclass
class SubgroupReport:
    metric_name: str
    groups: dict          # group -> (M,) per-model metric values (nan if flagged)
    flags: dict           # group -> reason, for degenerate groups
    prevalence: dict      # group -> positive-label fraction (nan when empty)
    ensemble_size: int


def stratified_metrics(member_scores, labels, partition, metric_fn, metric_name="metric"):
    """Evaluate metric_fn separately per (ensemble member, subgroup)."""
    member_scores = np.asarray(member_scores, dtype=float)
    if member_scores.ndim == 3 and member_scores.shape[2] == 1:
        member_scores = member_scores[:, :, 0]
    if member_scores.ndim != 2:
        raise ValueError("member_scores must be (M, n)")
    labels = np.asarray(labels)
    m, n = member_scores.shape
    groups, flags, prevalence = {}, {}, {}
    for name, idx in partition.items():
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            groups[name] = np.full(m, np.nan)
            flags[name] = "empty"
            prevalence[name] = float("nan")
            continue
        sub_labels = labels[idx]
        prevalence[name] = float(np.mean(sub_labels == 1))
        values = np.empty(m)
        flagged = None
        for j in range(m):
            try:
                values[j] = metric_fn(member_scores[j, idx], sub_labels)
            except MetricError as e:
                values[j] = np.nan
                flagged = str(e)
        groups[name] = values
        if flagged:
            flags[name] = flagged
    return SubgroupReport(metric_name, groups, flags, prevalence, m)


def cross_subgroup_correlation(report, group_a, group_b):
    """Pearson correlation of per-member metric values between two subgroups."""
    a = np.asarray(report.groups[group_a], dtype=float)
    b = np.asarray(report.groups[group_b], dtype=float)
    if len(a) < 3:
        raise ValueError("correlation needs at least 3 ensemble members")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError(
            f"correlation undefined: flagged subgroup(s) among {group_a!r}, {group_b!r}"
        )
    return pearson_r(a, b)


def pearson_r(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.sum(xc * xc)) * float(np.sum(yc * yc)))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(xc * yc) / denom)


@dataclass
class SubgroupUncertainty:
    count: int
    mean_std: float
    mean_range: float
    mean_decision_variance: float


def uncertainty_by_subgroup(pus, decision_dists, partition):
    """Per-subgroup means of predictive std, spread, and decision variance."""
    if decision_dists is not None and len(decision_dists) != len(pus):
        raise ValueError("one decision distribution per example required")
    stds = np.array([float(np.mean(dispersion(pu).std)) for pu in pus])
    ranges = np.array([float(np.mean(dispersion(pu).range)) for pu in pus])
    dvars = (
        None
        if decision_dists is None
        else np.array([d.variance for d in decision_dists])
    )
    out = {}
    for name, idx in partition.items():
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            out[name] = SubgroupUncertainty(0, float("nan"), float("nan"), float("nan"))
            continue
        out[name] = SubgroupUncertainty(
            count=int(idx.size),
            mean_std=float(stds[idx].mean()),
            mean_range=float(ranges[idx].mean()),
            mean_decision_variance=float("nan") if dvars is None else float(dvars[idx].mean()),
        )
    return out


# ---------------------------------------------------------------------------
# embedding-entropy analysis


@dataclass
class EntropyReport:
    rows: list          # (token, entropy, training count), ascending entropy
    pearson_log10: float

    def bottom(self, n=10):
        """Lowest-uncertainty tokens."""
        return self.rows[:n]

    def top(self, n=10):
        """Highest-uncertainty tokens, most uncertain first."""
        return self.rows[-n:][::-1]


def entropy_frequency_report(model, vocab):
    """Rank tokens by posterior embedding entropy; correlate with frequency."""
    table = model.event_emb.table
    if not isinstance(table, GaussianPosterior):
        raise ValueError("embedding-entropy analysis needs stochastic embeddings")
    v = table.shape[0]
    if vocab.size("event") != v:
        raise ValueError("vocabulary does not match the embedding table")
    entries = []
    for idx in range(v):
        entries.append(
            (vocab.token("event", idx), embedding_entropy(table, idx), vocab.count("event", idx), idx)
        )
    entries.sort(key=lambda e: (e[1], e[3]))
    rows = [(tok, ent, cnt) for tok, ent, cnt, _ in entries]
    entropies = np.array([r[1] for r in rows])
    log_counts = np.log10(1.0 + np.array([r[2] for r in rows], dtype=float))
    r = pearson_r(entropies, log_counts)
    if math.isnan(r):
        log.warning("entropy/frequency correlation undefined (constant inputs)")
    return EntropyReport(rows, r)


# ---------------------------------------------------------------------------
# CSV emission


def write_subgroup_member_csv(report, path):
    """Long-format per-(member, subgroup) metric values."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "subgroup", report.metric_name, "flag"])
        for name in report.groups:
            flag = report.flags.get(name, "")
            for j, value in enumerate(report.groups[name]):
                writer.writerow([str(j), name, format_value(value) if np.isfinite(value) else "", flag])


def write_subgroup_pair_csv(report, group_a, group_b, path):
    """Per-member value pairs for two subgroups (scatter-ready)."""
    a = report.groups[group_a]
    b = report.groups[group_b]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", f"{report.metric_name}_{group_a}", f"{report.metric_name}_{group_b}"])
        for j in range(report.ensemble_size):
            writer.writerow([str(j), format_value(a[j]), format_value(b[j])])


def write_uncertainty_by_subgroup_csv(summaries, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subgroup", "count", "mean_std", "mean_range", "mean_decision_variance"])
        for name, s in summaries.items():
            writer.writerow(
                [name, str(s.count), format_value(s.mean_std), format_value(s.mean_range),
                 format_value(s.mean_decision_variance)]
            )


def write_entropy_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "count", "entropy"])
        for token, entropy, count in report.rows:
            writer.writerow([token, str(count), format_value(entropy)])
