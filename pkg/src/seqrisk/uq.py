"""Predictive-uncertainty statistics, calibration and ranking metrics.

Conventions pinned here so every caller agrees:

- ECE uses B right-closed equal-width bins over [0, 1]; binary inputs
  are positive-class probabilities scored against the 0/1 label,
  multiclass inputs use the max probability scored against argmax
  correctness (argmax ties to the lower class index).
- ACE averages |accuracy - confidence| over B equal-mass bins, and over
  classes for multiclass input.
- AUC-ROC is the rank statistic (ties count one half).
- AUC-PR is average precision with no interpolation, stepping at
  distinct score thresholds.
- top-k ties break toward the lower class index; for single-label tasks
  precision@k = recall@k / k exactly.
- Dispersion uses the population (divide-by-M) standard deviation, so
  sample variance can never exceed mean*(1-mean) for values in [0, 1].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NLL_EPS = 1e-12
SIMPLEX_TOL = 1e-9


class MetricError(ValueError):
    """Metric undefined on this input (e.g. single-class labels)."""


# ---------------------------------------------------------------------------
# predictive uncertainty distributions


@dataclass
class PredictiveUncertainty:
    """M sampled predictive-distribution parameters for one example.

    samples has shape (M, 1) for binary tasks (Bernoulli probability) or
    (M, K) for multiclass (rows on the simplex).
    """

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s.reshape(-1, 1)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"samples must be (M, dim) with M >= 1, got {s.shape}")
        if s.shape[1] == 1:
            if np.any(s < 0.0) or np.any(s > 1.0):
                raise ValueError("binary probabilities must lie in [0, 1]")
        else:
            if np.any(np.abs(s.sum(axis=1) - 1.0) > SIMPLEX_TOL):
                raise ValueError("multiclass rows must sum to 1")
        self.samples = s

    @property
    def m(self):
        return self.samples.shape[0]


def from_sample_array(samples):
    """Wrap an (n, M, dim) prediction-sample array, one object per example."""
    return [PredictiveUncertainty(samples[i]) for i in range(samples.shape[0])]


def marginalize(pu):
    """Monte-Carlo estimate of the marginalized predictive parameter."""
    return pu.samples.mean(axis=0)


@dataclass
class Dispersion:
    std: np.ndarray
    range: np.ndarray


def dispersion(pu):
    """Population std and max-min spread per output dimension."""
    s = pu.samples
    return Dispersion(std=s.std(axis=0), range=s.max(axis=0) - s.min(axis=0))


# ---------------------------------------------------------------------------
# calibration


def _confidence_accuracy(predictions, labels):
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels)
    if p.ndim == 2 and p.shape[1] == 1:
        p = p[:, 0]
    if p.ndim == 1:
        if len(p) != len(y):
            raise ValueError("predictions and labels length mismatch")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        return p, y.astype(float)
    conf = p.max(axis=1)
    acc = (p.argmax(axis=1) == y).astype(float)
    return conf, acc


def ece(predictions, labels, bins=10):
    """Expected calibration error over right-closed equal-width bins."""
    conf, acc = _confidence_accuracy(predictions, labels)
    n = len(conf)
    if n == 0:
        raise MetricError("ece of empty input")
    edges = np.arange(1, bins + 1) / bins
    idx = np.digitize(conf, edges, right=True)
    total = 0.0
    for b in range(bins):
        in_bin = idx == b
        n_b = int(in_bin.sum())
        if n_b:
            total += (n_b / n) * abs(acc[in_bin].mean() - conf[in_bin].mean())
    return total


def _equal_mass_gap(conf, acc, bins):
    order = np.argsort(conf, kind="mergesort")
    gaps = []
    for chunk in np.array_split(order, bins):
        if len(chunk):
            gaps.append(abs(acc[chunk].mean() - conf[chunk].mean()))
    return gaps


def ace(predictions, labels, bins=10):
    """Adaptive calibration error: equal-mass bins, averaged over classes."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels)
    if p.ndim == 2 and p.shape[1] == 1:
        p = p[:, 0]
    if len(p) == 0:
        raise MetricError("ace of empty input")
    if p.ndim == 1:
        gaps = _equal_mass_gap(p, y.astype(float), bins)
    else:
        gaps = []
        for k in range(p.shape[1]):
            gaps.extend(_equal_mass_gap(p[:, k], (y == k).astype(float), bins))
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# ranking


def _binary_scores(scores, labels):
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError("scores and labels length mismatch")
    return s, y


def auc_roc(scores, labels):
    """P(random positive outranks random negative), ties counting half."""
    s, y = _binary_scores(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc_roc needs both classes present")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    midranks = starts + (counts + 1) / 2.0  # 1-based average ranks
    ranks = midranks[inverse]
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(scores, labels):
    """Average precision (stepwise, uninterpolated, ties grouped)."""
    s, y = _binary_scores(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise MetricError("auc_pr needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y == 1)
    pred_pos = np.arange(1, len(s) + 1)
    boundary = np.nonzero(np.diff(s))[0]
    idx = np.append(boundary, len(s) - 1)  # last index of each distinct score
    precision = tp[idx] / pred_pos[idx]
    recall = tp[idx] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def nll(predictions, labels):
    """Mean negative log-likelihood with probabilities clipped to [eps, 1-eps]."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels)
    if len(p) == 0:
        raise MetricError("nll of empty input")
    p = np.clip(p, NLL_EPS, 1.0 - NLL_EPS)
    if p.ndim == 2 and p.shape[1] > 1:
        picked = p[np.arange(len(y)), y]
    else:
        p = p.reshape(-1)
        picked = np.where(y == 1, p, 1.0 - p)
    return float(-np.mean(np.log(picked)))


@dataclass
class TopK:
    recall: float
    precision: float
    f1: float


def top_k(probabilities, labels, k):
    """recall/precision/F1 at k for single-label tasks; ties to lower class."""
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels)
    if p.ndim != 2:
        raise ValueError("top_k needs an n x K probability matrix")
    n, n_classes = p.shape
    if not 1 <= k <= n_classes:
        raise ValueError(f"k={k} out of range for {n_classes} classes")
    ranked = np.argsort(-p, axis=1, kind="stable")[:, :k]
    hits = (ranked == y[:, None]).any(axis=1)
    recall = float(hits.mean())
    precision = recall / k
    f1 = 0.0 if recall + precision == 0 else 2 * precision * recall / (precision + recall)
    return TopK(recall, precision, f1)


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_ci(metric_fn, scores, labels, n_boot=1000, seed=0, max_redraws=10):
    """Percentile 95% CI of metric_fn over bootstrap resamples.

    Resamples on which the metric is undefined (MetricError) are redrawn
    up to ``max_redraws`` times, then skipped; skips are logged.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n = len(labels)
    values = []
    skipped = 0
    for b in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        for _ in range(max_redraws):
            idx = rng.integers(0, n, size=n)
            try:
                values.append(metric_fn(scores[idx], labels[idx]))
                break
            except MetricError:
                continue
        else:
            skipped += 1
    if skipped:
        log.warning("bootstrap skipped %d degenerate resamples of %d", skipped, n_boot)
    if not values:
        raise MetricError("all bootstrap resamples were degenerate")
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricReport:
    metric: str
    split: str
    value: float
    ci_lo: float | None = None
    ci_hi: float | None = None

    def __post_init__(self):
        if self.ci_lo is not None and self.ci_hi is not None:
            if not self.ci_lo <= self.value <= self.ci_hi:
                raise ValueError(
                    f"{self.metric}: value {self.value} outside CI "
                    f"[{self.ci_lo}, {self.ci_hi}]"
                )


def format_value(x):
    return "" if x is None else format(float(x), ".10g")


def write_metric_reports(reports, path):
    """CSV rows: metric, split, value, ci_lo, ci_hi."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "split", "value", "ci_lo", "ci_hi"])
        for r in reports:
            writer.writerow(
                [r.metric, r.split, format_value(r.value), format_value(r.ci_lo), format_value(r.ci_hi)]
            )


def histogram_rows(values, bins=20, lo=0.0, hi=1.0):
    """(bin_left, bin_right, count) triples over equal-width bins."""
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_histogram(values, path, bins=20, lo=0.0, hi=1.0):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, count in histogram_rows(values, bins, lo, hi):
            writer.writerow([format_value(left), format_value(right), str(count)])
