"""Sensitivity-constrained decisions and decision-uncertainty statistics.

A decision policy holds one probability threshold per model (ensemble
member or posterior sample), each calibrated to the highest precision
that still meets the target recall on a calibration split. Decisions
use the inclusive rule ``lambda >= t``. Disagreement across the M
members is summarized by the agreement fraction phi, the Bernoulli
parameter of the per-example optimal-decision distribution.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .uq import format_value

log = logging.getLogger(__name__)


def optimize_threshold(scores, labels, target_recall):
    """Highest-precision threshold with recall >= target_recall.

    Candidates are the observed scores plus 0; ties in precision break
    toward the highest threshold. Infeasible only without positives.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError("scores and labels length mismatch")
    if not 0.0 < target_recall <= 1.0:
        raise ValueError(f"target recall must be in (0, 1], got {target_recall}")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("threshold optimization needs at least one positive example")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted == 1)
    pred = np.arange(1, len(s_sorted) + 1)
    boundary = np.nonzero(np.diff(s_sorted))[0]
    idx = np.append(boundary, len(s_sorted) - 1)
    thresholds = s_sorted[idx]
    recalls = tp[idx] / n_pos
    precisions = tp[idx] / pred[idx]
    if thresholds[-1] > 0.0:
        # t = 0 predicts everything positive
        thresholds = np.append(thresholds, 0.0)
        recalls = np.append(recalls, 1.0)
        precisions = np.append(precisions, n_pos / len(s))
    feasible = recalls + 1e-12 >= target_recall
    cand_prec = np.where(feasible, precisions, -1.0)
    best = int(np.argmax(cand_prec))  # descending thresholds: first max wins ties
    return float(thresholds[best])


def decide(lam, threshold):
    """Inclusive decision rule: 1 iff lambda >= t."""
    if not 0.0 <= lam <= 1.0 or not 0.0 <= threshold <= 1.0:
        raise ValueError("lambda and threshold must lie in [0, 1]")
    return int(lam >= threshold)


@dataclass(frozen=True)
class DecisionPolicy:
    """Per-model thresholds plus the recall target they were fit to."""

    thresholds: np.ndarray
    target_recall: float

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float).reshape(-1)
        object.__setattr__(self, "thresholds", t)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("thresholds must lie in [0, 1]")

    @classmethod
    def fit(cls, member_scores, labels, target_recall):
        """Calibrate one threshold per row of member_scores (M, n)."""
        member_scores = np.asarray(member_scores, dtype=float)
        if member_scores.ndim != 2:
            raise ValueError("member_scores must be (M, n)")
        thresholds = [
            optimize_threshold(row, labels, target_recall) for row in member_scores
        ]
        return cls(np.asarray(thresholds), target_recall)

    @property
    def size(self):
        return len(self.thresholds)


@dataclass
class DecisionDistribution:
    """Member decisions and their agreement fraction phi."""

    decisions: np.ndarray
    phi: float

    @property
    def variance(self):
        return self.phi * (1.0 - self.phi)


def decision_distribution(pu, policy):
    """Threshold each member's sampled probability; summarize agreement."""
    samples = pu.samples
    if samples.shape[1] != 1:
        raise ValueError("decision distributions are defined for binary tasks")
    if policy.size != samples.shape[0]:
        raise ValueError(
            f"policy has {policy.size} thresholds for {samples.shape[0]} samples"
        )
    decisions = (samples[:, 0] >= policy.thresholds).astype(int)
    return DecisionDistribution(decisions, float(decisions.mean()))


@dataclass(frozen=True)
class CostMatrix:
    """costs[k, j] = cost of predicting class j when the truth is k."""

    costs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=float)
        object.__setattr__(self, "costs", c)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"cost matrix must be square, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost matrix entries must be finite")

    @classmethod
    def zero_one(cls, k):
        return cls(1.0 - np.eye(k))


def bayes_decision(probabilities, costs):
    """argmin_j sum_k costs[k, j] p_k, ties to the lowest class index."""
    p = np.asarray(probabilities, dtype=float).reshape(-1)
    c = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=float)
    if c.shape != (len(p), len(p)):
        raise ValueError(f"cost matrix {c.shape} does not match {len(p)} classes")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must lie on the simplex")
    expected = p @ c
    return int(np.argmin(expected))


def write_decision_report(rows, path):
    """CSV rows: patient_id, mean lambda, std lambda, phi, decision at the
    marginalized mean."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "mean_lambda", "std_lambda", "phi", "decision_marginal"])
        for pid, mean, std, phi, decision in rows:
            writer.writerow(
                [pid, format_value(mean), format_value(std), format_value(phi), str(int(decision))]
            )
