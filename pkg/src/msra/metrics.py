"""Edit distance, normalized edit distance and set-level NED / SA / IA."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

# NED charged to a ground-truth sequence left without a prediction.
UNMATCHED_NED = 1.0


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs. Works on strings or label tuples."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(gt: Sequence, pred: Sequence) -> float:
    """Edit distance normalized by the ground-truth length."""
    if len(gt) == 0:
        raise ValueError("ground-truth sequence must be non-empty")
    return edit_distance(gt, pred) / len(gt)


@dataclass
class MatchReport:
    """Assignment between one image's predictions and ground truth.

    ``pairs`` holds ``(gt_index, pred_index_or_None, ned)`` per ground truth.
    """

    pairs: list = field(default_factory=list)
    n_gt: int = 0
    n_pred: int = 0
    n_exact: int = 0
    image_exact: bool = False

    @property
    def mean_ned(self) -> float:
        return sum(p[2] for p in self.pairs) / self.n_gt

    @property
    def total_ned(self) -> float:
        return sum(p[2] for p in self.pairs)


def match_sets(pred: Sequence[Sequence], gt: Sequence[Sequence]) -> MatchReport:
    """Minimum-total-NED one-to-one matching of predicted to ground-truth sequences.

    Ground truths may also stay unmatched at a cost of ``UNMATCHED_NED`` each.
    """
    pred = list(pred)
    gt = list(gt)
    if not gt:
        raise ValueError("ground-truth set must be non-empty")
    n_gt, n_pred = len(gt), len(pred)
    # columns: real predictions, then one "unmatched" slot per ground truth
    cost = np.full((n_gt, n_pred + n_gt), np.inf)
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            cost[i, j] = ned(g, p)
        cost[i, n_pred + i] = UNMATCHED_NED
    rows, cols = linear_sum_assignment(cost)
    report = MatchReport(n_gt=n_gt, n_pred=n_pred)
    for i, j in sorted(zip(rows, cols)):
        if j < n_pred:
            d = float(cost[i, j])
            report.pairs.append((int(i), int(j), d))
            report.n_exact += d == 0.0
        else:
            report.pairs.append((int(i), None, UNMATCHED_NED))
    report.image_exact = Counter(map(tuple, pred)) == Counter(map(tuple, gt))
    return report


def aggregate(reports: Sequence[MatchReport]) -> dict:
    """Dataset-level percentages: NED (mean per ground truth), SA and IA."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    n_gt = sum(r.n_gt for r in reports)
    return {
        "NED": 100.0 * sum(r.total_ned for r in reports) / n_gt,
        "SA": 100.0 * sum(r.n_exact for r in reports) / n_gt,
        "IA": 100.0 * sum(r.image_exact for r in reports) / len(reports),
        "images": len(reports),
        "sequences": n_gt,
    }


def format_table(metrics: dict) -> str:
    lines = [
        f"{'images':>8} {'seqs':>6} {'NED%':>8} {'SA%':>8} {'IA%':>8}",
        f"{metrics['images']:>8d} {metrics['sequences']:>6d} "
        f"{metrics['NED']:>8.2f} {metrics['SA']:>8.2f} {metrics['IA']:>8.2f}",
    ]
    return "\n".join(lines)
