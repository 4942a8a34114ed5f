"""AUC-based group fairness metrics and hypergradient alignment rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def auc(scores, labels) -> tuple[float, bool]:
    """Mann-Whitney AUC with ties counted 0.5.

    Returns ``(auc, degenerate)``; single-class input gives ``(0.5, True)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise ValueError("auc of an empty set")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5, True
    # midranks handle ties exactly
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg)), False


@dataclass
class GroupMetrics:
    groups: list
    group_auc: np.ndarray
    overall_auc: float
    max_gaucd: float
    worst_gauc: float
    degenerate: list

    def to_dict(self) -> dict:
        return {
            "overall_auc": self.overall_auc,
            "max_gaucd": self.max_gaucd,
            "worst_gauc": self.worst_gauc,
            "group_auc": {str(g): float(a) for g, a in zip(self.groups, self.group_auc)},
            "degenerate_groups": [str(g) for g, d in zip(self.groups, self.degenerate) if d],
        }


def group_auc_metrics(scores, labels, groups) -> GroupMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    names = list(np.unique(groups))
    if not names:
        raise ValueError("no groups")
    per, flags = [], []
    for g in names:
        mask = groups == g
        a, deg = auc(scores[mask], labels[mask])
        per.append(a)
        flags.append(deg)
    per = np.array(per)
    overall, _ = auc(scores, labels)
    return GroupMetrics(
        groups=[g.item() if hasattr(g, "item") else g for g in names],
        group_auc=per,
        overall_auc=overall,
        max_gaucd=float(per.max() - per.min()),
        worst_gauc=float(per.min()),
        degenerate=flags,
    )


@dataclass
class AlignmentStats:
    epoch: int
    n_steps: int
    min_utilities: list
    rate: float | None

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "n_steps": self.n_steps, "align_rate": self.rate}


def _min_utility(record):
    if isinstance(record, dict):
        return record["min_utility"]
    return record.min_utility


def alignment_rate(step_records, epoch_boundaries) -> list:
    """Per-epoch fraction of steps whose every group utility is positive.

    ``epoch_boundaries`` lists the starting record index of each epoch; an
    epoch with no steps gets ``rate=None``.
    """
    bounds = list(epoch_boundaries) + [len(step_records)]
    out = []
    for e in range(len(bounds) - 1):
        chunk = step_records[bounds[e]:bounds[e + 1]]
        mins = [_min_utility(r) for r in chunk]
        rate = None if not mins else float(np.mean([m > 0 for m in mins]))
        out.append(AlignmentStats(epoch=e, n_steps=len(mins), min_utilities=mins, rate=rate))
    return out
