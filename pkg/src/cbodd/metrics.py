"""Ranking metrics.

AUC is computed from average ranks (Mann-Whitney U), which equals the
pairwise definition (#concordant + 0.5 * #tied) / (#pos * #neg) exactly,
ties included, and is invariant under strictly increasing score
transforms.
"""

from __future__ import annotations

import numpy as np

from cbodd.errors import LabelError, MetricError


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(
            f"scores and labels must be equal-length vectors, got {scores.shape} "
            f"and {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise LabelError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[order[j]] == scores[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average rank of the tie run
        i = j
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
