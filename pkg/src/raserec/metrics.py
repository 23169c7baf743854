"""Full-catalog ranking metrics."""

from __future__ import annotations

import numpy as np
import torch


class UndefinedMetricError(ValueError):
    pass


def target_ranks(scores, targets) -> np.ndarray:
    """1-based rank of each target among all items.

    Ties are broken by item id: an item with the same score as the target
    but a lower id is ranked ahead of it.
    """
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    target_scores = scores[rows, targets][:, None]
    higher = (scores > target_scores).sum(axis=1)
    ids = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == target_scores) & (ids < targets[:, None])).sum(axis=1)
    return (1 + higher + tied_before).astype(np.int64)


def _check(ranks, n):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise UndefinedMetricError("metric over an empty result set")
    if n < 1:
        raise ValueError("cutoff must be >= 1")
    return ranks


def hr_at_n(ranks, n: int) -> float:
    ranks = _check(ranks, n)
    return float(np.mean(ranks <= n))


def ndcg_at_n(ranks, n: int) -> float:
    ranks = _check(ranks, n)
    gains = np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def metric_row(ranks, cutoffs=(5, 10)) -> dict[str, float]:
    row = {}
    for n in cutoffs:
        row[f"HR@{n}"] = hr_at_n(ranks, n)
    for n in cutoffs:
        row[f"NDCG@{n}"] = ndcg_at_n(ranks, n)
    return row
