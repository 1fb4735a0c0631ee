"""Evaluation metrics: AUC and log-loss (classification), HR@K / NDCG@K / MRR
(one ground-truth item per ranked list), RMSE (regression).

Ranked lists use the pessimistic rank: the positive loses all score ties, so
hit ratios are never inflated by tied scores.
"""

from __future__ import annotations

import numpy as np

from .dataset import Table
from .errors import DataError

LOG_EPS = 1e-12


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counting one half; computed with the rank-sum identity."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def log_loss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clamped away from 0 and 1."""
    p = np.clip(np.asarray(scores, dtype=np.float64), LOG_EPS, 1.0 - LOG_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def positive_rank(scores, positive: int) -> int:
    """1-based pessimistic rank of the positive: it loses every tie."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= positive < len(scores):
        raise DataError("positive index out of range")
    s = scores[positive]
    better = int(np.sum(scores > s))
    tied_others = int(np.sum(scores == s)) - 1
    return better + tied_others + 1


def hr_at_k(scores, positive: int, k: int) -> float:
    return 1.0 if positive_rank(scores, positive) <= k else 0.0


def ndcg_at_k(scores, positive: int, k: int) -> float:
    rank = positive_rank(scores, positive)
    return 1.0 / np.log2(rank + 1.0) if rank <= k else 0.0


def mrr(scores, positive: int) -> float:
    return 1.0 / positive_rank(scores, positive)


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0:
        raise DataError("RMSE undefined on empty input")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def ranked_lists(test: Table, item_slot: int, n_negatives: int, seed: int,
                 score_fn) -> list:
    """Ranking-evaluation harness: for each test row, score the true item
    against `n_negatives` uniformly sampled other values of the item field.

    `score_fn(sample)` must return the model score of a (possibly synthetic)
    sample.  Returns a list of (scores, positive_index) pairs; the positive
    is always index 0.
    """
    from dataclasses import replace

    item_ids = sorted({
        s.slots[item_slot] for s in test.samples
        if not isinstance(s.slots[item_slot], frozenset)
    })
    rng = np.random.default_rng(seed)
    out = []
    for s in test.samples:
        true_item = s.slots[item_slot]
        others = [fid for fid in item_ids if fid != true_item]
        take = min(n_negatives, len(others))
        negs = rng.choice(len(others), size=take, replace=False) if take else []
        scores = [score_fn(s)]
        for j in negs:
            slots = s.slots[:item_slot] + (others[j],) + s.slots[item_slot + 1:]
            scores.append(score_fn(replace(s, slots=slots)))
        out.append((np.asarray(scores), 0))
    return out
