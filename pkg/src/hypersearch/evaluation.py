"""Temporal splitting, full-catalog ranking, and top-k ranking metrics.

Metric definitions (k fixed, gain 1 for relevant items, ranks 1-based):

* HR@k    -- hits in the top k divided by min(#positives, k).
* NDCG@k  -- DCG@k / IDCG@k with discount 1 / log2(rank + 1).
* MAP@k   -- average precision truncated at k, normalized by
             min(#positives, k).

All aggregates are arithmetic means over evaluated (user, query) keys;
keys with no positives are skipped and counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import InteractionLog
from .errors import ConfigError, DataError
from .model import EmbeddingState, score_products


def temporal_split(
    log: InteractionLog, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
) -> tuple[InteractionLog, InteractionLog, InteractionLog]:
    """Split into train/validation/test by timestamp (ties by record position).

    Sizes are floor(r0*n), floor(r1*n), and the remainder, so tiny logs may
    get an empty validation slice.
    """
    if len(log) == 0:
        raise DataError("cannot split an empty log")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(log)
    order = np.lexsort((np.arange(n), log.timestamps))
    n_train = math.floor(ratios[0] * n)
    n_valid = math.floor(ratios[1] * n)
    return (
        log.take(order[:n_train]),
        log.take(order[n_train : n_train + n_valid]),
        log.take(order[n_train + n_valid :]),
    )


def group_positives(log: InteractionLog) -> dict[tuple[int, int], set[int]]:
    """Map each (user, query) key to its set of interacted products."""
    keyed: dict[tuple[int, int], set[int]] = {}
    for u, q, p in zip(log.users.tolist(), log.queries.tolist(), log.products.tolist()):
        keyed.setdefault((u, q), set()).add(p)
    return keyed


def merge_keyed(*indexes: Mapping[tuple[int, int], set[int]]) -> dict[tuple[int, int], set[int]]:
    merged: dict[tuple[int, int], set[int]] = {}
    for index in indexes:
        for key, products in index.items():
            merged.setdefault(key, set()).update(products)
    return merged


@dataclass
class RankedList:
    """Products ranked for one (user, query) key, with its relevance labels.

    ``products`` excludes the key's already-seen positives; ``relevant``
    keeps every test positive, including any that were excluded as seen
    (those can then never be hit, which matches the usual leave-seen-out
    protocol).
    """

    user: int
    query: int
    products: np.ndarray
    relevant: frozenset[int]


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorting scores descending; equal scores keep lower index first."""
    n = len(scores)
    return np.lexsort((np.arange(n), -np.asarray(scores)))


def rank_products(
    state: EmbeddingState,
    user: int,
    query: int,
    lam: float,
    exclusions: Iterable[int] = (),
    relevant: Iterable[int] = (),
) -> RankedList:
    """Score every catalog product except the exclusions and sort them.

    Raises DataError when the user or query is outside the model's entity
    tables (callers typically skip and count such keys).
    """
    scores = score_products(state, user, query, lam)
    order = descending_order(scores)
    excluded = np.zeros(len(scores), dtype=bool)
    exclusion_list = list(exclusions)
    if exclusion_list:
        excluded[np.asarray(exclusion_list, dtype=np.int64)] = True
    ranked = order[~excluded[order]]
    return RankedList(user, query, ranked, frozenset(int(p) for p in relevant))


@dataclass
class RankingMetrics:
    k: int
    hr_at_k: float
    ndcg_at_k: float
    map_at_k: float
    evaluated_keys: int
    skipped_keys: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "hr": self.hr_at_k,
            "ndcg": self.ndcg_at_k,
            "map": self.map_at_k,
            "evaluated_keys": self.evaluated_keys,
            "skipped_keys": self.skipped_keys,
        }


def _key_metrics(ranked: RankedList, k: int) -> tuple[float, float, float]:
    top = ranked.products[:k]
    rel = [1 if int(p) in ranked.relevant else 0 for p in top]
    denom = min(len(ranked.relevant), k)
    hits = sum(rel)
    hr = hits / denom
    dcg = sum(r / math.log2(i + 2) for i, r in enumerate(rel))
    idcg = sum(1.0 / math.log2(i + 2) for i in range(denom))
    ndcg = dcg / idcg
    precision_sum = 0.0
    seen = 0
    for i, r in enumerate(rel):
        if r:
            seen += 1
            precision_sum += seen / (i + 1)
    ap = precision_sum / denom
    return hr, ndcg, ap


def metrics_at_k(ranked_lists: Sequence[RankedList], k: int = 10) -> RankingMetrics:
    """Aggregate HR/NDCG/MAP over ranked lists; zero-positive keys are skipped."""
    if k < 1:
        raise ConfigError("k must be positive")
    hr_total = ndcg_total = ap_total = 0.0
    evaluated = 0
    skipped = 0
    for ranked in ranked_lists:
        if not ranked.relevant:
            skipped += 1
            continue
        hr, ndcg, ap = _key_metrics(ranked, k)
        hr_total += hr
        ndcg_total += ndcg
        ap_total += ap
        evaluated += 1
    if evaluated == 0:
        return RankingMetrics(k, 0.0, 0.0, 0.0, 0, skipped)
    return RankingMetrics(
        k,
        hr_total / evaluated,
        ndcg_total / evaluated,
        ap_total / evaluated,
        evaluated,
        skipped,
    )


def evaluate_split(
    state: EmbeddingState,
    eval_log: InteractionLog,
    exclusion_logs: Sequence[InteractionLog],
    lam: float,
    k: int = 10,
) -> RankingMetrics:
    """Rank and score every (user, query) key of an evaluation split.

    Exclusions are the key's positives across the given logs (typically
    train and validation). Keys whose user or query lies outside the
    model's tables are skipped and counted.
    """
    keyed = group_positives(eval_log)
    exclusion_index = merge_keyed(*(group_positives(log) for log in exclusion_logs))
    ranked_lists = []
    unknown = 0
    for (user, query), positives in sorted(keyed.items()):
        try:
            ranked_lists.append(
                rank_products(
                    state,
                    user,
                    query,
                    lam,
                    exclusions=exclusion_index.get((user, query), set()),
                    relevant=positives,
                )
            )
        except DataError:
            unknown += 1
    metrics = metrics_at_k(ranked_lists, k)
    metrics.skipped_keys += unknown
    return metrics
