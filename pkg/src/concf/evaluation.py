"""Top-N ranking metrics and cross-model complementarity analyses.

Rankings are dense int matrices, one row per user, padded with -1; hits are
the intersections of those rows with a held-out interaction set.  Beyond
per-model recall/NDCG this module measures how differently two models err:
the exclusive ratio (fraction of one model's hits the other misses) and the
complementary hit ratio (fraction of a model family's pooled hits that a
chosen target model misses), both corpus-level and per user.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .consensus import ConsensusList, rank_items
from .data import InteractionSet
from .model import ModelParams, score_matrix

__all__ = [
    "RankingMetrics",
    "HitSet",
    "recall_at_n",
    "ndcg_at_n",
    "rank_all_users",
    "consensus_topn",
    "evaluate_ranking",
    "hit_set",
    "pairwise_exclusive_ratio",
    "complementary_hit_ratio",
    "user_chr_cdf",
    "per_matrix",
    "write_metrics_json",
    "write_cdf_csv",
    "write_per_matrix_csv",
]


def recall_at_n(topn_items, test_items) -> float:
    """Fraction of the user's held-out items appearing in the top-N list."""
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("user has no held-out items")
    hits = sum(1 for i in topn_items if int(i) in test)
    return hits / len(test)


def ndcg_at_n(topn_items, test_items, n: int | None = None) -> float:
    """Position-discounted hit gain, normalized by the ideal ordering.

    DCG sums 1/log2(k+1) over 1-indexed hit positions k; the ideal places
    min(|test|, N) hits at the top.
    """
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("user has no held-out items")
    topn_items = list(topn_items)
    n = len(topn_items) if n is None else n
    dcg = sum(
        1.0 / np.log2(k + 2) for k, i in enumerate(topn_items[:n]) if int(i) in test
    )
    ideal = min(len(test), n)
    idcg = float(np.sum(1.0 / np.log2(np.arange(ideal) + 2)))
    return float(dcg / idcg)


def rank_all_users(
    params: ModelParams,
    head: str,
    train: InteractionSet,
    n: int = 50,
    chunk: int = 256,
) -> np.ndarray:
    """Top-n unobserved items per user under one head; (U, n) padded -1."""
    num_users = params.num_users
    out = np.full((num_users, n), -1, dtype=np.int64)
    for start in range(0, num_users, chunk):
        users = np.arange(start, min(start + chunk, num_users))
        block = score_matrix(params, head, users).scores
        for row, u in enumerate(users):
            top = rank_items(block[row], exclude=train.items_of(u), m=n,
                             label=f"head {head}, user {u}")
            out[u, : top.size] = top
    return out


def consensus_topn(consensus: ConsensusList, n: int) -> np.ndarray:
    """First n consensus items per user as a padded ranking matrix."""
    out = np.full((consensus.num_users, n), -1, dtype=np.int64)
    take = np.minimum(consensus.lengths, n)
    for u in range(consensus.num_users):
        out[u, : take[u]] = consensus.items[u, : take[u]]
    return out


def _hit_mask(topn: np.ndarray, held_out: InteractionSet) -> np.ndarray:
    valid = topn >= 0
    users = np.broadcast_to(np.arange(topn.shape[0])[:, None], topn.shape)
    hits = np.zeros(topn.shape, dtype=bool)
    if valid.any():
        hits[valid] = held_out.contains(users[valid], topn[valid])
    return hits


@dataclass
class RankingMetrics:
    """Dataset-level ranking quality, averaged over evaluable users."""

    recall: float
    ndcg: float
    users_evaluated: int
    top_n: int

    def as_dict(self) -> dict:
        return {
            "recall": self.recall,
            "ndcg": self.ndcg,
            "users_evaluated": self.users_evaluated,
            "top_n": self.top_n,
        }


def evaluate_ranking(topn: np.ndarray, held_out: InteractionSet) -> RankingMetrics:
    """Mean recall/NDCG of ranking rows against held-out interactions.

    Users without held-out items are skipped entirely, not counted as zero.
    """
    if topn.shape[0] != held_out.num_users:
        raise ValueError("ranking rows do not match the held-out user count")
    n = topn.shape[1]
    hits = _hit_mask(topn, held_out)
    counts = held_out.user_degree()
    evaluable = counts > 0
    if not evaluable.any():
        raise ValueError("no users with held-out interactions")
    discount = 1.0 / np.log2(np.arange(n) + 2)
    ideal_cum = np.concatenate([[0.0], np.cumsum(discount)])
    hit_counts = hits.sum(axis=1)
    recall = hit_counts[evaluable] / counts[evaluable]
    dcg = (hits * discount).sum(axis=1)
    idcg = ideal_cum[np.minimum(counts, n)]
    ndcg = dcg[evaluable] / idcg[evaluable]
    return RankingMetrics(float(recall.mean()), float(ndcg.mean()), int(evaluable.sum()), n)


@dataclass
class HitSet:
    """Correctly predicted (user, item) pairs of one model's top-N lists."""

    tag: str
    by_user: dict

    @property
    def pairs(self) -> set:
        return {(u, i) for u, items in self.by_user.items() for i in items}

    def union_with(self, others) -> set:
        out = self.pairs
        for h in others:
            out |= h.pairs
        return out


def hit_set(tag: str, topn: np.ndarray, held_out: InteractionSet) -> HitSet:
    """Intersect ranking rows with held-out items (evaluable users only)."""
    hits = _hit_mask(topn, held_out)
    degrees = held_out.user_degree()
    by_user = {}
    for u in range(topn.shape[0]):
        if degrees[u] == 0:
            continue
        by_user[u] = frozenset(int(i) for i in topn[u][hits[u]])
    return HitSet(tag, by_user)


def pairwise_exclusive_ratio(hx: HitSet, hy: HitSet):
    """Fraction of hx's hit pairs that hy misses; None when hx has none."""
    px = hx.pairs
    if not px:
        return None
    return len(px - hy.pairs) / len(px)


def complementary_hit_ratio(target: HitSet, family):
    """Fraction of the family's pooled hits missed by the target model.

    ``family`` is an iterable of HitSet (the target may be among them).
    None when the pooled union is empty.
    """
    union = set()
    for h in family:
        union |= h.pairs
    if not union:
        return None
    return len(union - target.pairs) / len(union)


def user_chr_cdf(target: HitSet, family) -> np.ndarray:
    """Per-user complementary hit ratios as a (value, cum_fraction) table.

    Users whose family union is empty are skipped.  Rows are sorted by
    value, so both columns are non-decreasing; ready for CDF plotting.
    """
    family = list(family)
    if len(family) < 2:
        raise ValueError("per-user CHR needs a family of at least 2 models")
    users = set()
    for h in family:
        users |= set(h.by_user)
    values = []
    for u in sorted(users):
        union = set()
        for h in family:
            union |= set(h.by_user.get(u, ()))
        if not union:
            continue
        mine = set(target.by_user.get(u, ()))
        values.append(len(union - mine) / len(union))
    if not values:
        return np.zeros((0, 2))
    values = np.sort(np.asarray(values))
    frac = np.arange(1, values.size + 1) / values.size
    return np.column_stack([values, frac])


def per_matrix(hit_sets) -> tuple:
    """All pairwise exclusive ratios; (tags, matrix with nan for undefined)."""
    hit_sets = list(hit_sets)
    tags = [h.tag for h in hit_sets]
    mat = np.full((len(tags), len(tags)), np.nan)
    for a, hx in enumerate(hit_sets):
        for b, hy in enumerate(hit_sets):
            value = pairwise_exclusive_ratio(hx, hy)
            if value is not None:
                mat[a, b] = value
    return tags, mat


def write_metrics_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_cdf_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chr", "cumulative_fraction"])
        for value, frac in rows:
            writer.writerow([f"{value:.10g}", f"{frac:.10g}"])


def write_per_matrix_csv(path, tags, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + list(tags))
        for tag, row in zip(tags, matrix):
            writer.writerow([tag] + ["" if np.isnan(v) else f"{v:.10g}" for v in row])
