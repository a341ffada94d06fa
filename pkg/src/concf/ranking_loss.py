"""Listwise top-N likelihood used to teach each head the consensus order.

The probability of observing the first ``top_n`` entries of a list pi under
scores s is the product over positions k < top_n of

    exp(s[pi[k]]) / sum_{j >= k} exp(s[pi[j]])

i.e. a sequence of softmax picks over the shrinking suffix.  The training
loss is the negative log of this probability summed over batch users, with
each head scoring the shared consensus list with its own score function.
"""

from __future__ import annotations

import numpy as np

from .consensus import ConsensusList
from .model import ModelParams, backward_tower, encode, scatter_rows, _sigmoid

__all__ = ["RankingLossError", "topn_log_likelihood", "consensus_learning_loss"]


class RankingLossError(ValueError):
    """List shorter than the target prefix, or consensus missing."""


def topn_log_likelihood(scores, top_n: int):
    """Log-probability of the first top_n positions plus its score gradient.

    ``scores`` are aligned with the list order (index 0 = consensus rank 0).
    Suffix normalizers use a running logaddexp, so large scores are safe.
    """
    s = np.asarray(scores, dtype=float).ravel()
    if top_n < 1:
        raise RankingLossError(f"top_n must be >= 1, got {top_n}")
    if s.size < top_n:
        raise RankingLossError(f"list of {s.size} items is shorter than top_n={top_n}")
    if not np.all(np.isfinite(s)):
        raise RankingLossError("non-finite score in ranking list")
    logp, grad = _topn_batch(s[None, :], top_n)
    return float(logp[0]), grad[0]


def _topn_batch(s: np.ndarray, top_n: int):
    """Vectorized log-likelihood over rows of a (k, L) score matrix."""
    length = s.shape[1]
    lse = np.logaddexp.accumulate(s[:, ::-1], axis=1)[:, ::-1]
    logp = np.sum(s[:, :top_n] - lse[:, :top_n], axis=1)
    # grad_j = [j < top_n] - sum_{k <= min(j, top_n-1)} exp(s_j - lse_k);
    # the inner sum is a running logaddexp of -lse, and every summand has
    # s_j <= lse_k (position j is inside suffix k), so the exp stays small
    logcs = np.logaddexp.accumulate(-lse[:, :top_n], axis=1)
    cut = np.minimum(np.arange(length), top_n - 1)
    grad = (np.arange(length) < top_n).astype(float) - np.exp(s + logcs[:, cut])
    return logp, grad


def consensus_learning_loss(
    params: ModelParams,
    head: str,
    users,
    consensus: ConsensusList,
    top_n: int = 50,
    into=None,
):
    """Negative consensus log-likelihood for the batch, gradients included.

    Duplicated batch users count once.  Returns (loss, grads) where grads
    maps tensor names to accumulated gradients (merged into ``into`` when
    given).  Users whose consensus list is shorter than ``top_n`` are an
    error: the likelihood is undefined on them.
    """
    if consensus is None:
        raise RankingLossError("no consensus available (still warming up?)")
    uu = np.unique(np.asarray(users, dtype=np.int64))
    if uu.size and (uu.min() < 0 or uu.max() >= consensus.num_users):
        raise RankingLossError("batch user outside consensus table")
    lengths = consensus.lengths[uu]
    if np.any(lengths < top_n):
        bad = int(uu[np.argmax(lengths < top_n)])
        raise RankingLossError(
            f"user {bad} has a consensus list of {int(consensus.lengths[bad])} items, "
            f"shorter than top_n={top_n}"
        )
    grads = {} if into is None else into

    cu = encode(params, head, "user", uu)
    all_items = np.unique(consensus.items[uu][consensus.items[uu] >= 0])
    ci = encode(params, head, "item", all_items)
    zu_all, zi_all = cu.output, ci.output
    d_zu = np.zeros_like(zu_all)
    d_zi = np.zeros_like(zi_all)

    total = 0.0
    # group equal-length lists so each group is one dense (k, L) computation
    for list_len in np.unique(lengths):
        rows = np.flatnonzero(lengths == list_len)
        lists = consensus.items[uu[rows]][:, :list_len].astype(np.int64)
        col = np.searchsorted(all_items, lists)
        zu = zu_all[rows]
        zi = zi_all[col]
        if head == "B":
            diff = zu[:, None, :] - zi
            dist = np.linalg.norm(diff, axis=2)
            scores = -dist
        else:
            scores = np.einsum("kd,kld->kl", zu, zi)
            if head == "C":
                scores = _sigmoid(scores)
        logp, grad = _topn_batch(scores, top_n)
        total -= float(logp.sum())
        ds = -grad
        if head == "B":
            g = np.where(dist > 0, ds / np.where(dist > 0, dist, 1.0), 0.0)
            d_zu[rows] += np.einsum("kl,kld->kd", g, zi) - g.sum(axis=1)[:, None] * zu
            d_block = g[:, :, None] * (zu[:, None, :] - zi)
        else:
            if head == "C":
                ds = ds * scores * (1.0 - scores)
            d_zu[rows] += np.einsum("kl,kld->kd", ds, zi)
            d_block = ds[:, :, None] * zu[:, None, :]
        scatter_rows(d_zi, col.ravel(), d_block.reshape(-1, d_block.shape[2]))
    backward_tower(params, cu, d_zu, into=grads)
    backward_tower(params, ci, d_zi, into=grads)
    return total, grads
