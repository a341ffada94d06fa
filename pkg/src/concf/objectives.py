"""The five one-class collaborative filtering losses and their score gradients.

Every function is a pure map from score/label arrays to a summed scalar loss
plus exact gradients with respect to its score inputs (logits for the
cross-entropy and multinomial losses, which is the numerically safe space).
Chaining into model tensors is the caller's job.  Losses are summed, not
averaged; the loss balancer absorbs the resulting scale differences.
"""

from __future__ import annotations

import numpy as np

from .model import _sigmoid

__all__ = [
    "loss_cf_a",
    "loss_cf_b",
    "loss_cf_c",
    "loss_cf_d",
    "loss_cf_e",
    "multinomial_nll",
]


def loss_cf_a(pos_scores, neg_scores):
    """Pairwise ranking loss: sum of -log sigmoid(pos - neg).

    Returns (loss, d_pos, d_neg).  Computed as softplus(-delta) so large
    score gaps neither overflow nor lose the gradient tail.
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    delta = pos - neg
    loss = float(np.sum(np.logaddexp(0.0, -delta)))
    d_pos = -_sigmoid(-delta)  # == sigmoid(delta) - 1
    return loss, d_pos, -d_pos


def loss_cf_b(pos_scores, neg_scores, margin: float = 1.0):
    """Triplet hinge on negative-distance scores: sum of [-pos + neg + m]_+.

    Subgradient 0 exactly at the hinge boundary.  Returns (loss, d_pos, d_neg).
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    slack = -pos + neg + margin
    active = slack > 0
    loss = float(np.sum(slack[active]))
    d_pos = np.where(active, -1.0, 0.0)
    return loss, d_pos, -d_pos


def loss_cf_c(probs, labels, logits=None):
    """Binary cross-entropy over probability scores in (0, 1).

    The gradient is with respect to the underlying logit, (prob - label),
    which is exact and stable even where the probability saturates.  Pass
    ``logits`` to also evaluate the loss in logit space; otherwise the loss
    is taken directly on the probabilities.  Returns (loss, d_logits).
    """
    p = np.asarray(probs, dtype=float)
    r = np.asarray(labels, dtype=float)
    if logits is not None:
        t = np.asarray(logits, dtype=float)
        loss = float(np.sum(np.logaddexp(0.0, t) - r * t))
    else:
        loss = -float(np.sum(r * np.log(p) + (1.0 - r) * np.log1p(-p)))
    return loss, p - r


def loss_cf_d(scores, labels):
    """Squared error: 0.5 * sum (label - score)^2.  Returns (loss, d_scores)."""
    s = np.asarray(scores, dtype=float)
    r = np.asarray(labels, dtype=float)
    diff = s - r
    return 0.5 * float(np.sum(diff * diff)), diff


def multinomial_nll(logits, targets):
    """Row-wise multinomial negative log-likelihood with multi-hot targets.

    Each row is softmax-normalized over its full width; the loss is
    -sum targets * log softmax(logits).  Rows with no positive target are
    rejected (they contribute no likelihood and signal a caller bug).
    Returns (loss, d_logits) where d_logits = row_count * softmax - targets.
    """
    t = np.asarray(logits, dtype=float)
    r = np.asarray(targets, dtype=float)
    if t.shape != r.shape:
        raise ValueError(f"logits {t.shape} and targets {r.shape} differ")
    counts = r.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("multinomial target row with zero positives")
    shift = t.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.sum(np.exp(t - shift), axis=1))
    loss = float(np.sum(r * (lse[:, None] - t)))
    softmax = np.exp(t - lse[:, None])
    return loss, counts[:, None] * softmax - r


def loss_cf_e(row_logits, row_targets, col_logits=None, col_targets=None):
    """Multinomial likelihood over items per user, plus the user-side mirror.

    ``row_*`` hold one row per batch user spanning the full item vocabulary.
    The optional ``col_*`` direction scores batch items against the full
    user set, one row per item (already transposed by the caller).  Returns
    (loss, d_row_logits, d_col_logits_or_None).
    """
    loss, d_row = multinomial_nll(row_logits, row_targets)
    d_col = None
    if col_logits is not None:
        col_loss, d_col = multinomial_nll(col_logits, col_targets)
        loss += col_loss
    return loss, d_row, d_col
