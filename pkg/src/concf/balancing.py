"""Per-head loss weights kept in balance by matching gradient scales.

Each head's weighted loss contributes a gradient of norm G_x = lambda_x *
||grad L_x|| on the shared embeddings.  A head that trains faster than the
rest (its loss shrinks quicker relative to its starting loss) gets a
smaller relative-rate target; one step of subgradient descent per batch
moves each lambda toward  G_x = mean(G) * gamma_x,  after which the weights
are clamped positive and renormalized to a fixed sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["BalancingError", "BalanceState", "relative_ratio", "balance_step"]

MIN_WEIGHT = 1e-6


class BalancingError(ValueError):
    """Invalid balancing state transition or inputs."""


@dataclass
class BalanceState:
    """Loss weights plus the frozen first-batch losses they are scaled by."""

    weights: dict
    learning_rate: float = 0.025
    total: float = 1.0  # every update renormalizes sum(weights) to this
    enabled: bool = True
    initial_losses: dict | None = None

    @classmethod
    def create(cls, heads, enabled: bool = True, learning_rate: float = 0.025, total: float = 1.0) -> "BalanceState":
        heads = tuple(heads)
        if not heads:
            raise BalancingError("need at least one head")
        if total <= 0:
            raise BalancingError(f"weight total must be positive, got {total}")
        return cls({h: total / len(heads) for h in heads}, learning_rate, total, enabled)

    @property
    def heads(self):
        return tuple(self.weights)

    def record_initial(self, losses: dict) -> None:
        """Freeze first-batch losses; callable exactly once."""
        if self.initial_losses is not None:
            raise BalancingError("initial losses already recorded")
        missing = [h for h in self.weights if h not in losses]
        if missing:
            raise BalancingError(f"missing initial loss for heads {missing}")
        bad = [h for h in self.weights if losses[h] <= 0]
        if bad:
            raise BalancingError(f"non-positive initial loss for heads {bad}")
        self.initial_losses = {h: float(losses[h]) for h in self.weights}


def relative_ratio(current_losses: dict, initial_losses: dict) -> dict:
    """Per-head training-rate ratio: (L/L0) normalized to mean 1."""
    heads = tuple(initial_losses)
    init = np.array([initial_losses[h] for h in heads], dtype=float)
    if np.any(init <= 0):
        raise BalancingError("initial losses must be positive")
    cur = np.array([current_losses[h] for h in heads], dtype=float)
    ratio = cur / init
    mean = ratio.mean()
    if mean == 0:
        return {h: 1.0 for h in heads}  # every head fully converged
    return dict(zip(heads, ratio / mean))


def balance_step(state: BalanceState, grad_norms: dict, gamma: dict) -> dict:
    """One subgradient step of the weights toward the gradient-scale targets.

    ``grad_norms`` holds ||grad L_x|| of the unweighted losses over the
    shared embedding tensors.  The targets mean(G) * gamma_x are treated as
    constants.  A batch where every head has zero gradient leaves the
    weights untouched.  Returns the updated weight dict (state is mutated).
    """
    if not state.enabled:
        return state.weights
    heads = state.heads
    norms = np.array([grad_norms[h] for h in heads], dtype=float)
    if np.any(norms < 0) or not np.all(np.isfinite(norms)):
        raise BalancingError("gradient norms must be finite and non-negative")
    if not np.any(norms):
        return state.weights
    lam = np.array([state.weights[h] for h in heads], dtype=float)
    g = lam * norms
    target = g.mean() * np.array([gamma[h] for h in heads], dtype=float)
    lam = lam - state.learning_rate * np.sign(g - target) * norms
    lam = np.maximum(lam, MIN_WEIGHT)
    lam *= state.total / lam.sum()
    state.weights = dict(zip(heads, lam))
    return state.weights
