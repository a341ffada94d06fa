"""Why the per-head loss weights exist, shown on a rigged two-head problem.

Two quadratic losses share one weight vector, but one is 1000x steeper.
Summed naively, the steep head owns the gradient and the shallow head just
rides along.  The balancer watches each head's weighted gradient norm on
the shared parameters and nudges the loss weights until the norms match
their training-rate targets.
"""

import numpy as np

from concf import BalanceState, balance_step, relative_ratio

SCALE = 1000.0
STEPS = 400
state = BalanceState.create(("steep", "shallow"), learning_rate=3e-5)

w = 1.0  # stand-in for the shared parameter norm; shrinks as training would
state.record_initial({"steep": 0.5 * SCALE * w * w, "shallow": 0.5 * w * w})

print("step   lambda_steep  lambda_shallow  G_steep/G_shallow")
for step in range(1, STEPS + 1):
    w *= 0.98
    losses = {"steep": 0.5 * SCALE * w * w, "shallow": 0.5 * w * w}
    # both heads share the parameter, so their relative rates tie at 1:
    gamma = relative_ratio(losses, state.initial_losses)
    norms = {"steep": SCALE * w, "shallow": w}
    weights = balance_step(state, norms, gamma)
    ratio = weights["steep"] * norms["steep"] / (weights["shallow"] * norms["shallow"])
    if step in (1, 5, 25, 100, 200, 300, 400):
        print(f"{step:>4}   {weights['steep']:.6f}      {weights['shallow']:.6f}        {ratio:8.2f}")

print(f"\nweights settle near (1/{int(SCALE + 1)}, {int(SCALE)}/{int(SCALE + 1)}): "
      "the steep head is discounted until")
print("both heads pull on the shared parameters with the same force.")
print(f"weight sum stays exact: {sum(weights.values()):.15f}")

print("\nwithout balancing the total gradient is "
      f"{SCALE + 1:.0f}x the shallow head's own,")
print("so the shallow objective would effectively never be trained.")
