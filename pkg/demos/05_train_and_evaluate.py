"""End-to-end: joint training on planted factors, then the scoreboard.

Trains the five heads jointly on a synthetic dataset whose interactions
come from a rank-6 preference matrix, builds the consensus from the final
snapshot queue, and compares test recall@20 across the individual heads,
the consensus, and its rank-only ablation.  Takes about a minute.
"""

import time

import numpy as np

from concf import (
    HEADS,
    ConsensusSettings,
    TrainConfig,
    consensus_topn,
    evaluate_ranking,
    generate_consensus,
    planted_interactions,
    split_user_history,
    train,
)
from concf.trainer import _snapshot_topn

data = planted_interactions(300, 500, rank=6, interactions_per_user=25.0, seed=1)
split = split_user_history(data, ratios=(0.6, 0.2, 0.2), min_interactions=10, seed=1)
print(f"{data.num_users} users, {data.num_items} items, "
      f"{split.train.num_pairs} train / {split.val.num_pairs} val / "
      f"{split.test.num_pairs} test pairs")

config = TrainConfig(
    dim=32,
    batch_size=512,
    max_epochs=120,        # long enough that the queue window sits past convergence
    patience=10**6,        # fixed-length run: keep the queue window deterministic
    validate_every=10**6,  # skip per-epoch validation, we evaluate at the end
    top_n=20,
    temperature=40.0,
    snapshot_period=8,
    queue_size=5,
    snapshot_size=500,     # full rankings: every item keeps a real rank spread
    alpha=0.01,
    seed=1,
)
print(f"\ntraining {len(config.heads)} heads jointly for {config.max_epochs} epochs "
      f"(snapshots every {config.snapshot_period})...")
started = time.time()
result = train(config, split)
print(f"done in {time.time() - started:.0f}s; queue holds epochs "
      f"{[s.epoch for s in result.queue.snapshots]}")

print("\nweights after balancing:")
print("  " + "  ".join(f"{h}={result.balance.weights[h]:.3f}" for h in config.heads))
print("(the balancer levels weight x gradient scale: the softmax head spreads "
      "its gradient over all 500 items, so its weight is pushed way up)")

print(f"\n=== test recall@{config.top_n} ===")
rows = []
for h in HEADS:
    topn = _snapshot_topn(result.queue.latest, h, config.top_n)
    rows.append((f"head {h}", evaluate_ranking(topn, split.test).recall))
for label, use_c in (("consensus (rank only)", False), ("consensus (full)", True)):
    settings = ConsensusSettings(top_n=config.top_n, temperature=config.temperature,
                                 snapshot_size=config.snapshot_size,
                                 use_consistency=use_c)
    topn = consensus_topn(generate_consensus(result.queue, settings), config.top_n)
    rows.append((label, evaluate_ranking(topn, split.test).recall))

best_head = max(r for label, r in rows if label.startswith("head"))
for label, r in rows:
    marker = " <- best head" if r == best_head and label.startswith("head") else ""
    print(f"  {label:<22} {r:.4f}{marker}")
print("\nthe consensus list is built from the heads' own rankings, yet it")
print("beats every one of them: their errors only partly overlap.  the rank")
print("spread term adds a little more on top of the rank-only ablation, but")
print("only because the late snapshot window sees converged models, where a")
print("drifting rank really does mean an unreliable item.  snapshots taken")
print("while the heads are still climbing punish exactly the items that are")
print("busy improving, and the ablation wins instead (try max_epochs=60).")
