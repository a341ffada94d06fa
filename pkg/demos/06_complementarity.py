"""What the five objectives disagree about, measured on hits.

Trains each head separately (same data, same seed, same size), collects
each model's correctly-predicted (user, item) pairs at top-20, and asks
two questions:

  * of one model's hits, what fraction does another model miss entirely?
  * pooling a family of models, what fraction of the pooled hits does a
    single member miss?

High numbers mean the models are genuinely complementary rather than
five copies of the same ranker, which is the whole reason fusing their
rankings can beat the best individual model.  Runs in about two minutes.
"""

import numpy as np

from concf import (
    HEADS,
    TrainConfig,
    complementary_hit_ratio,
    hit_set,
    per_matrix,
    planted_interactions,
    rank_all_users,
    split_user_history,
    train,
    user_chr_cdf,
)

TOP_N = 20
data = planted_interactions(300, 500, rank=6, interactions_per_user=25.0, seed=2)
split = split_user_history(data, ratios=(0.6, 0.2, 0.2), min_interactions=10, seed=2)

print("training five solo models (one per objective)...")
hit_sets = []
for h in HEADS:
    config = TrainConfig(
        mode="single", heads=(h,), dim=32, batch_size=512,
        max_epochs=40, patience=10**6, validate_every=10**6,
        alpha=0.0, top_n=TOP_N, seed=2,
    )
    result = train(config, split)
    topn = rank_all_users(result.params, h, split.train, n=TOP_N)
    hs = hit_set(h, topn, split.test)
    hit_sets.append(hs)
    print(f"  head {h}: {len(hs.pairs)} test hits at top-{TOP_N}")

print("\n=== pairwise exclusive ratios ===")
print("fraction of the row model's hits that the column model misses:")
tags, matrix = per_matrix(hit_sets)
print("      " + "  ".join(f"{t:>5}" for t in tags))
for tag, row in zip(tags, matrix):
    cells = "  ".join("    -" if np.isnan(v) else f"{v:5.2f}" for v in row)
    print(f"  {tag:>3} {cells}")

print("\n=== complementary hit ratio per member ===")
print("fraction of the family's pooled hits each single model misses:")
for hs in hit_sets:
    chr_value = complementary_hit_ratio(hs, hit_sets)
    print(f"  {hs.tag}: {chr_value:.3f}")

print("\n=== user-level distribution (head A vs the family) ===")
values = user_chr_cdf(hit_sets[0], hit_sets)[:, 0]  # sorted per-user ratios
qs = np.quantile(values, [0.25, 0.5, 0.75])
print(f"  per-user CHR quartiles: {qs[0]:.2f} / {qs[1]:.2f} / {qs[2]:.2f} "
      f"over {values.size} users with pooled hits")
print(f"  users where A misses nothing the family found: "
      f"{np.mean(values == 0.0):.1%}")
print(f"  users where A misses over half the pooled hits: "
      f"{np.mean(values > 0.5):.1%}")

print("\neven the strongest objective leaves a sizable slice of reachable")
print("hits on the table, and the slice differs per user: that unexploited")
print("disagreement is what consensus training feeds back into the model.")
