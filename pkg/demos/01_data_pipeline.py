"""Data pipeline walkthrough: load, split, batch.

Builds a synthetic interaction matrix with planted low-rank structure,
splits each user's history into train/val/test, round-trips the split
through its on-disk manifest, and draws a few training batches.
"""

import tempfile
from pathlib import Path

import numpy as np

from concf import (
    load_interactions,
    planted_interactions,
    read_split_manifest,
    sample_batches,
    split_user_history,
    write_split_manifest,
)

print("=== synthetic interactions ===")
data = planted_interactions(200, 400, rank=6, interactions_per_user=25.0, seed=0)
print(f"{data.num_users} users x {data.num_items} items, "
      f"{data.num_pairs} pairs ({100 * data.density():.2f}% dense)")
degrees = data.user_degree()
print(f"history lengths: min {degrees.min()}, median {int(np.median(degrees))}, "
      f"max {degrees.max()}")

print("\n=== per-user split ===")
split = split_user_history(data, ratios=(0.6, 0.2, 0.2), min_interactions=10, seed=0)
for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
    print(f"  {name:<5} {part.num_pairs:>6} pairs")
# users below min_interactions keep everything in train
short = int((degrees < 10).sum())
print(f"  ({short} users under 10 interactions stay train-only)")

print("\n=== manifest round trip ===")
with tempfile.TemporaryDirectory() as tmp:
    manifest = Path(tmp) / "split.json"
    write_split_manifest(split, manifest)
    loaded = read_split_manifest(manifest)
    same = all(
        np.array_equal(getattr(split, part).user_arr, getattr(loaded, part).user_arr)
        and np.array_equal(getattr(split, part).item_arr, getattr(loaded, part).item_arr)
        for part in ("train", "val", "test")
    )
    print(f"wrote {manifest.name}, reloaded identical: {same}")

    # the same loader the CLI uses for raw text files
    raw = Path(tmp) / "raw.tsv"
    with open(raw, "w") as fh:
        for u, i in zip(data.user_arr, data.item_arr):
            fh.write(f"{u}\t{i}\n")
    reread = load_interactions(raw)
    print(f"text loader: {reread.num_pairs} pairs, delimiter auto-detected")

print("\n=== negative-sampled batches ===")
rng = np.random.default_rng(7)
for b, batch in enumerate(sample_batches(split.train, batch_size=512, rng=rng)):
    in_train = np.mean(split.train.contains(batch.users, batch.neg_items))
    in_test = np.mean(split.test.contains(batch.users, batch.neg_items))
    print(f"  batch {b}: {len(batch)} triples, negatives hitting train positives "
          f"{100 * in_train:.1f}%, hitting held-out items {100 * in_test:.2f}%")
    if b == 2:
        break
print("(negatives are redrawn until they avoid the user's train items; the")
print(" held-out collisions stay: with one-class feedback an unobserved item")
print(" is only presumed negative, and some 'negatives' are future positives)")
