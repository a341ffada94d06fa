"""Acceptance gate: the end-to-end bar the package has to clear.

Each test pins one externally checkable property with explicit tolerances:
analytic gradients against central differences, listwise probabilities
against brute-force enumeration, the consensus builder against an
exhaustive reference (tie-breaks included), rank invariance under monotone
score transforms, the loss balancer's gradient-scale equilibrium, bitwise
equivalence of decoupled joint training with separate per-head runs, exact
agreement of every ranking metric with hand-rolled oracles, and a planted
low-rank recovery study where the consensus has to beat both the best
individual head and its rank-only ablation.

The last test reproduces headline numbers on the real dataset.  It takes
hours, so it only runs when ``--full`` is passed and the environment
variable named below points at the raw interaction file.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from concf.balancing import BalanceState, balance_step, relative_ratio
from concf.consensus import (
    ConsensusList,
    ConsensusSettings,
    generate_consensus,
    rank_items,
)
from concf.data import InteractionSet, TrainBatch, load_interactions, split_user_history
from concf.evaluation import (
    complementary_hit_ratio,
    consensus_topn,
    evaluate_ranking,
    hit_set,
    ndcg_at_n,
    pairwise_exclusive_ratio,
    rank_all_users,
    recall_at_n,
)
from concf.model import HEADS, init_params
from concf.ranking_loss import consensus_learning_loss, topn_log_likelihood
from concf.synthetic import planted_interactions
from concf.trainer import (
    TrainConfig,
    _multinomial_loss,
    _pair_head_loss,
    _snapshot_topn,
    train,
)
from oracles import (
    brute_chr,
    brute_consensus,
    brute_ndcg,
    brute_per,
    brute_recall,
    finite_difference,
    max_grad_error,
)
from test_consensus import make_queue, make_snapshot

FULL_DATASET_ENV = "CONCF_CITEULIKE"


# ----------------------------------------------------------------------
# 1. every training gradient matches central finite differences
# ----------------------------------------------------------------------


def _gradient_instance(seed):
    """Small random model + batch + consensus table, all from the seed.

    Biases get a spread so no relu sits on its kink (central differences
    straddle the non-differentiable point otherwise); embeddings stay at
    their small init so every loss is well inside float64 headroom.
    """
    params = init_params(8, 8, dim=8, sharing="embedding_only", seed=seed)
    jitter = np.random.default_rng(seed + 9000)
    for name, t in params.tensors.items():
        if name.endswith(("_b1", "_b2", "_head_b")):
            t += jitter.normal(0.0, 0.3, size=t.shape)
    params.version += 1

    r2 = np.random.default_rng(seed + 5000)
    pairs = sorted(
        {(u, int(i)) for u in range(8) for i in r2.choice(8, 3, replace=False)}
    )
    train_set = InteractionSet.from_pairs(8, 8, pairs)
    # positives must be observed pairs or the softmax column targets vanish
    pick = r2.choice(len(pairs), 6, replace=False)
    batch = TrainBatch(
        users=np.array([pairs[j][0] for j in pick]),
        pos_items=np.array([pairs[j][1] for j in pick]),
        neg_items=r2.integers(0, 8, 6),
    )
    items = np.stack([r2.permutation(8)[:5] for _ in range(8)]).astype(np.int32)
    importance = np.sort(r2.uniform(0.1, 2.0, (8, 5)), axis=1)[:, ::-1]
    consensus = ConsensusList(0, items, importance, np.full(8, 5, dtype=np.int32))
    return params, train_set, batch, consensus


def test_gradients_match_finite_differences():
    started = time.perf_counter()
    for seed in range(20):
        params, train_set, batch, consensus = _gradient_instance(seed)
        cases = {
            f"pairwise_{h}": (lambda h=h: _pair_head_loss(params, h, batch, 1.0))
            for h in "ABCD"
        }
        cases["multinomial_E"] = lambda: _multinomial_loss(params, train_set, batch, True)
        listwise_head = HEADS[seed % len(HEADS)]
        cases[f"listwise_{listwise_head}"] = lambda: consensus_learning_loss(
            params, listwise_head, batch.users, consensus, top_n=3
        )
        for label, case in cases.items():
            _, analytic = case()
            numeric = finite_difference(lambda: case()[0], params, eps=1e-5)
            err = max_grad_error(analytic, numeric, rel=1e-4, abs_tol=1e-6)
            assert err == 0.0, f"seed {seed}, {label}: worst relative error {err:.3e}"
    elapsed = time.perf_counter() - started
    print(f"\n[acceptance] 120 gradient checks clean in {elapsed:.1f}s")
    assert elapsed < 60.0, f"gradient sweep took {elapsed:.1f}s, budget is 60s"


# ----------------------------------------------------------------------
# 2. listwise prefix probabilities form a distribution
# ----------------------------------------------------------------------


def test_listwise_probabilities_sum_to_one_over_orderings():
    rng = np.random.default_rng(7)
    for size in (2, 3, 4, 5):
        for _ in range(5):
            scores = rng.normal(0.0, 1.5, size)
            total = 0.0
            for perm in itertools.permutations(range(size)):
                logp, _ = topn_log_likelihood(scores[list(perm)], size)
                total += math.exp(logp)
            assert total == pytest.approx(1.0, abs=1e-9), (
                f"size {size}: probability mass {total!r}"
            )


# ----------------------------------------------------------------------
# 3. consensus agrees with an exhaustive reference, ties included
# ----------------------------------------------------------------------


def _random_rank_lists(rng, heads, num_users, num_items, m):
    return {
        h: [rank_items(rng.normal(0.0, 1.0, num_items), m=m).tolist() for _ in range(num_users)]
        for h in heads
    }


def test_consensus_matches_exhaustive_reference():
    rng = np.random.default_rng(31)
    for trial in range(100):
        chosen = rng.choice(list(HEADS), int(rng.integers(1, 4)), replace=False)
        heads = [h for h in HEADS if h in chosen]
        num_users = int(rng.integers(1, 4))
        num_items = int(rng.integers(2, 9))
        num_snaps = int(rng.integers(2, 5))
        mirrored = trial % 5 == 4 and len(heads) >= 2
        if mirrored or trial % 3 == 0:
            m = num_items  # full lists: no clamped ranks anywhere
        else:
            m = int(rng.integers(2, num_items + 1))

        if mirrored:
            # one head's lists reversed in another head, frozen in time:
            # every item ties exactly with its mirror image, so the output
            # order is decided purely by the ascending-index tie-break
            lists = _random_rank_lists(rng, heads, num_users, num_items, m)
            lists[heads[1]] = [list(reversed(row)) for row in lists[heads[0]]]
            snaps = [lists] * num_snaps
        else:
            snaps = [
                _random_rank_lists(rng, heads, num_users, num_items, m)
                for _ in range(num_snaps)
            ]

        queue = make_queue(
            [make_snapshot(t * 20, lists, num_items, m=m) for t, lists in enumerate(snaps)]
        )
        length = int(rng.integers(1, m + 1))
        settings = ConsensusSettings(
            top_n=length,
            temperature=float(rng.uniform(2.0, 20.0)),
            list_length=length,
        )
        got = generate_consensus(queue, settings)
        expected = brute_consensus(
            snaps, heads, num_users,
            clamp=m, temperature=settings.temperature, length=length,
        )
        for u in range(num_users):
            got_items = got.items[u, : got.lengths[u]].tolist()
            assert got_items == expected[u], (
                f"trial {trial} (mirrored={mirrored}), user {u}: "
                f"{got_items} != {expected[u]}"
            )
            imp = got.importance[u, : got.lengths[u]]
            assert np.all(np.diff(imp) <= 0.0), f"trial {trial}: importance not sorted"


# ----------------------------------------------------------------------
# 4. consensus only sees ranks: monotone score transforms change nothing
# ----------------------------------------------------------------------


def test_consensus_unchanged_by_monotone_score_transforms():
    transforms = [lambda s: 2.0 * s + 7.0, np.tanh]
    rng = np.random.default_rng(53)
    for trial in range(20):
        chosen = rng.choice(list(HEADS), int(rng.integers(2, 4)), replace=False)
        heads = [h for h in HEADS if h in chosen]
        num_users = int(rng.integers(1, 4))
        num_items = int(rng.integers(3, 9))
        num_snaps = int(rng.integers(2, 5))
        m = int(rng.integers(2, num_items + 1))
        # spaced-out scores stay strictly ordered through tanh's flat tails
        base = np.linspace(-2.0, 2.0, num_items)
        scores = [
            {h: [rng.permutation(base) for _ in range(num_users)] for h in heads}
            for _ in range(num_snaps)
        ]
        target_head = heads[int(rng.integers(len(heads)))]
        transform = transforms[trial % len(transforms)]

        results = []
        for apply_transform in (False, True):
            snapshots = []
            for t, table in enumerate(scores):
                lists = {}
                for h in heads:
                    rows = table[h]
                    if apply_transform and h == target_head:
                        rows = [transform(row) for row in rows]
                    lists[h] = [rank_items(row, m=m).tolist() for row in rows]
                snapshots.append(make_snapshot(t * 20, lists, num_items, m=m))
            results.append(
                generate_consensus(make_queue(snapshots), ConsensusSettings(top_n=m, list_length=m))
            )
        plain, transformed = results
        assert np.array_equal(plain.items, transformed.items), f"trial {trial}"
        assert np.array_equal(plain.importance, transformed.importance), f"trial {trial}"
        assert np.array_equal(plain.lengths, transformed.lengths), f"trial {trial}"


# ----------------------------------------------------------------------
# 5. the balancer drives a 1000:1 gradient-scale gap to parity
# ----------------------------------------------------------------------


def test_balancing_equalizes_thousandfold_gradient_scales():
    """Two quadratic heads on one shared weight vector, curvatures 1000:1.

    Sharing the parameter keeps both relative training rates identical, so
    the rate targets stay at exactly 1 and the unique equilibrium gives
    both heads the same weighted gradient norm.  The vector shrinks by a
    fixed factor per step (the damped Newton trajectory of the weighted
    objective), which anneals the step size the same way a converging run
    does.
    """
    scale = 1000.0
    state = BalanceState.create(("steep", "shallow"), learning_rate=3e-5)
    norm = 1.0
    state.record_initial({"steep": 0.5 * scale * norm**2, "shallow": 0.5 * norm**2})
    in_band_since = None
    for step in range(1, 501):
        norm *= 0.98
        losses = {"steep": 0.5 * scale * norm**2, "shallow": 0.5 * norm**2}
        gamma = relative_ratio(losses, state.initial_losses)
        grad_norms = {"steep": scale * norm, "shallow": norm}
        weights = balance_step(state, grad_norms, gamma)
        assert abs(sum(weights.values()) - 1.0) <= 1e-12, f"step {step}: weights left the simplex"
        realized = (weights["steep"] * grad_norms["steep"]) / (weights["shallow"] * grad_norms["shallow"])
        target = gamma["steep"] / gamma["shallow"]
        if abs(realized / target - 1.0) <= 0.10:
            in_band_since = step if in_band_since is None else in_band_since
        else:
            in_band_since = None
    assert in_band_since is not None, (
        f"gradient-scale ratio {realized:.4f} never settled within 10% of target {target:.4f}"
    )
    print(
        f"\n[acceptance] balanced within 10% from step {in_band_since} on; "
        f"final ratio {realized:.4f}, weights ({weights['steep']:.6f}, {weights['shallow']:.6f})"
    )


# ----------------------------------------------------------------------
# 6. with coupling off, joint training is five independent runs
# ----------------------------------------------------------------------


def test_decoupled_joint_training_is_bitwise_equal_to_solo_runs():
    """alpha=0, balancing off, nothing shared: the joint run must replay
    each head's solo trajectory exactly, down to the optimizer moments."""
    data = planted_interactions(16, 20, rank=3, interactions_per_user=10.0, seed=3)
    split = split_user_history(data, ratios=(0.6, 0.2, 0.2), min_interactions=5, seed=3)
    common = dict(
        dim=8, learning_rate=0.05, batch_size=64, max_epochs=5, patience=50,
        sharing="no_sharing", balancing=False, alpha=0.0, top_n=2,
        snapshot_size=8, snapshot_period=1, queue_size=1, seed=11,
    )
    joint = train(TrainConfig(mode="concf", heads=HEADS, weight_total=5.0, **common), split)
    for h in HEADS:
        solo = train(TrainConfig(mode="single", heads=(h,), weight_total=1.0, **common), split)
        jb, sb = joint.head_best[h], solo.head_best[h]
        assert jb.epoch == sb.epoch, f"head {h}: best epoch {jb.epoch} != {sb.epoch}"
        assert jb.metric == sb.metric, f"head {h}: best metric differs"
        for name, tensor in sb.params.tensors.items():
            assert np.array_equal(jb.params.tensors[name], tensor), (
                f"head {h}: checkpoint tensor {name} diverged"
            )
        for name in solo.adam.m:
            assert np.array_equal(joint.adam.m[name], solo.adam.m[name]), (
                f"head {h}: first moment of {name} diverged"
            )
            assert np.array_equal(joint.adam.v[name], solo.adam.v[name]), (
                f"head {h}: second moment of {name} diverged"
            )
        joint_val = [record[f"val_{h}"] for record in joint.history.records]
        solo_val = [record[f"val_{h}"] for record in solo.history.records]
        assert joint_val == solo_val, f"head {h}: validation sequence diverged"


# ----------------------------------------------------------------------
# 7. on planted factors the consensus beats every head and its ablation
# ----------------------------------------------------------------------

DIRECTIONAL_SEEDS = 5
DIRECTIONAL_CONFIG = dict(
    mode="concf", dim=64, learning_rate=0.01, batch_size=1024,
    max_epochs=200, patience=10**6, alpha=0.01, top_n=50, temperature=40.0,
    snapshot_period=16, queue_size=5, snapshot_size=1000, validate_every=10**6,
)
DIRECTIONAL_EVAL_TEMPERATURE = 80.0


def test_consensus_beats_heads_and_rank_only_ablation_on_planted_data():
    """Trains the five heads jointly on synthetic rank-8 interactions and
    scores test recall@50 three ways from the final snapshot queue: each
    head alone, the rank-plus-consistency consensus, and the rank-only
    ablation.  Snapshots keep full rankings here: on 1000 items a 300-item
    cut would hand every absent item a zero rank spread, which reads as
    perfectly consistent and drowns the signal the spread term carries.
    The run is long on purpose: the queue window has to sit past
    convergence, where a drifting rank marks an unreliable item.  Earlier
    windows catch items still climbing toward their final rank, and the
    spread term then punishes exactly the items that are improving.
    """
    started = time.perf_counter()
    beats_heads = 0
    beats_rank_only = 0
    for seed in range(DIRECTIONAL_SEEDS):
        data = planted_interactions(500, 1000, rank=8, interactions_per_user=30.0, seed=seed)
        split = split_user_history(data, ratios=(0.6, 0.2, 0.2), min_interactions=10, seed=seed)
        result = train(TrainConfig(seed=seed, **DIRECTIONAL_CONFIG), split)

        best_head = max(
            evaluate_ranking(_snapshot_topn(result.queue.latest, h, 50), split.test).recall
            for h in HEADS
        )
        recalls = {}
        for label, use_consistency in (("full", True), ("rank_only", False)):
            settings = ConsensusSettings(
                top_n=50,
                temperature=DIRECTIONAL_EVAL_TEMPERATURE,
                snapshot_size=1000,
                use_consistency=use_consistency,
            )
            topn = consensus_topn(generate_consensus(result.queue, settings), 50)
            recalls[label] = evaluate_ranking(topn, split.test).recall
        beats_heads += recalls["full"] >= best_head
        beats_rank_only += recalls["full"] >= recalls["rank_only"]
        print(
            f"\n[acceptance] planted seed {seed}: consensus {recalls['full']:.4f}, "
            f"rank-only {recalls['rank_only']:.4f}, best head {best_head:.4f}"
        )
    print(f"[acceptance] planted study took {time.perf_counter() - started:.0f}s")
    assert beats_heads >= 4, f"consensus beat the best head on only {beats_heads}/5 seeds"
    assert beats_rank_only >= 4, (
        f"consistency helped on only {beats_rank_only}/5 seeds"
    )


# ----------------------------------------------------------------------
# 8. ranking metrics agree exactly with set-arithmetic oracles
# ----------------------------------------------------------------------


def _random_hit_sets(rng, num_users, num_items, n):
    total = num_users * num_items
    k = int(rng.integers(1, min(total, 12) + 1))
    flat = rng.choice(total, k, replace=False)
    held = InteractionSet.from_pairs(
        num_users, num_items, [(int(f) // num_items, int(f) % num_items) for f in flat]
    )
    sets = []
    for tag in ("x", "y", "z"):
        topn = np.stack([rng.permutation(num_items)[:n] for _ in range(num_users)])
        sets.append(hit_set(tag, topn, held))
    return sets


def test_ranking_metrics_match_oracles_exactly():
    rng = np.random.default_rng(17)
    for trial in range(1000):
        num_items = int(rng.integers(5, 30))
        n = int(rng.integers(1, 10))
        topn = rng.permutation(num_items)[:n]
        test_items = rng.choice(num_items, int(rng.integers(1, min(num_items, 8))), replace=False)
        assert recall_at_n(topn, test_items) == brute_recall(topn.tolist(), test_items.tolist())
        assert ndcg_at_n(topn, test_items, n) == brute_ndcg(topn.tolist(), test_items.tolist(), n)

        hx, hy, hz = _random_hit_sets(rng, int(rng.integers(2, 5)), num_items, n)
        assert pairwise_exclusive_ratio(hx, hy) == brute_per(hx.pairs, hy.pairs)
        assert complementary_hit_ratio(hx, [hy, hz]) == brute_chr(hx.pairs, [hy.pairs, hz.pairs])
        # identities: a model never misses its own hits
        self_per = pairwise_exclusive_ratio(hx, hx)
        self_chr = complementary_hit_ratio(hx, [hx])
        if hx.pairs:
            assert self_per == 0.0 and self_chr == 0.0
        else:
            assert self_per is None and self_chr is None


# ----------------------------------------------------------------------
# 9. full-dataset reproduction (multi-hour, opt-in)
# ----------------------------------------------------------------------


def test_full_dataset_reproduction(full_run):
    """Headline numbers on the real dataset: consensus recall@50 lands in
    the published band, and the five-objective family covers more of what
    the pairwise head misses than families varying only the seed or the
    embedding size.  Needs --full and the raw interaction file."""
    if not full_run:
        pytest.skip("multi-hour check; enable with --full")
    path = os.environ.get(FULL_DATASET_ENV)
    if not path:
        pytest.skip(f"set {FULL_DATASET_ENV} to the raw user-item interaction file")

    data = load_interactions(path)
    split = split_user_history(data, ratios=(0.6, 0.2, 0.2), min_interactions=5, seed=0)
    joint = train(TrainConfig(seed=0), split)
    settings = TrainConfig(seed=0).consensus_settings()
    topn = consensus_topn(generate_consensus(joint.queue, settings), 50)
    consensus_recall = evaluate_ranking(topn, split.test).recall
    print(f"\n[acceptance] full-dataset consensus recall@50 = {consensus_recall:.4f}")
    assert 0.35 <= consensus_recall <= 0.43

    def solo_hits(head, dim, seed):
        config = TrainConfig(mode="single", heads=(head,), dim=dim, seed=seed, alpha=0.0)
        result = train(config, split)
        topn = rank_all_users(result.params, head, split.train, n=50)
        return hit_set(f"{head}-d{dim}-s{seed}", topn, split.test)

    objective_family = [solo_hits(h, 64, 0) for h in HEADS]
    target = objective_family[0]
    seed_family = [target] + [solo_hits("A", 64, s) for s in (1, 2, 3, 4)]
    size_family = [target] + [solo_hits("A", d, 0) for d in (16, 32, 128, 256)]
    chr_objective = complementary_hit_ratio(target, objective_family)
    chr_seed = complementary_hit_ratio(target, seed_family)
    chr_size = complementary_hit_ratio(target, size_family)
    print(
        f"[acceptance] CHR objective={chr_objective:.4f} "
        f"seed={chr_seed:.4f} size={chr_size:.4f}"
    )
    assert chr_objective > chr_seed and chr_objective > chr_size
