import numpy as np
import pytest

from concf.consensus import (
    ConsensusError,
    ConsensusSettings,
    RankSnapshot,
    SnapshotQueue,
    consistency,
    dump_consensus,
    f_decay,
    generate_consensus,
    load_queue,
    push_snapshot,
    rank_importance,
    rank_items,
    save_queue,
    take_snapshot,
)
from concf.data import InteractionSet
from concf.model import init_params
from oracles import brute_consensus, brute_importance


def make_snapshot(epoch, lists, num_items, m=None):
    """Build a RankSnapshot from {head: [per-user item list, ...]}."""
    heads = tuple(lists)
    num_users = len(next(iter(lists.values())))
    m = num_items if m is None else m
    items = {h: np.full((num_users, m), num_items, dtype=np.int32) for h in heads}
    lengths = {h: np.zeros(num_users, dtype=np.int32) for h in heads}
    for h, rows in lists.items():
        for u, row in enumerate(rows):
            items[h][u, : len(row)] = row
            lengths[h][u] = len(row)
    return RankSnapshot(epoch, m, num_items, heads, items, lengths)


def make_queue(snapshots, capacity=None, period=20):
    q = SnapshotQueue(capacity=capacity or len(snapshots), period=period)
    for s in snapshots:
        q.push(s)
    return q


class TestRankItems:
    def test_sorts_descending(self):
        assert rank_items([0.1, 0.9, 0.5]).tolist() == [1, 2, 0]

    def test_tie_breaks_ascending_index(self):
        assert rank_items([0.5, 0.5]).tolist() == [0, 1]

    def test_exclusion(self):
        assert rank_items([0.1, 0.9, 0.5], exclude=[1]).tolist() == [2, 0]

    def test_truncation(self):
        out = rank_items(np.arange(10.0), m=3)
        assert out.tolist() == [9, 8, 7]

    def test_nonfinite_named(self):
        with pytest.raises(ConsensusError, match="head A, user 3"):
            rank_items([0.1, np.nan], label="head A, user 3")

    def test_all_excluded(self):
        assert rank_items([0.1, 0.9], exclude=[0, 1]).size == 0

    def test_big_tie_block(self):
        out = rank_items(np.zeros(6), m=4)
        assert out.tolist() == [0, 1, 2, 3]


class TestDecay:
    def test_at_zero(self):
        assert f_decay(0.0) == 1.0

    def test_at_temperature(self):
        assert f_decay(10.0) == pytest.approx(np.exp(-1), abs=1e-12)

    def test_half_life(self):
        assert f_decay(10 * np.log(2)) == pytest.approx(0.5, abs=1e-12)

    def test_temperature_validated(self):
        with pytest.raises(ConsensusError):
            f_decay(1.0, temperature=0.0)
        with pytest.raises(ConsensusError):
            f_decay(1.0, temperature=-3.0)

    def test_vectorized(self):
        out = f_decay(np.array([0.0, 10.0]))
        assert out[0] == 1.0 and out[1] == pytest.approx(np.exp(-1))


class TestRankImportance:
    def test_top_position(self):
        s = make_snapshot(0, {"A": [[4, 2, 0]]}, num_items=5)
        assert rank_importance(s, "A", 0, 4) == 1.0

    def test_absent_clamps_to_m(self):
        s = make_snapshot(0, {"A": [[0]]}, num_items=400, m=300)
        assert rank_importance(s, "A", 0, 7) == pytest.approx(9.36e-14, rel=1e-3)

    def test_rank_equal_to_temperature(self):
        row = list(range(11))
        s = make_snapshot(0, {"A": [row]}, num_items=20)
        assert rank_importance(s, "A", 0, 10) == pytest.approx(np.exp(-1))


class TestConsistency:
    def test_constant_rank(self):
        snaps = [make_snapshot(20 * t, {"A": [[3, 1, 2]]}, 5) for t in range(3)]
        q = make_queue(snaps)
        assert consistency(q, "A", 0, 1) == 1.0

    def test_hand_computed_std(self):
        # item 9 sits at ranks 0, 2, 4 across the three snapshots
        rows = [[9, 8, 7, 6, 5], [8, 7, 9, 6, 5], [8, 7, 6, 5, 9]]
        snaps = [make_snapshot(20 * t, {"A": [rows[t]]}, 10) for t in range(3)]
        q = make_queue(snaps)
        assert consistency(q, "A", 0, 9) == pytest.approx(0.84933, abs=1e-5)

    def test_absent_everywhere_is_consistent(self):
        snaps = [make_snapshot(20 * t, {"A": [[0, 1]]}, 10, m=4) for t in range(2)]
        q = make_queue(snaps)
        assert consistency(q, "A", 0, 7) == 1.0
        assert rank_importance(snaps[-1], "A", 0, 7) == pytest.approx(np.exp(-0.4))

    def test_requires_two_snapshots(self):
        q = make_queue([make_snapshot(0, {"A": [[0]]}, 3)])
        with pytest.raises(ConsensusError):
            consistency(q, "A", 0, 0)

    def test_monotone_in_std(self):
        # same latest rank, steadier history -> importance never lower
        steady = [[5, 4], [5, 4], [5, 4]]
        jumpy = [[4, 5], [5, 4], [5, 4]]
        qs = make_queue([make_snapshot(20 * t, {"A": [r]}, 6) for t, r in enumerate(steady)])
        qj = make_queue([make_snapshot(20 * t, {"A": [r]}, 6) for t, r in enumerate(jumpy)])
        assert consistency(qs, "A", 0, 5) >= consistency(qj, "A", 0, 5)


class TestQueue:
    def test_fifo_eviction(self):
        q = SnapshotQueue(capacity=2, period=10)
        for epoch in (0, 10, 20):
            q.push(make_snapshot(epoch, {"A": [[0]]}, 2))
        assert [s.epoch for s in q.snapshots] == [10, 20]
        assert q.latest.epoch == 20

    def test_epoch_must_align_to_period(self):
        q = SnapshotQueue(capacity=2, period=20)
        with pytest.raises(ConsensusError):
            q.push(make_snapshot(7, {"A": [[0]]}, 2))

    def test_epochs_must_be_consecutive(self):
        q = SnapshotQueue(capacity=3, period=20)
        q.push(make_snapshot(0, {"A": [[0]]}, 2))
        with pytest.raises(ConsensusError):
            q.push(make_snapshot(40, {"A": [[0]]}, 2))

    def test_full_flag(self):
        q = SnapshotQueue(capacity=2, period=5)
        assert not q.full
        q.push(make_snapshot(0, {"A": [[0]]}, 2))
        q.push(make_snapshot(5, {"A": [[0]]}, 2))
        assert q.full


def identical_queue(lists, num_items, count=3):
    return make_queue(
        [make_snapshot(20 * t, lists, num_items) for t in range(count)]
    )


class TestGenerateConsensus:
    settings = ConsensusSettings(top_n=2, temperature=10.0, list_length=4)

    def test_single_head_identity(self):
        q = identical_queue({"A": [[3, 0, 2, 1]]}, 4)
        out = generate_consensus(q, self.settings)
        assert out.user_list(0).tolist() == [3, 0, 2, 1]

    def test_two_identical_heads(self):
        q = identical_queue({"A": [[2, 1, 0]], "B": [[2, 1, 0]]}, 3)
        out = generate_consensus(q, self.settings)
        assert out.user_list(0).tolist() == [2, 1, 0]

    def test_importance_nonincreasing_and_tiebreak(self):
        q = identical_queue({"A": [[5, 1, 4]], "B": [[1, 5, 4]]}, 6)
        out = generate_consensus(q, self.settings)
        imp = out.user_importance(0)
        assert np.all(np.diff(imp) <= 1e-15)
        # items 1 and 5 have symmetric importance: index order breaks the tie
        assert out.user_list(0).tolist() == [1, 5, 4]

    def test_requires_full_queue(self):
        q = SnapshotQueue(capacity=3, period=20)
        q.push(make_snapshot(0, {"A": [[0]]}, 2))
        with pytest.raises(ConsensusError):
            generate_consensus(q, self.settings)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        heads = ("A", "B", "C")
        num_items, num_users, m = 8, 3, 8
        snaps = []
        for t in range(4):
            lists = {
                h: [rng.permutation(num_items)[: rng.integers(2, 7)].tolist()
                    for _ in range(num_users)]
                for h in heads
            }
            snaps.append(make_snapshot(20 * t, lists, num_items))
        q = make_queue(snaps)
        settings = ConsensusSettings(top_n=3, temperature=10.0, list_length=6)
        out = generate_consensus(q, settings)
        raw = [{h: [list(s.user_list(h, u)) for u in range(num_users)]
                for h in s.heads} for s in q.snapshots]
        expect = brute_consensus(raw, heads, num_users, m, 10.0, 6)
        for u in range(num_users):
            assert out.user_list(u).tolist() == expect[u]

    def test_rank_only_mode(self):
        rng = np.random.default_rng(8)
        lists_latest = {
            h: [rng.permutation(6)[:4].tolist()] for h in ("A", "B")
        }
        snaps = [
            make_snapshot(0, {h: [rng.permutation(6)[:4].tolist()] for h in ("A", "B")}, 6),
            make_snapshot(20, lists_latest, 6),
        ]
        q = make_queue(snaps)
        settings = ConsensusSettings(top_n=2, list_length=4, use_consistency=False)
        out = generate_consensus(q, settings)
        raw = [{h: [list(s.user_list(h, 0))] for h in s.heads} for s in q.snapshots]
        expect = brute_consensus(raw, ("A", "B"), 1, 6, 10.0, 4, use_consistency=False)
        assert out.user_list(0).tolist() == expect[0]

    def test_importance_bounds(self):
        q = identical_queue({"A": [[1, 0]], "B": [[0, 1]]}, 2)
        out = generate_consensus(q, self.settings)
        imp = out.user_importance(0)
        assert np.all(imp > 0) and np.all(imp <= 2.0)

    def test_empty_user_list(self):
        q = identical_queue({"A": [[], [1, 0]]}, 2)
        out = generate_consensus(q, self.settings)
        assert out.user_list(0).size == 0
        assert out.user_list(1).tolist() == [1, 0]


class TestImportanceOracle:
    def test_single_item_importance(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            rows = [rng.permutation(6)[: rng.integers(1, 6)].tolist() for _ in range(3)]
            snaps = [make_snapshot(20 * t, {"A": [rows[t]]}, 6) for t in range(3)]
            q = make_queue(snaps)
            item = int(rng.integers(0, 6))
            got = rank_importance(q.latest, "A", 0, item) + consistency(q, "A", 0, item)
            raw = [{"A": [rows[t]]} for t in range(3)]
            want = brute_importance(raw, "A", 0, item, 6, 10.0, True)
            assert got == pytest.approx(want, rel=1e-12)


def tiny_model_setup(seed=0):
    train = InteractionSet.from_pairs(
        3, 5, [(0, 0), (0, 1), (1, 2), (1, 3), (2, 0), (2, 3)]
    )
    params = init_params(3, 5, dim=8, sharing="embedding_only", seed=seed)
    return params, train


class TestTakeSnapshot:
    def test_excludes_train_positives(self):
        params, train = tiny_model_setup()
        snap = take_snapshot(params, train, epoch=0, m=5)
        for head in params.heads:
            for u in range(3):
                got = set(snap.user_list(head, u).tolist())
                assert got.isdisjoint(set(train.items_of(u).tolist()))
                assert len(got) == 5 - train.items_of(u).size

    def test_order_matches_scores(self):
        from concf.model import score_batch

        params, train = tiny_model_setup(seed=3)
        snap = take_snapshot(params, train, epoch=0, m=5)
        scores = score_batch(params, "A", [1], "all")[0]
        expect = rank_items(scores, exclude=train.items_of(1), m=5)
        assert snap.user_list("A", 1).tolist() == expect.tolist()

    def test_truncates_to_m(self):
        params, train = tiny_model_setup()
        snap = take_snapshot(params, train, epoch=0, m=2)
        assert snap.user_list("B", 0).size == 2

    def test_push_returns_consensus_only_when_full(self):
        params, train = tiny_model_setup()
        q = SnapshotQueue(capacity=2, period=10)
        settings = ConsensusSettings(top_n=1, list_length=2, snapshot_size=5)
        assert push_snapshot(q, params, train, 0, settings) is None
        out = push_snapshot(q, params, train, 10, settings)
        assert out is not None and out.num_users == 3


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        snaps = [
            make_snapshot(
                20 * t,
                {h: [rng.permutation(6)[:4].tolist() for _ in range(2)] for h in ("A", "C")},
                6,
                m=4,
            )
            for t in range(3)
        ]
        q = make_queue(snaps, capacity=5)
        path = tmp_path / "queue.npz"
        save_queue(path, q)
        loaded = load_queue(path)
        assert loaded.capacity == 5 and loaded.period == 20
        assert len(loaded.snapshots) == 3
        for a, b in zip(q.snapshots, loaded.snapshots):
            assert a.epoch == b.epoch and a.m == b.m and a.heads == b.heads
            for h in a.heads:
                assert np.array_equal(a.items[h], b.items[h])
                assert np.array_equal(a.lengths[h], b.lengths[h])

    def test_dump_consensus(self, tmp_path):
        q = identical_queue({"A": [[2, 0], [1, 2]]}, 3)
        out = generate_consensus(q, ConsensusSettings(top_n=1, list_length=2))
        path = tmp_path / "consensus.csv"
        dump_consensus(path, out)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,user,position,item,importance"
        assert len(lines) == 1 + 4
        first = lines[1].split(",")
        assert first[1] == "0" and first[3] == "2"
