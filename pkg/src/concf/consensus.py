"""Periodic ranking snapshots and the importance-ranked consensus lists.

Every ``period`` epochs each head's full ranking over unobserved items is
truncated to its top ``m`` entries and pushed into a FIFO queue.  Once the
queue is full, a per-user consensus target is generated: every candidate
item (union of the heads' latest top lists) gets an importance score

    importance = mean over heads of (R + C)
    R = exp(-rank / T)            rank in the head's latest list
    C = exp(-std(ranks) / T)      population std across the queued lists

with absent items clamped to rank ``m``.  Sorting candidates by importance
(ties broken by ascending item index) and truncating to ``list_length``
yields the consensus list each head is then trained to reproduce.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionSet
from .model import ModelParams, score_matrix

__all__ = [
    "ConsensusError",
    "ConsensusSettings",
    "RankSnapshot",
    "SnapshotQueue",
    "ConsensusList",
    "f_decay",
    "rank_items",
    "rank_importance",
    "consistency",
    "generate_consensus",
    "take_snapshot",
    "push_snapshot",
    "dump_consensus",
    "save_queue",
    "load_queue",
]

QUEUE_FORMAT_VERSION = 1


class ConsensusError(ValueError):
    """Snapshot/consensus precondition violated."""


def f_decay(k, temperature: float = 10.0):
    """Monotone rank decay exp(-k / temperature)."""
    if temperature <= 0:
        raise ConsensusError(f"temperature must be positive, got {temperature}")
    return np.exp(-np.asarray(k, dtype=float) / temperature)


def rank_items(scores, exclude=None, m: int | None = None, label: str = "") -> np.ndarray:
    """Indices of the top-m scores, descending, ties by ascending index.

    ``exclude`` removes items (train positives) before ranking.  Uses an
    exact partition prepass when m is much smaller than the score vector;
    boundary ties are kept and resolved by the same deterministic order.
    """
    s = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(s)):
        where = label or f"index {int(np.flatnonzero(~np.isfinite(s))[0])}"
        raise ConsensusError(f"non-finite score ({where})")
    if exclude is not None:
        ex = np.asarray(exclude, dtype=np.int64)
        if ex.size:
            s = s.copy()
            s[ex] = -np.inf
    valid = np.isfinite(s)
    k = int(valid.sum()) if m is None else min(int(m), int(valid.sum()))
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if 4 * k < s.size:
        thresh = np.partition(s, s.size - k)[s.size - k]
        cand = np.flatnonzero((s >= thresh) & valid)
    else:
        cand = np.flatnonzero(valid)
    order = np.lexsort((cand, -s[cand]))
    return cand[order[:k]].astype(np.int64)


@dataclass
class ConsensusSettings:
    """Knobs shared by snapshotting and consensus generation."""

    top_n: int = 50
    temperature: float = 10.0
    list_length: int | None = None  # None means 2 * top_n
    snapshot_size: int = 300
    use_consistency: bool = True  # False keeps only the rank term R

    def resolved_length(self) -> int:
        return 2 * self.top_n if self.list_length is None else self.list_length


@dataclass
class RankSnapshot:
    """Per-head top-m item lists for every user at one epoch.

    ``items[head]`` is (num_users, m) int32 padded with ``num_items``;
    ``lengths[head]`` gives each row's true length.  rank 0 is best; items
    outside a list rank at the clamp value m.
    """

    epoch: int
    m: int
    num_items: int
    heads: tuple[str, ...]
    items: dict[str, np.ndarray]
    lengths: dict[str, np.ndarray]

    @property
    def num_users(self) -> int:
        return self.items[self.heads[0]].shape[0]

    def user_list(self, head: str, user: int) -> np.ndarray:
        row = self.items[head][user]
        return row[: self.lengths[head][user]]

    def rank_of(self, head: str, user: int, item) -> np.ndarray:
        """Rank of item(s) in the user's list, clamped to m when absent."""
        row = self.user_list(head, user)
        item = np.asarray(item, dtype=np.int64)
        if row.size == 0:
            ranks = np.full(item.shape, self.m, dtype=np.int64)
        else:
            hits = row[None if item.ndim else ...] == item[..., None]
            ranks = np.where(hits.any(axis=-1), hits.argmax(axis=-1), self.m)
        return ranks if item.ndim else np.int64(ranks)


@dataclass
class SnapshotQueue:
    """FIFO of at most ``capacity`` snapshots taken every ``period`` epochs."""

    capacity: int = 5
    period: int = 20
    snapshots: list = field(default_factory=list)

    @property
    def full(self) -> bool:
        return len(self.snapshots) >= self.capacity

    @property
    def latest(self) -> RankSnapshot:
        return self.snapshots[-1]

    def push(self, snapshot: RankSnapshot) -> None:
        if snapshot.epoch % self.period != 0:
            raise ConsensusError(
                f"snapshot epoch {snapshot.epoch} not a multiple of period {self.period}"
            )
        if self.snapshots and snapshot.epoch != self.snapshots[-1].epoch + self.period:
            raise ConsensusError(
                f"snapshot epochs must be consecutive: {self.snapshots[-1].epoch} "
                f"then {snapshot.epoch} with period {self.period}"
            )
        self.snapshots.append(snapshot)
        if len(self.snapshots) > self.capacity:
            del self.snapshots[0]

    def copy(self) -> "SnapshotQueue":
        return SnapshotQueue(self.capacity, self.period, list(self.snapshots))


@dataclass
class ConsensusList:
    """Per-user consensus targets: items sorted by non-increasing importance."""

    epoch: int
    items: np.ndarray  # (num_users, L) int32, padded with -1
    importance: np.ndarray  # (num_users, L) float, padded with 0
    lengths: np.ndarray  # (num_users,) int32

    @property
    def num_users(self) -> int:
        return self.items.shape[0]

    @property
    def list_length(self) -> int:
        return self.items.shape[1]

    def user_list(self, user: int) -> np.ndarray:
        return self.items[user, : self.lengths[user]]

    def user_importance(self, user: int) -> np.ndarray:
        return self.importance[user, : self.lengths[user]]


def rank_importance(snapshot: RankSnapshot, head: str, user: int, item: int, temperature: float = 10.0) -> float:
    """Importance of an item from its latest ranking position alone."""
    return float(f_decay(snapshot.rank_of(head, user, item), temperature))


def consistency(queue: SnapshotQueue, head: str, user: int, item: int, temperature: float = 10.0) -> float:
    """Decay of the population std of the item's rank across the queue."""
    if len(queue.snapshots) < 2:
        raise ConsensusError("consistency needs at least 2 snapshots")
    ranks = [snap.rank_of(head, user, item) for snap in queue.snapshots]
    return float(f_decay(np.std(ranks), temperature))


def _sorted_lookup(snapshot: RankSnapshot, head: str):
    """(sorted_items, rank_at_sorted_position) per user row, vectorized."""
    items = snapshot.items[head]
    order = np.argsort(items, axis=1, kind="stable")
    return np.take_along_axis(items, order, axis=1), order.astype(np.int32)


def _ranks_of(sorted_items, sorted_ranks, length, cand, clamp):
    pos = np.searchsorted(sorted_items[:length], cand)
    pos = np.minimum(pos, max(length - 1, 0))
    found = (length > 0) & (sorted_items[pos] == cand)
    return np.where(found, sorted_ranks[pos], clamp)


def generate_consensus(
    queue: SnapshotQueue,
    settings: ConsensusSettings = ConsensusSettings(),
    heads=None,
) -> ConsensusList:
    """Build every user's consensus list from a full snapshot queue."""
    if not queue.full:
        raise ConsensusError(
            f"queue holds {len(queue.snapshots)} of {queue.capacity} snapshots; "
            "consensus needs a full queue"
        )
    latest = queue.latest
    heads = tuple(latest.heads if heads is None else heads)
    for h in heads:
        if h not in latest.heads:
            raise ConsensusError(f"snapshot has no head {h!r}")
    num_users = latest.num_users
    m = latest.m
    length = settings.resolved_length()
    temperature = settings.temperature

    # per (snapshot, head) sorted views for O(log m) rank lookups
    lookup = [{h: _sorted_lookup(s, h) for h in heads} for s in queue.snapshots]
    n_snaps = len(queue.snapshots)

    out_items = np.full((num_users, length), -1, dtype=np.int32)
    out_imp = np.zeros((num_users, length))
    out_len = np.zeros(num_users, dtype=np.int32)
    for u in range(num_users):
        cand = np.unique(np.concatenate([latest.user_list(h, u) for h in heads]))
        if cand.size == 0:
            continue
        total = np.zeros(cand.size)
        for h in heads:
            si, sr = lookup[-1][h]
            latest_ranks = _ranks_of(si[u], sr[u], latest.lengths[h][u], cand, m)
            rc = f_decay(latest_ranks, temperature)
            if settings.use_consistency:
                ranks = np.empty((n_snaps, cand.size))
                ranks[-1] = latest_ranks
                for t in range(n_snaps - 1):
                    si, sr = lookup[t][h]
                    snap = queue.snapshots[t]
                    ranks[t] = _ranks_of(si[u], sr[u], snap.lengths[h][u], cand, snap.m)
                rc = rc + f_decay(np.std(ranks, axis=0), temperature)
            total += rc
        importance = total / len(heads)
        order = np.lexsort((cand, -importance))[: min(length, cand.size)]
        out_len[u] = order.size
        out_items[u, : order.size] = cand[order]
        out_imp[u, : order.size] = importance[order]
    return ConsensusList(latest.epoch, out_items, out_imp, out_len)


def take_snapshot(
    params: ModelParams,
    train: InteractionSet,
    epoch: int,
    m: int = 300,
    heads=None,
    chunk: int = 256,
) -> RankSnapshot:
    """Score every user under every head and keep the top-m unobserved items."""
    heads = tuple(params.heads if heads is None else heads)
    num_users, num_items = params.num_users, params.num_items
    items = {h: np.full((num_users, m), num_items, dtype=np.int32) for h in heads}
    lengths = {h: np.zeros(num_users, dtype=np.int32) for h in heads}
    for h in heads:
        for start in range(0, num_users, chunk):
            users = np.arange(start, min(start + chunk, num_users))
            block = score_matrix(params, h, users).scores
            for row, u in enumerate(users):
                top = rank_items(
                    block[row],
                    exclude=train.items_of(u),
                    m=m,
                    label=f"head {h}, user {u}",
                )
                items[h][u, : top.size] = top
                lengths[h][u] = top.size
    return RankSnapshot(epoch, m, num_items, heads, items, lengths)


def push_snapshot(
    queue: SnapshotQueue,
    params: ModelParams,
    train: InteractionSet,
    epoch: int,
    settings: ConsensusSettings = ConsensusSettings(),
    heads=None,
):
    """Snapshot the model into the queue; regenerate consensus when full.

    Returns the new consensus list, or None while still warming up.
    """
    queue.push(take_snapshot(params, train, epoch, settings.snapshot_size, heads))
    if queue.full:
        return generate_consensus(queue, settings)
    return None


def save_queue(path, queue: SnapshotQueue) -> None:
    """Persist the snapshot queue as .npz (lossless round trip)."""
    meta = {
        "format_version": QUEUE_FORMAT_VERSION,
        "capacity": queue.capacity,
        "period": queue.period,
        "epochs": [s.epoch for s in queue.snapshots],
        "m": [s.m for s in queue.snapshots],
        "num_items": [s.num_items for s in queue.snapshots],
        "heads": [list(s.heads) for s in queue.snapshots],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, snap in enumerate(queue.snapshots):
        for h in snap.heads:
            arrays[f"s{k}_{h}_items"] = snap.items[h]
            arrays[f"s{k}_{h}_lengths"] = snap.lengths[h]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_queue(path) -> SnapshotQueue:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != QUEUE_FORMAT_VERSION:
            raise ConsensusError(f"unsupported queue format {meta.get('format_version')}")
        queue = SnapshotQueue(int(meta["capacity"]), int(meta["period"]))
        for k, epoch in enumerate(meta["epochs"]):
            heads = tuple(meta["heads"][k])
            queue.snapshots.append(
                RankSnapshot(
                    int(epoch),
                    int(meta["m"][k]),
                    int(meta["num_items"][k]),
                    heads,
                    {h: data[f"s{k}_{h}_items"] for h in heads},
                    {h: data[f"s{k}_{h}_lengths"] for h in heads},
                )
            )
    return queue


def dump_consensus(path, consensus: ConsensusList) -> None:
    """Write per-user consensus items and importance values as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "user", "position", "item", "importance"])
        for u in range(consensus.num_users):
            for pos, (item, imp) in enumerate(
                zip(consensus.user_list(u), consensus.user_importance(u))
            ):
                writer.writerow([consensus.epoch, u, pos, int(item), f"{imp:.10g}"])
