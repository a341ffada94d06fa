"""Implicit-feedback data handling: loading, per-user splitting, batch sampling.

Interactions are positive-only.  The observed pairs form a sparse binary
matrix; every unobserved pair is treated as an implicit (unlabeled)
negative and may be drawn by the uniform negative sampler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "InteractionSet",
    "SplitDataset",
    "TrainBatch",
    "load_interactions",
    "split_user_history",
    "sample_batches",
    "write_split_manifest",
    "read_split_manifest",
]

MANIFEST_VERSION = 1


class DataError(ValueError):
    """Malformed input file or invalid dataset operation."""


@dataclass(frozen=True)
class InteractionSet:
    """Sparse binary user-item matrix stored as a deduplicated pair list.

    Pairs are kept in canonical (user, item) sort order.  The structure is
    immutable after construction and safe to read from multiple threads.
    """

    num_users: int
    num_items: int
    user_arr: np.ndarray
    item_arr: np.ndarray
    user_ids: tuple[str, ...] | None = None
    item_ids: tuple[str, ...] | None = None
    # derived indexes, filled in __post_init__
    _indptr: np.ndarray = field(init=False, repr=False, compare=False)
    _codes: np.ndarray = field(init=False, repr=False, compare=False)
    _item_indptr: np.ndarray = field(init=False, repr=False, compare=False)
    _item_users: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        users = np.asarray(self.user_arr, dtype=np.int64)
        items = np.asarray(self.item_arr, dtype=np.int64)
        if users.shape != items.shape or users.ndim != 1:
            raise DataError("user/item arrays must be 1-d and parallel")
        if users.size:
            if users.min() < 0 or users.max() >= self.num_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise DataError("item index out of range")
        codes = users * np.int64(self.num_items) + items
        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        if codes.size and np.any(np.diff(codes) == 0):
            raise DataError("duplicate (user, item) pair")
        users, items = users[order], items[order]
        indptr = np.zeros(self.num_users + 1, dtype=np.int64)
        np.add.at(indptr, users + 1, 1)
        np.cumsum(indptr, out=indptr)
        by_item = np.argsort(items, kind="stable")
        item_indptr = np.zeros(self.num_items + 1, dtype=np.int64)
        np.add.at(item_indptr, items + 1, 1)
        np.cumsum(item_indptr, out=item_indptr)
        object.__setattr__(self, "user_arr", users.astype(np.int32))
        object.__setattr__(self, "item_arr", items.astype(np.int32))
        object.__setattr__(self, "_indptr", indptr)
        object.__setattr__(self, "_codes", codes)
        object.__setattr__(self, "_item_indptr", item_indptr)
        object.__setattr__(self, "_item_users", users[by_item].astype(np.int32))

    @classmethod
    def from_pairs(cls, num_users, num_items, pairs, user_ids=None, item_ids=None):
        pairs = list(pairs)
        users = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
        items = np.fromiter((p[1] for p in pairs), dtype=np.int64, count=len(pairs))
        return cls(num_users, num_items, users, items, user_ids, item_ids)

    @property
    def num_pairs(self) -> int:
        return int(self.user_arr.size)

    def items_of(self, user: int) -> np.ndarray:
        """Sorted item indices the user interacted with (read-only view)."""
        lo, hi = self._indptr[user], self._indptr[user + 1]
        return self.item_arr[lo:hi]

    def users_of(self, item: int) -> np.ndarray:
        """Sorted user indices that interacted with the item."""
        lo, hi = self._item_indptr[item], self._item_indptr[item + 1]
        return self._item_users[lo:hi]

    def user_degree(self) -> np.ndarray:
        return np.diff(self._indptr)

    def item_degree(self) -> np.ndarray:
        return np.diff(self._item_indptr)

    def contains(self, users, items) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs."""
        q = np.asarray(users, dtype=np.int64) * np.int64(self.num_items) + np.asarray(
            items, dtype=np.int64
        )
        pos = np.searchsorted(self._codes, q)
        pos = np.minimum(pos, max(self._codes.size - 1, 0))
        if self._codes.size == 0:
            return np.zeros(q.shape, dtype=bool)
        return self._codes[pos] == q

    def pair_set(self) -> set[tuple[int, int]]:
        """Pairs as a Python set; intended for tests and small data."""
        return set(zip(self.user_arr.tolist(), self.item_arr.tolist()))

    def density(self) -> float:
        return self.num_pairs / float(self.num_users * self.num_items)


@dataclass(frozen=True)
class SplitDataset:
    """Train/validation/test partition of one interaction set."""

    train: InteractionSet
    val: InteractionSet
    test: InteractionSet
    split_seed: int


@dataclass(frozen=True)
class TrainBatch:
    """One batch of (user, positive item, sampled negative item) triples."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self):
        return int(self.users.size)

    def labeled_pairs(self):
        """Triples flattened to ((u, i, 1), (u, j, 0)) pairs.

        Returns (users, items, labels) arrays of length 2 * len(batch),
        positives first.
        """
        users = np.concatenate([self.users, self.users])
        items = np.concatenate([self.pos_items, self.neg_items])
        labels = np.concatenate(
            [np.ones(len(self)), np.zeros(len(self))]
        )
        return users, items, labels


def _detect_delimiter(line: str) -> str:
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None  # whitespace split


def load_interactions(path, delimiter: str | None = None) -> InteractionSet:
    """Read a "user<sep>item" text file into an InteractionSet.

    Raw ids are densely re-indexed in first-seen order; duplicate pairs are
    collapsed; columns beyond the first two are ignored.  The original ids
    are retained on the returned set (``user_ids`` / ``item_ids``) so splits
    can be mapped back to the source vocabulary.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    pairs: set[tuple[int, int]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if delimiter is None:
            delimiter = _detect_delimiter(line)
        fields = line.split(delimiter) if delimiter else line.split()
        fields = [f.strip() for f in fields if f.strip() != ""]
        if len(fields) < 2:
            raise DataError(f"{path}:{lineno}: expected 'user{delimiter or ' '}item', got {line!r}")
        u_raw, i_raw = fields[0], fields[1]
        u = user_index.setdefault(u_raw, len(user_index))
        i = item_index.setdefault(i_raw, len(item_index))
        pairs.add((u, i))
    if not pairs:
        raise DataError(f"{path}: no interactions found")
    return InteractionSet.from_pairs(
        len(user_index),
        len(item_index),
        sorted(pairs),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
    )


def split_user_history(
    data: InteractionSet,
    ratios=(0.6, 0.2, 0.2),
    min_interactions: int = 10,
    seed: int = 0,
) -> SplitDataset:
    """Randomly partition each user's history into train/val/test.

    Per user the item list is shuffled and split by ``ratios``: val and test
    get floor(ratio * n) items each, train keeps the remainder, which keeps
    train the largest share.  Users below ``min_interactions`` contribute
    everything to train.  Items that would otherwise never appear in train
    have all their pairs relocated to train, since an entity absent from
    training cannot be scored meaningfully.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DataError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u in range(data.num_users):
        items = data.items_of(u).copy()
        n = items.size
        if n == 0:
            continue
        rng.shuffle(items)
        if n < min_interactions:
            n_val = n_test = 0
        else:
            n_val = int(np.floor(ratios[1] * n))
            n_test = int(np.floor(ratios[2] * n))
            # guard for degenerate ratios: never leave a split user trainless
            while n - n_val - n_test < 1:
                if n_test > 0:
                    n_test -= 1
                else:
                    n_val -= 1
        n_train = n - n_val - n_test
        train.extend((u, int(i)) for i in items[:n_train])
        val.extend((u, int(i)) for i in items[n_train : n_train + n_val])
        test.extend((u, int(i)) for i in items[n_train + n_val :])

    train_items = {i for _, i in train}
    kept_val = [p for p in val if p[1] in train_items]
    kept_test = [p for p in test if p[1] in train_items]
    moved = [p for p in val + test if p[1] not in train_items]
    train.extend(moved)

    mk = lambda pairs: InteractionSet.from_pairs(
        data.num_users, data.num_items, pairs, data.user_ids, data.item_ids
    )
    return SplitDataset(mk(train), mk(kept_val), mk(kept_test), split_seed=int(seed))


def sample_batches(train: InteractionSet, batch_size: int = 1024, rng=None):
    """Yield one epoch of TrainBatch objects with uniform negative sampling.

    The epoch is a seeded shuffle of all train pairs chunked into batches.
    Each positive (u, i) is paired with j drawn uniformly over all items,
    redrawn while (u, j) is a train pair (at most 100 rounds, after which j
    is drawn uniformly from the explicit complement of the user's items).
    """
    if train.num_pairs == 0:
        raise DataError("cannot sample batches from an empty training set")
    if rng is None:
        rng = np.random.default_rng()
    order = rng.permutation(train.num_pairs)
    for start in range(0, train.num_pairs, batch_size):
        sel = order[start : start + batch_size]
        users = train.user_arr[sel].astype(np.int64)
        pos = train.item_arr[sel].astype(np.int64)
        neg = rng.integers(0, train.num_items, size=sel.size)
        bad = train.contains(users, neg)
        rounds = 0
        while np.any(bad) and rounds < 100:
            neg[bad] = rng.integers(0, train.num_items, size=int(bad.sum()))
            bad = train.contains(users, neg)
            rounds += 1
        if np.any(bad):
            for k in np.flatnonzero(bad):
                u = int(users[k])
                complement = np.setdiff1d(
                    np.arange(train.num_items), train.items_of(u), assume_unique=True
                )
                if complement.size == 0:
                    raise DataError(
                        f"user {u} interacted with every item; no negative exists"
                    )
                neg[k] = rng.choice(complement)
        yield TrainBatch(
            users.astype(np.int32), pos.astype(np.int32), neg.astype(np.int32)
        )


def _pairs_payload(s: InteractionSet) -> dict:
    return {"users": s.user_arr.tolist(), "items": s.item_arr.tolist()}


def write_split_manifest(split: SplitDataset, path) -> None:
    """Persist a split as a JSON manifest so it can be shared across runs.

    Layout: format version, split seed, matrix dimensions, the raw-id
    vocabularies (index order), and the three pair lists in canonical
    (user, item) order.  Serialization is deterministic: identical splits
    produce byte-identical files.
    """
    src = split.train
    payload = {
        "format_version": MANIFEST_VERSION,
        "split_seed": split.split_seed,
        "num_users": src.num_users,
        "num_items": src.num_items,
        "user_ids": list(src.user_ids) if src.user_ids else None,
        "item_ids": list(src.item_ids) if src.item_ids else None,
        "train": _pairs_payload(split.train),
        "val": _pairs_payload(split.val),
        "test": _pairs_payload(split.test),
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def read_split_manifest(path) -> SplitDataset:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split manifest {path}: {exc}") from exc
    if payload.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {payload.get('format_version')}")
    nu, ni = payload["num_users"], payload["num_items"]
    uids = tuple(payload["user_ids"]) if payload.get("user_ids") else None
    iids = tuple(payload["item_ids"]) if payload.get("item_ids") else None
    parts = []
    for key in ("train", "val", "test"):
        block = payload[key]
        parts.append(
            InteractionSet(
                nu, ni, np.asarray(block["users"]), np.asarray(block["items"]), uids, iids
            )
        )
    return SplitDataset(*parts, split_seed=int(payload["split_seed"]))
