"""Shared two-tower encoder with per-objective heads and exact analytic gradients.

One model carries user/item embedding tables, a two-layer relu encoder per
tower, and a per-head linear map per tower.  Each head turns the pair of
head-mapped representations into a relevance score with its own interaction:

    A  dot product (unbounded)
    B  negative euclidean distance after projecting both vectors into the
       unit ball (scores are always <= 0)
    C  logistic of the dot product (scores in (0, 1))
    D  dot product (unbounded)
    E  dot product used as a logit; normalized to a distribution only
       inside the multinomial objective

Which tensors are shared between heads is controlled by the sharing level.
All gradients are computed analytically by hand; autograd is not used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "HEADS",
    "SHARING_LEVELS",
    "ModelError",
    "ModelParams",
    "AdamState",
    "init_params",
    "encode",
    "backward_tower",
    "TripleScores",
    "MatrixScores",
    "score_triples",
    "score_matrix",
    "matrix_from_caches",
    "score",
    "score_batch",
    "apply_sgd",
    "save_checkpoint",
    "load_checkpoint",
]

HEADS = ("A", "B", "C", "D", "E")
SHARING_LEVELS = ("full", "embedding_plus_one_layer", "embedding_only", "no_sharing")
CHECKPOINT_VERSION = 1

_SIDES = ("user", "item")
# scope draw order; kept fixed so two models with the same seed and head set
# initialize identical tensors regardless of which other heads exist
_SCOPE_ROLES = (
    ("user", "emb"),
    ("item", "emb"),
    ("user", "w1"),
    ("user", "b1"),
    ("user", "w2"),
    ("user", "b2"),
    ("item", "w1"),
    ("item", "b1"),
    ("item", "w2"),
    ("item", "b2"),
    ("user", "head_w"),
    ("user", "head_b"),
    ("item", "head_w"),
    ("item", "head_b"),
)


class ModelError(ValueError):
    """Invalid model configuration or gradient application."""


def _owner(sharing: str, head: str, role: str) -> str:
    if role in ("head_w", "head_b"):
        return head
    if sharing == "no_sharing":
        return head
    if role == "emb":
        return "shared"
    if role in ("w1", "b1"):
        return "shared" if sharing in ("full", "embedding_plus_one_layer") else head
    # w2 / b2
    return "shared" if sharing == "full" else head


@dataclass
class ModelParams:
    """All model tensors keyed by "<scope>/<side>_<role>" names.

    ``version`` increments on every in-place update; cached activations
    remember the version they were computed under so a backward pass on a
    stale cache fails loudly instead of producing wrong gradients.
    """

    num_users: int
    num_items: int
    dim: int
    sharing: str
    heads: tuple[str, ...]
    seed: int
    tensors: dict[str, np.ndarray]
    version: int = 0

    def tensor_name(self, head: str, side: str, role: str) -> str:
        return f"{_owner(self.sharing, head, role)}/{side}_{role}"

    def tensor(self, head: str, side: str, role: str) -> np.ndarray:
        return self.tensors[self.tensor_name(head, side, role)]

    def embedding_names(self, head: str) -> tuple[str, str]:
        return (
            self.tensor_name(head, "user", "emb"),
            self.tensor_name(head, "item", "emb"),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.num_users,
            self.num_items,
            self.dim,
            self.sharing,
            self.heads,
            self.seed,
            {k: v.copy() for k, v in self.tensors.items()},
            self.version,
        )


def _scope_shapes(scope: str, num_users: int, num_items: int, dim: int):
    d2, d4 = dim // 2, dim // 4
    counts = {"user": num_users, "item": num_items}
    shapes = {}
    for side, role in _SCOPE_ROLES:
        if role in ("head_w", "head_b") and scope == "shared":
            continue
        shapes[(side, role)] = {
            "emb": (counts[side], dim),
            "w1": (d2, dim),
            "b1": (d2,),
            "w2": (d4, d2),
            "b2": (d4,),
            "head_w": (d4, d4),
            "head_b": (d4,),
        }[role]
    return shapes


def init_params(
    num_users: int,
    num_items: int,
    dim: int = 64,
    sharing: str = "embedding_only",
    seed: int = 0,
    heads=HEADS,
) -> ModelParams:
    """Initialize model tensors deterministically from the seed.

    Layer weights use uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
    biases start at zero, embeddings at normal(0, 0.01).  Each scope (the
    shared block and every head) draws from its own seed-derived stream,
    so a head's initial tensors depend only on (seed, head), not on which
    other heads are present.
    """
    if dim % 4 != 0:
        raise ModelError(f"embedding dim must be divisible by 4, got {dim}")
    if sharing not in SHARING_LEVELS:
        raise ModelError(f"unknown sharing level {sharing!r}")
    heads = tuple(heads)
    if not heads or len(set(heads)) != len(heads) or any(h not in HEADS for h in heads):
        raise ModelError(f"heads must be a non-empty subset of {HEADS}, got {heads}")
    heads = tuple(h for h in HEADS if h in heads)

    tensors: dict[str, np.ndarray] = {}
    scopes = ["shared"] + list(heads) if sharing != "no_sharing" else list(heads)
    for scope in scopes:
        stream = 0 if scope == "shared" else 1 + HEADS.index(scope)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), stream]))
        for (side, role), shape in _scope_shapes(scope, num_users, num_items, dim).items():
            # draw only roles this scope owns; skipped roles consume no
            # random numbers, so owned tensors depend only on (seed, scope)
            if _owner(sharing, heads[0] if scope == "shared" else scope, role) != scope:
                continue
            name = f"{scope}/{side}_{role}"
            if role == "emb":
                tensors[name] = rng.normal(0.0, 0.01, size=shape)
            elif role.endswith("_b") or role in ("b1", "b2"):
                tensors[name] = np.zeros(shape)
            else:
                fan_out, fan_in = shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(num_users, num_items, dim, sharing, heads, int(seed), tensors)


# ----------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------


@dataclass
class TowerCache:
    """Cached activations of one tower pass, consumed by backward_tower."""

    head: str
    side: str
    idx: np.ndarray
    emb: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    z: np.ndarray
    output: np.ndarray  # == z, or the unit-ball projection of z for head B
    norms: np.ndarray | None
    version: int


def scatter_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx] += rows with repeated indices accumulated.

    Per-column bincount; np.add.at is an order of magnitude slower for the
    batch-sized scatters the backward passes produce.
    """
    if idx.size == 0:
        return
    n = out.shape[0]
    for j in range(out.shape[1]):
        out[:, j] += np.bincount(idx, weights=rows[:, j], minlength=n)


def encode(params: ModelParams, head: str, side: str, idx) -> TowerCache:
    """Run one tower (embedding -> 2-layer relu encoder -> head map)."""
    if head not in params.heads:
        raise ModelError(f"model has no head {head!r}")
    idx = np.asarray(idx, dtype=np.int64)
    limit = params.num_users if side == "user" else params.num_items
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise ModelError(f"{side} index out of range")
    emb = params.tensor(head, side, "emb")[idx]
    w1, b1 = params.tensor(head, side, "w1"), params.tensor(head, side, "b1")
    w2, b2 = params.tensor(head, side, "w2"), params.tensor(head, side, "b2")
    hw, hb = params.tensor(head, side, "head_w"), params.tensor(head, side, "head_b")
    a1 = emb @ w1.T + b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ w2.T + b2
    h2 = np.maximum(a2, 0.0)
    z = h2 @ hw.T + hb
    norms = None
    output = z
    if head == "B":
        norms = np.linalg.norm(z, axis=-1)
        output = z / np.maximum(1.0, norms)[..., None]
    return TowerCache(head, side, idx, emb, a1, h1, a2, h2, z, output, norms, params.version)


def backward_tower(params: ModelParams, cache: TowerCache, d_output, into=None) -> dict:
    """Accumulate d(loss)/d(tensor) for one tower given d(loss)/d(output).

    relu has subgradient 0 at 0.  For head B the incoming gradient is with
    respect to the projected vector; the projection is chained here.
    """
    if cache.version != params.version:
        raise ModelError("stale activation cache: parameters changed since forward")
    grads = {} if into is None else into
    dz = np.asarray(d_output, dtype=float)
    if cache.head == "B":
        n = cache.norms
        out = np.where(n > 1.0)[0]
        if out.size:
            dz = dz.copy()
            zp = cache.output[out]
            inner = np.sum(zp * dz[out], axis=-1, keepdims=True)
            dz[out] = (dz[out] - zp * inner) / n[out, None]

    def acc(name, value):
        if name in grads:
            grads[name] += value
        else:
            grads[name] = value

    head, side = cache.head, cache.side
    hw = params.tensor(head, side, "head_w")
    acc(params.tensor_name(head, side, "head_w"), dz.T @ cache.h2)
    acc(params.tensor_name(head, side, "head_b"), dz.sum(axis=0))
    dh2 = dz @ hw
    da2 = dh2 * (cache.a2 > 0)
    w2 = params.tensor(head, side, "w2")
    acc(params.tensor_name(head, side, "w2"), da2.T @ cache.h1)
    acc(params.tensor_name(head, side, "b2"), da2.sum(axis=0))
    dh1 = da2 @ w2
    da1 = dh1 * (cache.a1 > 0)
    w1 = params.tensor(head, side, "w1")
    acc(params.tensor_name(head, side, "w1"), da1.T @ cache.emb)
    acc(params.tensor_name(head, side, "b1"), da1.sum(axis=0))
    demb = da1 @ w1
    emb_name = params.tensor_name(head, side, "emb")
    if emb_name not in grads:
        grads[emb_name] = np.zeros_like(params.tensors[emb_name])
    scatter_rows(grads[emb_name], cache.idx, demb)
    return grads


def _pair_interact(head, zu, zi):
    """Scores for aligned rows; returns (scores, logits_or_None, dists_or_None)."""
    if head == "B":
        diff = zu - zi
        dist = np.linalg.norm(diff, axis=-1)
        return -dist, None, dist
    dots = np.sum(zu * zi, axis=-1)
    if head == "C":
        return _sigmoid(dots), dots, None
    return dots, None, None


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class TripleScores:
    """Forward activations for (user, pos item, neg item) triples.

    ``backward`` consumes gradients with respect to the two score vectors.
    For head C the gradients are interpreted in logit space when
    ``wrt="logit"`` (the stable path used by the cross-entropy objective)
    and in probability space when ``wrt="score"``.
    """

    params: ModelParams
    head: str
    users: TowerCache
    pos: TowerCache
    neg: TowerCache
    pos_scores: np.ndarray
    neg_scores: np.ndarray
    pos_logits: np.ndarray | None
    neg_logits: np.ndarray | None
    _pos_dist: np.ndarray | None
    _neg_dist: np.ndarray | None

    def backward(self, d_pos, d_neg, wrt: str = "score", into=None) -> dict:
        grads = {} if into is None else into
        d_pos = np.asarray(d_pos, dtype=float)
        d_neg = np.asarray(d_neg, dtype=float)
        dzu = np.zeros_like(self.users.output)
        for ci, ds, dist, s in (
            (self.pos, d_pos, self._pos_dist, self.pos_scores),
            (self.neg, d_neg, self._neg_dist, self.neg_scores),
        ):
            zu, zi = self.users.output, ci.output
            if self.head == "B":
                safe = np.where(dist > 0, dist, 1.0)
                g = (ds / safe)[:, None]
                g = np.where(dist[:, None] > 0, g, 0.0)
                dzu += g * (zi - zu)
                dzi = g * (zu - zi)
            else:
                if self.head == "C" and wrt == "score":
                    ds = ds * s * (1.0 - s)
                dzu += ds[:, None] * zi
                dzi = ds[:, None] * zu
            backward_tower(self.params, ci, dzi, into=grads)
        backward_tower(self.params, self.users, dzu, into=grads)
        return grads


def score_triples(params: ModelParams, head: str, users, pos_items, neg_items) -> TripleScores:
    cu = encode(params, head, "user", users)
    cp = encode(params, head, "item", pos_items)
    cn = encode(params, head, "item", neg_items)
    sp, lp, dp = _pair_interact(head, cu.output, cp.output)
    sn, ln, dn = _pair_interact(head, cu.output, cn.output)
    return TripleScores(params, head, cu, cp, cn, sp, sn, lp, ln, dp, dn)


@dataclass
class MatrixScores:
    """Cross-product scores for a block of users x items."""

    params: ModelParams
    head: str
    users: TowerCache
    items: TowerCache
    scores: np.ndarray
    logits: np.ndarray | None
    _dist: np.ndarray | None

    def backward(self, d_scores, wrt: str = "score", into=None) -> dict:
        grads = {} if into is None else into
        ds = np.asarray(d_scores, dtype=float)
        zu, zi = self.users.output, self.items.output
        if self.head == "B":
            g = np.where(self._dist > 0, ds / np.where(self._dist > 0, self._dist, 1.0), 0.0)
            dzu = g @ zi - g.sum(axis=1)[:, None] * zu
            dzi = g.T @ zu - g.sum(axis=0)[:, None] * zi
        else:
            if self.head == "C" and wrt == "score":
                ds = ds * self.scores * (1.0 - self.scores)
            dzu = ds @ zi
            dzi = ds.T @ zu
        backward_tower(self.params, self.users, dzu, into=grads)
        backward_tower(self.params, self.items, dzi, into=grads)
        return grads


def matrix_from_caches(params: ModelParams, head: str, cu: TowerCache, ci: TowerCache) -> MatrixScores:
    """Build cross-product scores from already-encoded towers.

    Lets callers encode one side once and score it against several blocks
    of the other side (each backward pass accumulates independently).
    """
    zu, zi = cu.output, ci.output
    if head == "B":
        sq = (
            np.sum(zu**2, axis=1)[:, None]
            + np.sum(zi**2, axis=1)[None, :]
            - 2.0 * (zu @ zi.T)
        )
        dist = np.sqrt(np.maximum(sq, 0.0))
        return MatrixScores(params, head, cu, ci, -dist, None, dist)
    dots = zu @ zi.T
    if head == "C":
        return MatrixScores(params, head, cu, ci, _sigmoid(dots), dots, None)
    return MatrixScores(params, head, cu, ci, dots, None, None)


def score_matrix(params: ModelParams, head: str, users, items=None) -> MatrixScores:
    """Score every (user, item) combination; ``items=None`` means all items."""
    if items is None:
        items = np.arange(params.num_items)
    cu = encode(params, head, "user", users)
    ci = encode(params, head, "item", items)
    return matrix_from_caches(params, head, cu, ci)


def score(params: ModelParams, head: str, user: int, item: int) -> float:
    """Relevance score of one pair under one head."""
    ts = score_matrix(params, head, [user], [item])
    return float(ts.scores[0, 0])


def score_batch(params: ModelParams, head: str, users, items="all") -> np.ndarray:
    """Score matrix for the given users against the given items (or all)."""
    items = None if isinstance(items, str) and items == "all" else items
    if items is not None and len(items) == 0:
        return np.zeros((len(users), 0))
    return score_matrix(params, head, users, items).scores


# ----------------------------------------------------------------------
# optimization
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-tensor first/second moment estimates and the global step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(t) for k, t in params.tensors.items()},
            {k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


def apply_sgd(
    params: ModelParams,
    gradients: dict,
    learning_rate: float = 0.01,
    adam_state: AdamState | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """Adam update applied in place; returns the (possibly fresh) state.

    Tensors without a gradient entry (or with an all-zero one) only decay
    their moment estimates and are left unchanged.  Non-finite gradients
    abort with the offending tensor named.
    """
    if adam_state is None:
        adam_state = AdamState.for_params(params)
    for name, g in gradients.items():
        if name not in params.tensors:
            raise ModelError(f"gradient for unknown tensor {name!r}")
        if g.shape != params.tensors[name].shape:
            raise ModelError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for tensor {name!r}")
    adam_state.step += 1
    t = adam_state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, tensor in params.tensors.items():
        m, v = adam_state.m[name], adam_state.v[name]
        g = gradients.get(name)
        if g is None or not np.any(g):
            m *= beta1
            v *= beta2
            continue
        if weight_decay:
            g = g + weight_decay * tensor
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        tensor -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.version += 1
    return adam_state


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, adam_state: AdamState | None = None, extra: dict | None = None) -> None:
    """Dump all tensors plus optimizer state to a versioned .npz file.

    Save/load round-trips bit-exactly (float64 arrays are stored raw).
    """
    names = sorted(params.tensors)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "num_users": params.num_users,
        "num_items": params.num_items,
        "dim": params.dim,
        "sharing": params.sharing,
        "heads": list(params.heads),
        "seed": params.seed,
        "params_version": params.version,
        "tensor_names": names,
        "adam_step": adam_state.step if adam_state is not None else None,
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, name in enumerate(names):
        arrays[f"p{k}"] = params.tensors[name]
        if adam_state is not None:
            arrays[f"m{k}"] = adam_state.m[name]
            arrays[f"v{k}"] = adam_state.v[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (params, adam_state_or_None, extra)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {meta.get('format_version')}")
        names = meta["tensor_names"]
        tensors = {name: data[f"p{k}"] for k, name in enumerate(names)}
        adam = None
        if meta["adam_step"] is not None:
            adam = AdamState(
                {name: data[f"m{k}"] for k, name in enumerate(names)},
                {name: data[f"v{k}"] for k, name in enumerate(names)},
                step=int(meta["adam_step"]),
            )
    params = ModelParams(
        meta["num_users"],
        meta["num_items"],
        meta["dim"],
        meta["sharing"],
        tuple(meta["heads"]),
        meta["seed"],
        tensors,
        version=int(meta["params_version"]),
    )
    return params, adam, meta.get("extra", {})
