"""Joint multi-head training with consensus targets and weight balancing.

One epoch looks like:

  for each batch of (user, pos, neg) triples
      compute every head's own loss (plus, after warm-up, alpha times the
      consensus-learning loss) and its gradients
      combine head gradients with the current loss weights, take one Adam
      step, then let the balancer adjust the weights for the next batch
  every ``snapshot_period`` epochs, snapshot all head rankings into the
  queue and regenerate the consensus lists once the queue is full

Warm-up lasts queue_size * snapshot_period epochs: heads train on their own
losses only while the queue fills, so the first consensus is built from
(and then taught to) reasonably trained heads.  Early stopping watches
validation recall of the consensus (or of the single head in single mode).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .balancing import BalanceState, balance_step, relative_ratio
from .consensus import (
    ConsensusError,
    ConsensusList,
    ConsensusSettings,
    SnapshotQueue,
    generate_consensus,
    rank_items,
    take_snapshot,
)
from .data import InteractionSet, SplitDataset, TrainBatch, sample_batches
from .evaluation import consensus_topn, evaluate_ranking
from .model import (
    HEADS,
    AdamState,
    ModelParams,
    apply_sgd,
    encode,
    init_params,
    matrix_from_caches,
    score_matrix,
    score_triples,
)
from .objectives import loss_cf_a, loss_cf_b, loss_cf_c, loss_cf_d, multinomial_nll
from .ranking_loss import consensus_learning_loss

__all__ = [
    "TrainerError",
    "TrainConfig",
    "TrainHistory",
    "HeadBest",
    "TrainResult",
    "train",
    "infer_target",
    "infer_consensus",
]

MODES = ("concf", "single")


class TrainerError(RuntimeError):
    """Training aborted (non-finite loss or inconsistent state)."""


@dataclass
class TrainConfig:
    """Everything that determines a training run, seeds included."""

    heads: tuple = HEADS
    mode: str = "concf"
    dim: int = 64
    sharing: str = "embedding_only"
    learning_rate: float = 0.01
    batch_size: int = 1024
    max_epochs: int = 500
    patience: int = 20
    alpha: float = 0.01  # weight of the consensus-learning term
    top_n: int = 50  # consensus target prefix and validation cutoff
    temperature: float = 10.0
    list_length: int | None = None  # consensus list length, default 2 * top_n
    snapshot_period: int = 20
    queue_size: int = 5
    snapshot_size: int = 300
    use_consistency: bool = True  # False: rank-only consensus ablation
    balancing: bool = True
    balance_lr: float = 0.025
    weight_total: float = 1.0
    margin: float = 1.0
    multinomial_columns: bool = True  # item-side direction of the softmax head
    validate_every: int = 1
    trace_batches: bool = False  # keep per-batch loss/weight records
    seed: int = 0

    def __post_init__(self):
        self.heads = tuple(self.heads)
        self.validate()

    @property
    def warmup_epochs(self) -> int:
        return self.queue_size * self.snapshot_period

    def consensus_settings(self) -> ConsensusSettings:
        return ConsensusSettings(
            top_n=self.top_n,
            temperature=self.temperature,
            list_length=self.list_length,
            snapshot_size=self.snapshot_size,
            use_consistency=self.use_consistency,
        )

    def validate(self) -> None:
        heads = tuple(self.heads)
        if not heads or len(set(heads)) != len(heads) or any(h not in HEADS for h in heads):
            raise ValueError(f"heads must be a non-empty subset of {HEADS}, got {heads}")
        self.heads = tuple(h for h in HEADS if h in heads)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "single" and len(self.heads) != 1:
            raise ValueError("single mode trains exactly one head")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("dim", "batch_size", "max_epochs", "patience", "top_n",
                     "snapshot_period", "queue_size", "snapshot_size", "validate_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0 or self.temperature <= 0 or self.weight_total <= 0:
            raise ValueError("learning_rate, temperature and weight_total must be positive")
        if self.snapshot_size < self.top_n:
            raise ValueError(
                f"snapshot_size {self.snapshot_size} < top_n {self.top_n}: "
                "snapshots must cover the consensus prefix"
            )
        if self.list_length is not None and self.list_length < self.top_n:
            raise ValueError("list_length must be at least top_n")
        if self.mode == "concf" and self.warmup_epochs > self.max_epochs:
            raise ValueError(
                f"warm-up of queue_size*snapshot_period = {self.warmup_epochs} epochs "
                f"exceeds max_epochs {self.max_epochs}"
            )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build a config from string-ish key/value pairs (CLI, config files).

        Unknown keys are an error; values are coerced to the field types.
        """
        spec = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in spec:
                raise ValueError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(spec))}"
                )
            kwargs[key] = _coerce(key, raw)
        return cls(**kwargs)


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key == "heads":
        return tuple(part.strip().upper() for part in text.replace(",", " ").split())
    if key in ("mode", "sharing"):
        return text
    if key == "list_length":
        return None if text.lower() in ("none", "") else int(text)
    low = text.lower()
    if low in ("true", "false", "yes", "no", "on", "off"):
        return low in ("true", "yes", "on")
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError as exc:
        raise ValueError(f"cannot parse value {raw!r} for config key {key!r}") from exc


@dataclass
class TrainHistory:
    """Per-epoch log of losses, weights and validation metrics."""

    heads: tuple
    records: list = field(default_factory=list)
    batch_trace: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("nan")
    stopped_epoch: int = -1

    def columns(self):
        cols = ["epoch", "seconds", "total_loss"]
        cols += [f"cf_{h}" for h in self.heads]
        cols += [f"cl_{h}" for h in self.heads]
        cols += [f"lambda_{h}" for h in self.heads]
        cols += [f"val_{h}" for h in self.heads]
        cols.append("val_consensus")
        return cols

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            cols = self.columns()
            writer.writerow(cols)
            for rec in self.records:
                writer.writerow(["" if rec.get(c) is None else rec.get(c) for c in cols])

    def to_json(self, path) -> None:
        payload = {
            "heads": list(self.heads),
            "best_epoch": self.best_epoch,
            "best_metric": None if np.isnan(self.best_metric) else self.best_metric,
            "stopped_epoch": self.stopped_epoch,
            "epochs": self.records,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


@dataclass
class HeadBest:
    """Best validation checkpoint of one head."""

    epoch: int = -1
    metric: float = -np.inf
    params: ModelParams | None = None


@dataclass
class TrainResult:
    params: ModelParams  # parameters of the best validated epoch
    queue: SnapshotQueue  # final queue (consensus inference needs it)
    history: TrainHistory
    head_best: dict
    consensus: ConsensusList | None
    balance: BalanceState
    adam: AdamState


def _epoch_rng(seed: int, epoch: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(epoch)]))


def _pair_head_loss(params, head, batch: TrainBatch, margin: float):
    ts = score_triples(params, head, batch.users, batch.pos_items, batch.neg_items)
    k = len(batch)
    if head == "A":
        loss, d_pos, d_neg = loss_cf_a(ts.pos_scores, ts.neg_scores)
        return loss, ts.backward(d_pos, d_neg)
    if head == "B":
        loss, d_pos, d_neg = loss_cf_b(ts.pos_scores, ts.neg_scores, margin)
        return loss, ts.backward(d_pos, d_neg)
    labels = np.concatenate([np.ones(k), np.zeros(k)])
    if head == "C":
        probs = np.concatenate([ts.pos_scores, ts.neg_scores])
        logits = np.concatenate([ts.pos_logits, ts.neg_logits])
        loss, d_logit = loss_cf_c(probs, labels, logits=logits)
        return loss, ts.backward(d_logit[:k], d_logit[k:], wrt="logit")
    scores = np.concatenate([ts.pos_scores, ts.neg_scores])
    loss, d_score = loss_cf_d(scores, labels)
    return loss, ts.backward(d_score[:k], d_score[k:])


def _multinomial_loss(params, train: InteractionSet, batch: TrainBatch,
                      include_columns: bool, row_chunk: int = 256):
    """Softmax head loss over batch-user rows and batch-item columns."""
    grads: dict = {}
    loss = 0.0
    item_cache = encode(params, "E", "item", np.arange(params.num_items))
    row_users = np.unique(batch.users)
    for start in range(0, row_users.size, row_chunk):
        chunk = np.asarray(row_users[start : start + row_chunk], dtype=np.int64)
        user_cache = encode(params, "E", "user", chunk)
        ms = matrix_from_caches(params, "E", user_cache, item_cache)
        targets = np.zeros(ms.scores.shape)
        for r, u in enumerate(chunk):
            targets[r, train.items_of(u)] = 1.0
        part, d_logits = multinomial_nll(ms.scores, targets)
        loss += part
        ms.backward(d_logits, into=grads)
    if include_columns:
        col_items = np.unique(batch.pos_items)
        user_cache = encode(params, "E", "user", np.arange(params.num_users))
        for start in range(0, col_items.size, row_chunk):
            chunk = np.asarray(col_items[start : start + row_chunk], dtype=np.int64)
            ms = matrix_from_caches(
                params, "E", user_cache, encode(params, "E", "item", chunk)
            )
            targets = np.zeros((chunk.size, params.num_users))
            for r, i in enumerate(chunk):
                targets[r, train.users_of(i)] = 1.0
            part, d_logits = multinomial_nll(ms.scores.T, targets)
            loss += part
            ms.backward(d_logits.T, into=grads)
    return loss, grads


def _head_loss(params, config: TrainConfig, train, batch, head, consensus, apply_cl):
    if head == "E":
        cf_loss, grads = _multinomial_loss(params, train, batch, config.multinomial_columns)
    else:
        cf_loss, grads = _pair_head_loss(params, head, batch, config.margin)
    cl_loss = 0.0
    if apply_cl:
        cl_loss, cl_grads = consensus_learning_loss(
            params, head, batch.users, consensus, config.top_n
        )
        for name, g in cl_grads.items():
            if name in grads:
                grads[name] += config.alpha * g
            else:
                grads[name] = config.alpha * g
    return cf_loss, cl_loss, grads


def _embedding_grad_norm(params, head, grads) -> float:
    total = 0.0
    for name in set(params.embedding_names(head)):
        g = grads.get(name)
        if g is not None:
            total += float(np.vdot(g, g))
    return float(np.sqrt(total))


def _snapshot_topn(snapshot, head, n):
    items = snapshot.items[head][:, :n].astype(np.int64)
    below = np.arange(n)[None, :] < snapshot.lengths[head][:, None]
    return np.where(below, items, -1)


def train(config: TrainConfig, split: SplitDataset) -> TrainResult:
    """Run the full training loop; returns best parameters plus artifacts.

    The best epoch is chosen by validation recall@top_n of the consensus
    (single mode: of the head); per-head bests are tracked on the side.  If
    the validation set is empty, validation and early stopping are skipped
    and the final parameters are returned.
    """
    config.validate()
    train_set = split.train
    params = init_params(
        train_set.num_users, train_set.num_items, config.dim,
        config.sharing, config.seed, config.heads,
    )
    adam = AdamState.for_params(params)
    state = BalanceState.create(
        config.heads,
        enabled=config.balancing and len(config.heads) > 1,
        learning_rate=config.balance_lr,
        total=config.weight_total,
    )
    settings = config.consensus_settings()
    queue = SnapshotQueue(config.queue_size, config.snapshot_period)
    consensus: ConsensusList | None = None
    history = TrainHistory(config.heads)
    single = config.mode == "single"
    can_validate = split.val.num_pairs > 0
    best = HeadBest()
    head_best = {h: HeadBest() for h in config.heads}
    best_params = None
    stale = 0

    for epoch in range(config.max_epochs):
        tick = time.perf_counter()
        epoch_cf = {h: 0.0 for h in config.heads}
        epoch_cl = {h: 0.0 for h in config.heads}
        epoch_total = 0.0
        apply_cl = (
            not single
            and config.alpha > 0
            and epoch >= config.warmup_epochs
            and consensus is not None
        )
        rng = _epoch_rng(config.seed, epoch)
        for b, batch in enumerate(sample_batches(train_set, config.batch_size, rng)):
            losses, grads_by_head = {}, {}
            for h in config.heads:
                cf, cl, grads = _head_loss(
                    params, config, train_set, batch, h, consensus, apply_cl
                )
                loss = cf + config.alpha * cl
                if not np.isfinite(loss):
                    raise TrainerError(
                        f"non-finite loss for head {h} at epoch {epoch} batch {b}"
                    )
                losses[h] = loss
                grads_by_head[h] = grads
                epoch_cf[h] += cf
                epoch_cl[h] += cl
            if state.initial_losses is None:
                state.record_initial(losses)
            weights = dict(state.weights)  # weights from the previous step
            total_loss = sum(weights[h] * losses[h] for h in config.heads)
            epoch_total += total_loss
            if config.trace_batches:
                history.batch_trace.append(
                    {"epoch": epoch, "batch": b, "losses": dict(losses),
                     "weights": weights, "total": total_loss}
                )
            total_grads: dict = {}
            for h in config.heads:
                w = weights[h]
                for name, g in grads_by_head[h].items():
                    if name in total_grads:
                        total_grads[name] += w * g
                    else:
                        total_grads[name] = w * g
            if state.enabled:
                norms = {
                    h: _embedding_grad_norm(params, h, grads_by_head[h])
                    for h in config.heads
                }
                gamma = relative_ratio(losses, state.initial_losses)
                balance_step(state, norms, gamma)
            adam = apply_sgd(params, total_grads, config.learning_rate, adam)

        # end of epoch: real snapshot on period boundaries, probe otherwise
        snap = None
        if not single and epoch % config.snapshot_period == 0:
            snap = take_snapshot(params, train_set, epoch, settings.snapshot_size)
            queue.push(snap)
            if queue.full:
                consensus = generate_consensus(queue, settings)

        validate_now = can_validate and epoch % config.validate_every == 0
        per_head_val, cons_val = {}, None
        if validate_now:
            if snap is None:
                probe_epoch = (
                    queue.latest.epoch + queue.period if queue.snapshots else 0
                )
                snap = take_snapshot(
                    params, train_set, probe_epoch, settings.snapshot_size
                )
            for h in config.heads:
                per_head_val[h] = evaluate_ranking(
                    _snapshot_topn(snap, h, config.top_n), split.val
                ).recall
                hb = head_best[h]
                if per_head_val[h] > hb.metric:
                    head_best[h] = HeadBest(epoch, per_head_val[h], params.copy())
            if not single:
                if queue.snapshots and snap is queue.snapshots[-1]:
                    # period boundary: the fresh consensus already reflects snap
                    current = consensus
                else:
                    probe = queue.copy()
                    probe.push(snap)
                    current = generate_consensus(probe, settings) if probe.full else None
                if current is not None:
                    cons_val = evaluate_ranking(
                        consensus_topn(current, config.top_n), split.val
                    ).recall
            metric = per_head_val[config.heads[0]] if single else cons_val
            # consensus selection starts after warm-up: earlier consensus is
            # untrained-to and would tick the patience on a flat metric
            selectable = single or epoch >= config.warmup_epochs
            if metric is not None and selectable:
                if metric > best.metric:
                    best = HeadBest(epoch, metric, None)
                    best_params = params.copy()
                    stale = 0
                else:
                    stale += 1

        seconds = time.perf_counter() - tick
        record = {"epoch": epoch, "seconds": round(seconds, 4),
                  "total_loss": epoch_total}
        for h in config.heads:
            record[f"cf_{h}"] = epoch_cf[h]
            record[f"cl_{h}"] = epoch_cl[h]
            record[f"lambda_{h}"] = state.weights[h]
            record[f"val_{h}"] = per_head_val.get(h)
        record["val_consensus"] = cons_val
        history.records.append(record)
        history.stopped_epoch = epoch
        if validate_now and stale >= config.patience:
            break

    history.best_epoch = best.epoch
    history.best_metric = best.metric if best_params is not None else float("nan")
    return TrainResult(
        params=best_params if best_params is not None else params,
        queue=queue,
        history=history,
        head_best=head_best,
        consensus=consensus,
        balance=state,
        adam=adam,
    )


def infer_target(params: ModelParams, head: str, user: int,
                 train: InteractionSet, top_n: int = 50) -> np.ndarray:
    """Deploy one head: its top-n unobserved items for the user."""
    row = score_matrix(params, head, [user]).scores[0]
    return rank_items(
        row, exclude=train.items_of(user), m=top_n, label=f"head {head}, user {user}"
    )


def infer_consensus(
    params: ModelParams,
    queue: SnapshotQueue,
    train: InteractionSet,
    top_n: int = 50,
    settings: ConsensusSettings | None = None,
) -> np.ndarray:
    """Deploy the consensus: refresh the queue with a snapshot of the final
    parameters, regenerate, and return every user's top-n as a padded matrix.

    Pass settings with ``use_consistency=False`` for the rank-only variant.
    """
    if not queue.snapshots:
        raise ConsensusError("queue never filled: training was too short")
    settings = ConsensusSettings(top_n=top_n) if settings is None else settings
    probe = queue.copy()
    probe.push(
        take_snapshot(
            params, train, probe.latest.epoch + probe.period, settings.snapshot_size
        )
    )
    return consensus_topn(generate_consensus(probe, settings), top_n)
