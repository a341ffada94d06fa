"""Consensus learning across heterogeneous one-class CF objectives.

A single model trains five collaborative filtering heads (pairwise, metric,
cross-entropy, squared error, multinomial) jointly; their ranking snapshots
are fused into per-user consensus lists that every head is in turn trained
to reproduce, with gradient-norm balancing keeping the heads in step.
"""

from .balancing import BalanceState, BalancingError, balance_step, relative_ratio
from .consensus import (
    ConsensusError,
    ConsensusList,
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
from .data import (
    DataError,
    InteractionSet,
    SplitDataset,
    TrainBatch,
    load_interactions,
    read_split_manifest,
    sample_batches,
    split_user_history,
    write_split_manifest,
)
from .evaluation import (
    HitSet,
    RankingMetrics,
    complementary_hit_ratio,
    consensus_topn,
    evaluate_ranking,
    hit_set,
    ndcg_at_n,
    pairwise_exclusive_ratio,
    per_matrix,
    rank_all_users,
    recall_at_n,
    user_chr_cdf,
)
from .model import (
    HEADS,
    SHARING_LEVELS,
    AdamState,
    ModelError,
    ModelParams,
    apply_sgd,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score,
    score_batch,
    score_matrix,
    score_triples,
)
from .objectives import (
    loss_cf_a,
    loss_cf_b,
    loss_cf_c,
    loss_cf_d,
    loss_cf_e,
    multinomial_nll,
)
from .ranking_loss import RankingLossError, consensus_learning_loss, topn_log_likelihood
from .synthetic import planted_interactions
from .trainer import (
    TrainConfig,
    TrainerError,
    TrainHistory,
    TrainResult,
    infer_consensus,
    infer_target,
    train,
)

__version__ = "0.1.0"
