"""Group-shuffling random walk re-ranking for embedding retrieval."""

__version__ = "0.1.0"

from .estimator import GSRWRanker
from .gradients import (
    RWBackwardState,
    baseline_backward,
    finite_diff_oracle,
    head_backward,
    rw_backward,
    softmax_backward,
)
from .head import (
    GroupedAffinities,
    HeadParams,
    compute_affinities,
    load_params,
    pair_score,
    save_params,
    split_groups,
)
from .random_walk import (
    RefinedAffinities,
    RWConfig,
    SolverError,
    group_shuffle,
    normalize,
    permute_gallery,
    rw_closed_form,
    rw_iterative,
)
from .rank_eval import (
    EvalReport,
    RankingResult,
    average_precision,
    cmc_curve,
    evaluate,
    rank,
    rerank_pipeline,
)
from .synthio import (
    EmbeddingRecord,
    EmbeddingSet,
    SynthConfig,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
)
from .trainer import TrainConfig, loss_xent, sample_batch, train, train_step

__all__ = [name for name in dir() if not name.startswith("_")]
