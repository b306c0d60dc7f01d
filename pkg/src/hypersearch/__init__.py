"""Personalized product search on a user-query-product interaction hypergraph."""

from .data import (
    InteractionLog,
    QueryVocabulary,
    SyntheticSpec,
    core_filter,
    generate_synthetic,
    load_interactions,
    load_query_words,
    planted_clusters,
    write_interactions,
    write_query_words,
)
from .errors import (
    ConfigError,
    DataError,
    HypersearchError,
    NumericalError,
    SnapshotError,
)
from .evaluation import (
    RankedList,
    RankingMetrics,
    evaluate_split,
    group_positives,
    metrics_at_k,
    rank_products,
    temporal_split,
)
from .hypergraph import (
    Hyperedge,
    Hypergraph,
    NodeId,
    NodeKind,
    build_hypergraph,
    subset_kinds,
)
from .model import (
    EmbeddingState,
    EntityCounts,
    ModelConfig,
    ParameterSet,
    entity_counts,
    forward,
    hyperedge_aggregate,
    init_parameters,
    interaction_features,
    load_snapshot,
    node_aggregate,
    predict,
    query_embedding,
    save_snapshot,
    score_products,
    validate_parameters,
)
from .training import (
    AdamState,
    Hyperparams,
    TrainBatch,
    TrainReport,
    adam_step,
    batch_loss,
    bce_loss,
    compute_gradients,
    finite_difference_gradients,
    fit,
    gradient_check,
    sample_negatives,
)

__version__ = "0.1.0"
