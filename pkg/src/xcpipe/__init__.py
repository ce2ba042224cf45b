"""Extreme multi-label classification for short text.

A staged pipeline: token embeddings pretrained on a clustered-label
surrogate task, hard-negative shortlists mined with small-world graph
indices, spectrally constrained residual feature transfer, one-vs-all
classifiers trained over shortlists only, an optional re-ranker, and
log-time fused prediction, plus the ranking metrics and an empirical
verifier for the feature-drift guarantees.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    DatasetStats,
    SparseVector,
    compute_stats,
    parse_xc_file,
    serialize_xc,
    synth_dataset,
    train_test_split,
)
from .clustering import (
    ClusterTree,
    MetaLabelMap,
    balanced_2means_split,
    build_cluster_tree,
    compute_centroids,
    estimate_correlation,
    make_meta_labels,
    select_frequent_labels,
)
from .nn import (
    AdamState,
    ResidualBlock,
    adam_step,
    apply_dropout,
    embed_bag,
    logistic_loss_and_grads,
    residual_forward,
)
from .hnsw import HnswIndex, build_hnsw
from .shortlist import (
    LabelRepresentatives,
    RouteCaps,
    Shortlist,
    build_random_shortlists,
    build_shortlists,
    embed_corpus,
    label_representatives,
    shortlist_overlap,
    shortlist_recall,
)
from .surrogate import IntermediateModel, SurrogateConfig, init_embeddings, train_surrogate
from .extreme import ExtremeConfig, ExtremeModel, per_step_cost_audit, train_extreme
from .reranker import RerankerTrainSet, mine_mispredictions, train_reranker
from .predictor import (
    PredictConfig,
    Prediction,
    PredictorState,
    ensemble_average,
    predict,
    predict_batch,
)
from .metrics import (
    PropensityModel,
    evaluate,
    ndcg_at_k,
    precision_at_k,
    propensities,
    psndcg_at_k,
    psp_at_k,
    quantile_breakdown,
)
from .bounds import (
    check_cosine_bounds,
    check_feature_bound,
    check_intermediate_bounds,
    check_model_bounds,
    run_randomized_suite,
    shortlist_overlap_vs_lambda,
)
from .pipeline import DEFAULT_CONFIG, ModelBundle, load_config, run
