"""Causal delta embeddings on a synthetic interventional world."""

from .evalsuite import (
    MetricsReport,
    PrototypeTable,
    accuracy,
    compute_prototypes,
    delta_variance,
    evaluate,
    generalization_gap,
    knn_classify,
    prototype_similarity_matrix,
    transfer_similarity,
)
from .losses import DeltaBatch, LossConfig, ce_loss, l1_loss, supcon_loss, total_loss
from .model import (
    CdeModel,
    EncoderConfig,
    TrainHyper,
    classify,
    delta,
    encode,
    forward_pair,
    init_model,
    patch_deltas,
    topk_aggregate,
    train,
)
from .world import (
    DatasetSplit,
    GroundTruthDelta,
    InterventionPair,
    LatentState,
    Renderer,
    WorldConfig,
    apply_intervention,
    make_splits,
    oracle_delta,
    render,
    sample_latents,
)

__version__ = "0.1.0"
