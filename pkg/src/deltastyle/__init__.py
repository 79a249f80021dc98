"""Delta-space style editing: text-free training of a coarse-to-fine mapper
from embedding differences to style-space edit directions, with
relevance-based disentanglement filtering and a synthetic oracle world."""

from .delta_mapper import (
    MICRO_CLIP_DIM,
    MICRO_LAYOUT,
    PAPER_CLIP_DIM,
    PAPER_LAYOUT,
    TINY_CLIP_DIM,
    TINY_LAYOUT,
    MapperParams,
    StyleLayout,
    init_mapper_params,
    join_style,
    mapper_backward,
    mapper_forward,
    naive_forward,
    split_style,
)
from .embedding_store import (
    Checkpoint,
    EmbeddingDataset,
    TextTable,
    ValidationReport,
    read_checkpoint,
    read_dataset,
    read_datasets,
    read_relevance,
    read_text_table,
    validate,
    validate_relevance,
    validate_text_table,
    write_checkpoint,
    write_dataset,
    write_relevance,
    write_text_table,
)
from .evaluation import (
    compare_modes,
    cross_source_variance,
    direction_accuracy,
    export_projection,
    gap_stats,
    leakage,
)
from .inference import PromptTemplate, build_text_delta, edit, interpolate
from .numerics import AdamState, adam_step, cosine_sim, grad_check, init_adam
from .relevance import (
    FilterConfig,
    RelevanceMatrix,
    apply_filter,
    beta_for_clip_dim,
    channel_relevance,
    estimate_relevance,
)
from .synthetic_world import (
    SyntheticWorld,
    WorldConfig,
    fit_delta_baseline,
    gen_dataset,
    gen_world,
    image_embed,
    oracle_direction,
    text_embed,
)
from .training import TrainConfig, TrainHistory, compute_loss, sample_pair, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Checkpoint", "EmbeddingDataset", "FilterConfig",
    "MapperParams", "PromptTemplate", "RelevanceMatrix", "StyleLayout",
    "SyntheticWorld", "TextTable", "TrainConfig", "TrainHistory",
    "ValidationReport", "WorldConfig",
    "MICRO_CLIP_DIM", "MICRO_LAYOUT", "PAPER_CLIP_DIM", "PAPER_LAYOUT",
    "TINY_CLIP_DIM", "TINY_LAYOUT",
    "adam_step", "apply_filter", "beta_for_clip_dim", "build_text_delta",
    "channel_relevance", "compare_modes", "compute_loss", "cosine_sim",
    "cross_source_variance", "direction_accuracy", "edit",
    "estimate_relevance", "export_projection", "gap_stats", "gen_dataset",
    "gen_world", "grad_check", "image_embed", "init_adam",
    "init_mapper_params", "interpolate", "join_style", "leakage",
    "mapper_backward", "mapper_forward", "naive_forward", "oracle_direction",
    "fit_delta_baseline",
    "read_checkpoint", "read_dataset", "read_datasets", "read_relevance",
    "read_text_table",
    "sample_pair", "split_style", "text_embed", "train", "validate",
    "validate_relevance", "validate_text_table", "write_checkpoint",
    "write_dataset", "write_relevance", "write_text_table",
]
