"""Deterministic clinical data pipeline: ingest, anonymize, route, preprocess, infer."""

from .anonymize import (
    MASK_TOKEN,
    MaskPolicy,
    PiiFinding,
    PiiKind,
    mask_table,
    scan_table,
)
from .config import EngineConfig, config_from_document, load_config_file
from .embedding import DIM, FallbackEmbedder, RemoteEmbedder, cosine, embed
from .errors import MedpipeError, OverridesRejected, StageFailure
from .gbm import BoostedModel, GbmConfig, train_gbm
from .explain import permutation_importance, shapley_exact
from .inference import PredictionReport, infer_image, predict, retrain_top_k
from .ingest import (
    FileArtifact,
    detect_mime,
    load_artifact,
    parse_tabular,
    summarize_types,
    unpack_recursive,
)
from .matching import MatchResult, greedy_match, route_image, select_model, similarity_matrix
from .pipeline import (
    CANONICAL_ORDER,
    AuditEvent,
    PipelineContext,
    StageId,
    TickClock,
    audit_to_jsonl,
    new_context,
    run_pipeline,
)
from .preprocess import (
    ColumnType,
    PreprocessingPlan,
    apply_edits,
    apply_transform,
    execute_plan,
    infer_column_type,
    profile_columns,
    recommend,
)
from .registry import ModelDatabase, ModelDescriptor, load_registry, parse_registry
from .tabular import TabularDataset

__version__ = "0.1.0"

__all__ = [
    "AuditEvent",
    "BoostedModel",
    "CANONICAL_ORDER",
    "ColumnType",
    "DIM",
    "EngineConfig",
    "FallbackEmbedder",
    "FileArtifact",
    "GbmConfig",
    "MASK_TOKEN",
    "MaskPolicy",
    "MatchResult",
    "MedpipeError",
    "ModelDatabase",
    "ModelDescriptor",
    "OverridesRejected",
    "PiiFinding",
    "PiiKind",
    "PipelineContext",
    "PredictionReport",
    "PreprocessingPlan",
    "RemoteEmbedder",
    "StageFailure",
    "StageId",
    "TabularDataset",
    "TickClock",
    "apply_edits",
    "apply_transform",
    "audit_to_jsonl",
    "config_from_document",
    "cosine",
    "detect_mime",
    "embed",
    "execute_plan",
    "greedy_match",
    "infer_column_type",
    "infer_image",
    "load_artifact",
    "load_config_file",
    "load_registry",
    "mask_table",
    "new_context",
    "parse_registry",
    "parse_tabular",
    "permutation_importance",
    "predict",
    "profile_columns",
    "recommend",
    "retrain_top_k",
    "route_image",
    "run_pipeline",
    "scan_table",
    "select_model",
    "shapley_exact",
    "similarity_matrix",
    "summarize_types",
    "train_gbm",
    "unpack_recursive",
]
