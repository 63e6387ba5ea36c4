"""Seven-stage pipeline state machine with an append-only audit trail.

Stages run in canonical order, each appending exactly one event. The first
failure stops the run; the failure is carried on the context, never raised.
With the tick clock, the fallback embedder, and scripted clients, two runs
over identical input and config produce byte-identical audit lines.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Protocol

from . import preprocess
from .anonymize import PiiFinding, apply_findings, redact_image, scan_table
from .config import EngineConfig
from .errors import ClientUnavailable, MedpipeError, OrderViolation, StageFailure
from .explain import (
    MAX_EXACT_FEATURES,
    AttributionSummary,
    permutation_importance,
    rank_by_mean_abs,
    sample_background,
    shapley_exact,
)
from .gbm import BoostedModel, holdout_split, matrix_from_table, train_gbm
from .inference import ImageInferenceResult, PredictionReport, infer_image, predict
from .ingest import (
    IMAGE_MIMES,
    MIME_ZIP,
    TABULAR_MIMES,
    FileArtifact,
    TypeSummary,
    detect_mime,
    parse_tabular,
    summarize_types,
    unpack_recursive,
)
from .matching import ImageRoute, MatchResult, route_image, select_model
from .preprocess import ExecutionResult, PreprocessingPlan, profile_columns
from .registry import ModelDatabase, ModelDescriptor, load_registry
from .tabular import TabularDataset

logger = logging.getLogger(__name__)

MODE_TABULAR = "Tabular"
MODE_IMAGE = "Image"


class StageId(str, Enum):
    INGESTION_CLASSIFIER = "IngestionClassifier"
    INGESTION_ANONYMIZER = "IngestionAnonymizer"
    INGESTION_SELECTOR = "IngestionSelector"
    INGESTION_FEATURE_MATCHER = "IngestionFeatureMatcher"
    PREPROCESSING_RECOMMENDER = "PreprocessingRecommender"
    PREPROCESSING_IMPLEMENTOR = "PreprocessingImplementor"
    MODEL_INFERENCER = "ModelInferencer"


CANONICAL_ORDER: tuple[StageId, ...] = tuple(StageId)
_STAGE_INDEX = {stage: i for i, stage in enumerate(CANONICAL_ORDER)}


class Outcome(str, Enum):
    OK = "Ok"
    SKIPPED = "Skipped"
    FAILED = "Failed"


def _rfc3339(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


class Clock(Protocol):
    def now(self) -> str: ...


@dataclass
class TickClock:
    """Deterministic clock: fixed epoch, one step per call."""

    start: datetime = datetime(2000, 1, 1, tzinfo=timezone.utc)
    step_seconds: int = 1
    _ticks: int = field(default=0, repr=False)

    def now(self) -> str:
        stamp = self.start + timedelta(seconds=self._ticks * self.step_seconds)
        self._ticks += 1
        return _rfc3339(stamp)


class SystemClock:
    def now(self) -> str:
        return _rfc3339(datetime.now(timezone.utc))


def build_clock(kind: str) -> Clock:
    return SystemClock() if kind == "system" else TickClock()


@dataclass(frozen=True)
class AuditEvent:
    stage: StageId
    started_at: str
    ended_at: str
    outcome: Outcome
    detail: str
    payload_digest: str

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "stage": self.stage.value,
                "started_at": self.started_at,
                "ended_at": self.ended_at,
                "outcome": self.outcome.value,
                "detail": self.detail,
                "payload_digest": self.payload_digest,
            },
            ensure_ascii=False,
        )


def audit_to_jsonl(events: list[AuditEvent]) -> str:
    return "".join(e.to_json_line() + "\n" for e in events)


@dataclass
class PipelineContext:
    """Evolving run state; stages only ever fill fields, never rewrite them."""

    run_id: str
    input: list[FileArtifact]
    mode: str | None = None
    leaves: list[FileArtifact] = field(default_factory=list)
    summary: TypeSummary | None = None
    table: TabularDataset | None = None
    anonymized: "TabularDataset | list[FileArtifact] | None" = None
    findings: list[PiiFinding] = field(default_factory=list)
    headers: "list[str] | tuple[str, str] | None" = None
    route: ImageRoute | None = None
    selected_model: ModelDescriptor | None = None
    match_result: MatchResult | None = None
    filtered_dataset: TabularDataset | None = None
    plan: PreprocessingPlan | None = None
    processed: ExecutionResult | None = None
    trained: BoostedModel | None = None
    report: "PredictionReport | ImageInferenceResult | None" = None
    dataset_bytes: int = 0
    audit: list[AuditEvent] = field(default_factory=list)
    failure: StageFailure | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None and len(self.audit) == len(CANONICAL_ORDER)


def _digest(*parts: "str | bytes") -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8") if isinstance(part, str) else part)
    return h.hexdigest()


_EMPTY_DIGEST = hashlib.sha256(b"").hexdigest()


def new_context(artifacts: list[FileArtifact], config: EngineConfig) -> PipelineContext:
    """run_id is a content hash of inputs plus the deterministic knobs."""
    h = hashlib.sha256()
    for a in artifacts:
        h.update(a.name.encode("utf-8"))
        h.update(a.data)
    h.update(
        json.dumps(
            {
                "seed": config.seed,
                "threshold": config.similarity_threshold,
                "embedder": config.embedder_spec,
            },
            sort_keys=True,
        ).encode("utf-8")
    )
    return PipelineContext(run_id=h.hexdigest()[:12], input=list(artifacts))


def append_audit(ctx: PipelineContext, event: AuditEvent) -> PipelineContext:
    """Events must arrive in canonical stage order, one slot at a time."""
    expected = len(ctx.audit)
    actual = _STAGE_INDEX[event.stage]
    if actual != expected:
        raise OrderViolation(
            f"stage {event.stage.value} recorded at position {expected}; "
            f"canonical position is {actual}"
        )
    ctx.audit.append(event)
    return ctx


# --- Stage bodies ----------------------------------------------------------------
# Each returns (outcome, detail, payload_digest) and fills its context fields.


def _stage_classify(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    leaves: list[FileArtifact] = []
    for artifact in ctx.input:
        artifact.mime = detect_mime(artifact)
        if artifact.mime == MIME_ZIP:
            leaves.extend(
                unpack_recursive(
                    artifact, config.max_archive_depth, config.unpack_limit_bytes
                )
            )
        else:
            leaves.append(artifact)
    ctx.leaves = leaves
    ctx.summary = summarize_types(leaves)
    tabular = [a for a in leaves if a.mime in TABULAR_MIMES]
    images = [a for a in leaves if a.mime in IMAGE_MIMES]
    if len(tabular) > 1:
        raise MedpipeError(
            f"a run is single-document: found {len(tabular)} tabular files"
        )
    if tabular:
        ctx.mode = MODE_TABULAR
        ctx.table = parse_tabular(tabular[0])
        shape = f"{ctx.table.n_cols} columns x {ctx.table.n_rows} rows"
    elif images:
        ctx.mode = MODE_IMAGE
        shape = f"{len(images)} images"
    else:
        raise MedpipeError("no tabular or image data found in input")
    counts = ", ".join(f"{k}={v}" for k, v in ctx.summary.entries.items())
    if ctx.summary.unknown_count:
        counts += f", unknown={ctx.summary.unknown_count}"
    detail = f"mode={ctx.mode}; {shape}; {counts}"
    payload = json.dumps(
        {
            "mode": ctx.mode,
            "entries": ctx.summary.entries,
            "unknown": ctx.summary.unknown_count,
            "leaves": [a.name for a in leaves],
        },
        sort_keys=True,
    )
    return Outcome.OK, detail, _digest(payload)


def _images(ctx: PipelineContext) -> list[FileArtifact]:
    return [a for a in ctx.leaves if a.mime in IMAGE_MIMES]


def _stage_anonymize(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    if ctx.mode == MODE_TABULAR:
        assert ctx.table is not None
        ctx.findings = scan_table(ctx.table, config.mask_policy)
        ctx.anonymized = apply_findings(ctx.table, ctx.findings, config.mask_policy)
        cells = len({(f.column, f.row) for f in ctx.findings})
        detail = f"masked {len(ctx.findings)} findings across {cells} cells"
        payload = ctx.anonymized.to_csv() + json.dumps(
            [f.to_record() for f in ctx.findings], sort_keys=True
        )
        return Outcome.OK, detail, _digest(payload)
    client = config.build_redaction()
    redacted = [redact_image(a, client) for a in _images(ctx)]
    ctx.anonymized = redacted
    detail = f"redacted {len(redacted)} images"
    return Outcome.OK, detail, _digest(*[a.data for a in redacted])


def _stage_select(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    if ctx.mode == MODE_TABULAR:
        assert isinstance(ctx.anonymized, TabularDataset)
        ctx.headers = list(ctx.anonymized.headers)
        detail = f"extracted {len(ctx.headers)} headers"
        return Outcome.OK, detail, _digest(json.dumps(ctx.headers))
    if config.vlm is None:
        raise ClientUnavailable("image routing requires a configured vision client")
    assert isinstance(ctx.anonymized, list)
    ctx.route = route_image(
        ctx.anonymized,
        registry,
        config.vlm,
        thresholds=config.step_thresholds,
        max_attempts=config.max_attempts,
        seed=config.seed,
    )
    ctx.headers = (ctx.route.modality, ctx.route.disease)
    detail = (
        f"modality={ctx.route.modality} disease={ctx.route.disease} "
        f"attempts={ctx.route.attempts}"
    )
    payload = json.dumps(
        {
            "modality": ctx.route.modality,
            "disease": ctx.route.disease,
            "confidences": list(ctx.route.confidences),
            "attempts": ctx.route.attempts,
        },
        sort_keys=True,
    )
    return Outcome.OK, detail, _digest(payload)


def _stage_match(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    if ctx.mode == MODE_TABULAR:
        assert isinstance(ctx.anonymized, TabularDataset)
        embedder = config.build_embedder()
        model, filtered, result = select_model(
            ctx.anonymized,
            registry,
            embedder,
            threshold=config.similarity_threshold,
            global_order=config.global_match,
        )
        ctx.selected_model = model
        ctx.filtered_dataset = filtered
        ctx.match_result = result
        detail = f"selected={model.id} mean_similarity={result.mean_similarity:.4f}"
        return Outcome.OK, detail, _digest(model.id, filtered.to_csv())
    assert ctx.route is not None
    model = registry.get(ctx.route.model_id)
    ctx.selected_model = model
    detail = f"selected={model.id} modality={model.modality}"
    return Outcome.OK, detail, _digest(model.id)


def _stage_recommend(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    if ctx.mode == MODE_IMAGE:
        return (
            Outcome.SKIPPED,
            "image preprocessing is owned by the inference backend",
            _EMPTY_DIGEST,
        )
    assert ctx.filtered_dataset is not None and ctx.selected_model is not None
    ctx.dataset_bytes = sum(len(a.data) for a in ctx.input)
    metas = profile_columns(ctx.filtered_dataset)
    ctx.plan = preprocess.recommend(
        ctx.filtered_dataset,
        metas,
        ctx.selected_model,
        ctx.dataset_bytes,
        user_overrides=config.user_overrides,
        size_gate_bytes=config.size_gate_bytes,
        force_auto=config.force_auto,
    )
    dropped = sorted(
        {s.column for s in ctx.plan.steps if s.kind == preprocess.StepKind.DROP}
    )
    detail = f"mode={ctx.plan.mode.value} steps={len(ctx.plan.steps)}"
    if dropped:
        detail += f" dropped={','.join(dropped)}"
    return Outcome.OK, detail, _digest(json.dumps(ctx.plan.to_dict(), sort_keys=True))


def _stage_implement(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    if ctx.mode == MODE_IMAGE:
        return (
            Outcome.SKIPPED,
            "image preprocessing is owned by the inference backend",
            _EMPTY_DIGEST,
        )
    assert ctx.filtered_dataset is not None and ctx.plan is not None
    ctx.processed = preprocess.execute_plan(ctx.filtered_dataset, ctx.plan)
    out = ctx.processed.table
    detail = (
        f"{ctx.filtered_dataset.n_cols}->{out.n_cols} columns, {out.n_rows} rows"
    )
    payload = out.to_csv() + json.dumps(ctx.processed.fitted, sort_keys=True)
    return Outcome.OK, detail, _digest(payload)


def _subset_rows(table: TabularDataset, indices: list[int]) -> TabularDataset:
    return TabularDataset(
        headers=list(table.headers),
        columns={h: [table.columns[h][i] for i in indices] for h in table.headers},
    )


def _explain_tabular(
    ctx: PipelineContext, config: EngineConfig, val_indices: list[int]
) -> tuple[AttributionSummary | None, str]:
    assert ctx.processed is not None and ctx.trained is not None
    model = ctx.trained
    table = ctx.processed.table
    target = ctx.selected_model.output  # type: ignore[union-attr]
    method = config.explain
    if method == "off":
        return None, "explain=off"
    if method == "shapley" and len(model.feature_names) > MAX_EXACT_FEATURES:
        method = "permutation"
        note = (
            f"explain=permutation (fallback: {len(model.feature_names)} features "
            f"exceed the exact bound {MAX_EXACT_FEATURES})"
        )
    else:
        note = f"explain={method}"
    if method == "shapley":
        background = sample_background(
            table, list(model.feature_names), seed=config.seed
        )
        X = matrix_from_table(table, list(model.feature_names))
        explain_rows = val_indices[: min(3, len(val_indices))]
        per_row = {i: shapley_exact(model, X[i], background) for i in explain_rows}
        return (
            AttributionSummary(
                method="shapley",
                per_row=per_row,
                top_features=rank_by_mean_abs(per_row),
            ),
            note,
        )
    ranking = permutation_importance(model, table, target, seed=config.seed)
    return (
        AttributionSummary(
            method="permutation", per_row={}, top_features=ranking[:10]
        ),
        note,
    )


def _stage_infer(ctx: PipelineContext, config: EngineConfig, registry: ModelDatabase):
    if ctx.mode == MODE_IMAGE:
        if config.detector is None:
            raise ClientUnavailable("image inference requires a configured detector")
        assert isinstance(ctx.anonymized, list) and ctx.route is not None
        result = infer_image(ctx.anonymized, ctx.route, config.detector)
        ctx.report = result
        detections = max(result.csv_text.count("\n") - 1, 0)
        detail = f"detections={detections} rejected={len(result.rejected)}"
        if result.rejected:
            detail += "; " + "; ".join(result.rejected)
        return Outcome.OK, detail, _digest(result.csv_text)
    assert ctx.processed is not None and ctx.selected_model is not None
    table = ctx.processed.table
    target = ctx.selected_model.output
    ctx.trained = train_gbm(table, target, config.gbm)
    _, val_idx = holdout_split(
        table.n_rows, config.gbm.holdout_fraction, config.gbm.seed
    )
    val_indices = sorted(int(i) for i in val_idx)
    holdout = _subset_rows(table, val_indices)
    report = predict(ctx.trained, holdout, row_indices=val_indices)
    attributions, explain_note = _explain_tabular(ctx, config, val_indices)
    if attributions is not None:
        report = PredictionReport(
            task=report.task, rows=report.rows, attributions=attributions
        )
    ctx.report = report
    detail = (
        f"task={ctx.trained.task} rounds={len(ctx.trained.trees)} "
        f"holdout_rows={len(val_indices)} holdout_loss={ctx.trained.holdout_loss:.6f}; "
        f"{explain_note}"
    )
    return Outcome.OK, detail, _digest(report.to_csv())


_STAGES = (
    (StageId.INGESTION_CLASSIFIER, _stage_classify),
    (StageId.INGESTION_ANONYMIZER, _stage_anonymize),
    (StageId.INGESTION_SELECTOR, _stage_select),
    (StageId.INGESTION_FEATURE_MATCHER, _stage_match),
    (StageId.PREPROCESSING_RECOMMENDER, _stage_recommend),
    (StageId.PREPROCESSING_IMPLEMENTOR, _stage_implement),
    (StageId.MODEL_INFERENCER, _stage_infer),
)


def run_pipeline(ctx: PipelineContext, config: EngineConfig) -> PipelineContext:
    """Execute all stages in canonical order; stop at the first failure."""
    if not ctx.input:
        raise ValueError("pipeline input must be non-empty")
    config.validate()
    if config.registry_path is None:
        raise ValueError("config.registry_path is required")
    registry = load_registry(config.registry_path)
    clock = build_clock(config.clock_kind)
    for stage_id, body in _STAGES:
        started = clock.now()
        try:
            outcome, detail, digest = body(ctx, config, registry)
        except Exception as exc:  # a stage failure is an outcome, not a crash
            ended = clock.now()
            append_audit(
                ctx,
                AuditEvent(
                    stage=stage_id,
                    started_at=started,
                    ended_at=ended,
                    outcome=Outcome.FAILED,
                    detail=f"{type(exc).__name__}: {exc}",
                    payload_digest=_EMPTY_DIGEST,
                ),
            )
            ctx.failure = StageFailure(stage_id.value, exc)
            logger.error("stage %s failed: %s", stage_id.value, exc)
            return ctx
        ended = clock.now()
        append_audit(
            ctx,
            AuditEvent(
                stage=stage_id,
                started_at=started,
                ended_at=ended,
                outcome=outcome,
                detail=detail,
                payload_digest=digest,
            ),
        )
    return ctx
