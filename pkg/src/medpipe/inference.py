"""Prediction reporting, reduced-feature retraining, and image detection.

Tabular predictions serialize to `row,prediction[,probability]` CSV. Image
inference delegates to a pluggable detection client, draws one-pixel box
outlines on copies of the inputs, and tabulates detections as CSV.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import requests
from PIL import Image, ImageDraw

from .errors import ClientUnavailable
from .explain import AttributionSummary, TOP_FEATURES_LIMIT
from .gbm import TASK_CLASSIFICATION, BoostedModel, GbmConfig, matrix_from_table, train_gbm
from .ingest import IMAGE_MIMES, FileArtifact
from .matching import ImageRoute
from .tabular import TabularDataset, format_cell

logger = logging.getLogger(__name__)

DETECTION_CSV_HEADER = "image,x_min,y_min,x_max,y_max,label,score"


@dataclass(frozen=True)
class PredictionRow:
    index: int
    inputs_digest: str
    prediction: float
    probability: float | None = None


@dataclass(frozen=True)
class PredictionReport:
    task: str
    rows: tuple[PredictionRow, ...]
    attributions: AttributionSummary | None = None

    def __post_init__(self) -> None:
        if self.attributions is not None:
            known = {r.index for r in self.rows}
            stray = set(self.attributions.per_row) - known
            if stray:
                raise ValueError(f"attribution rows {sorted(stray)} not in report")

    @property
    def top_features(self) -> list[tuple[str, float]]:
        if self.attributions is None:
            return []
        return self.attributions.top_features[:TOP_FEATURES_LIMIT]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.task == TASK_CLASSIFICATION:
            writer.writerow(["row", "prediction", "probability"])
            for r in self.rows:
                writer.writerow(
                    [r.index, format_cell(r.prediction), format_cell(r.probability)]
                )
        else:
            writer.writerow(["row", "prediction"])
            for r in self.rows:
                writer.writerow([r.index, format_cell(r.prediction)])
        return buf.getvalue()


def _row_digest(values: np.ndarray) -> str:
    payload = ",".join(format_cell(float(v)) for v in values)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def predict(
    model: BoostedModel,
    table: TabularDataset,
    row_indices: list[int] | None = None,
) -> PredictionReport:
    """Row-aligned predictions; classification adds a logistic probability."""
    X = matrix_from_table(table, list(model.feature_names))
    indices = list(range(X.shape[0])) if row_indices is None else list(row_indices)
    if len(indices) != X.shape[0]:
        raise ValueError(
            f"row_indices labels {len(indices)} rows but the table has {X.shape[0]}"
        )
    margins = model.margins(X)
    rows = []
    if model.task == TASK_CLASSIFICATION:
        probs = model.probabilities(X)
        for pos, idx in enumerate(indices):
            rows.append(
                PredictionRow(
                    index=idx,
                    inputs_digest=_row_digest(X[pos]),
                    prediction=float(probs[pos] >= 0.5),
                    probability=float(probs[pos]),
                )
            )
    else:
        for pos, idx in enumerate(indices):
            rows.append(
                PredictionRow(
                    index=idx, inputs_digest=_row_digest(X[pos]), prediction=float(margins[pos])
                )
            )
    return PredictionReport(task=model.task, rows=tuple(rows))


def retrain_top_k(
    model: BoostedModel,
    table: TabularDataset,
    target: str,
    k: int = 10,
    ranking: list[tuple[str, float]] | None = None,
    config: GbmConfig = GbmConfig(),
) -> tuple[BoostedModel, dict]:
    """Retrain on the k most influential features; report old/new holdout loss."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if ranking is None:
        from .explain import permutation_importance

        ranking = permutation_importance(model, table, target, seed=config.seed)
    keep = [name for name, _ in ranking[:k]]
    retrained = train_gbm(table, target, config, feature_names=keep)
    report = {
        "features": keep,
        "old_holdout_loss": model.holdout_loss,
        "new_holdout_loss": retrained.holdout_loss,
    }
    return retrained, report


# --- Image inference ----------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max
    label: str
    score: float


class DetectionClient(Protocol):
    def detect(self, artifact: FileArtifact, model_id: str) -> list[Detection]:
        """May raise ClientUnavailable."""
        ...


@dataclass
class ScriptedDetectionClient:
    """Test double: fixed detections per image name ('' key = every image)."""

    detections: dict[str, list[Detection]] = field(default_factory=dict)

    def detect(self, artifact: FileArtifact, model_id: str) -> list[Detection]:
        if artifact.name in self.detections:
            return list(self.detections[artifact.name])
        return list(self.detections.get("", []))


@dataclass(frozen=True)
class RemoteDetectionClient:
    """POST /detect with a base64 image and model id; JSON detections back."""

    url: str
    timeout: float = 30.0

    def detect(self, artifact: FileArtifact, model_id: str) -> list[Detection]:
        payload = {
            "image": base64.b64encode(artifact.data).decode("ascii"),
            "model": model_id,
        }
        try:
            resp = requests.post(
                f"{self.url.rstrip('/')}/detect", json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ClientUnavailable(f"detect request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ClientUnavailable(f"detect endpoint returned {resp.status_code}")
        try:
            records = resp.json()["detections"]
            return [
                Detection(
                    box=tuple(int(v) for v in r["box"]),
                    label=str(r["label"]),
                    score=float(r["score"]),
                )
                for r in records
            ]
        except (ValueError, KeyError, TypeError) as exc:
            raise ClientUnavailable(f"malformed detect response: {exc}") from exc


def _validate_box(det: Detection, width: int, height: int) -> str | None:
    x_min, y_min, x_max, y_max = det.box
    if not (x_min < x_max and y_min < y_max):
        return f"degenerate box {det.box}"
    if not (0 <= x_min and 0 <= y_min and x_max <= width and y_max <= height):
        return f"box {det.box} outside {width}x{height}"
    if not 0.0 <= det.score <= 1.0:
        return f"score {det.score} outside [0, 1]"
    return None


def _outline_color(img: Image.Image):
    bands = len(img.getbands())
    if bands == 1:
        return 255
    if img.mode == "RGBA":
        return (255, 0, 0, 255)
    return (255, 0, 0) + (0,) * (bands - 3)


@dataclass(frozen=True)
class ImageInferenceResult:
    annotated: tuple[FileArtifact, ...]
    csv_text: str
    rejected: tuple[str, ...]  # audit notes for client rows that failed validation


def infer_image(
    images: list[FileArtifact], route: ImageRoute, detector: DetectionClient
) -> ImageInferenceResult:
    """Detect on every image; draw valid boxes as 1px outlines; tabulate CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DETECTION_CSV_HEADER.split(","))
    annotated: list[FileArtifact] = []
    rejected: list[str] = []
    for artifact in images:
        if artifact.mime not in IMAGE_MIMES:
            raise ValueError(f"infer_image needs PNG/JPEG, got {artifact.mime!r}")
        detections = detector.detect(artifact, route.model_id)
        with Image.open(io.BytesIO(artifact.data)) as img:
            img.load()
            valid: list[Detection] = []
            for det in detections:
                problem = _validate_box(det, img.width, img.height)
                if problem:
                    note = f"{artifact.name}: rejected detection ({problem})"
                    rejected.append(note)
                    logger.warning("%s", note)
                    continue
                valid.append(det)
            if not valid:
                annotated.append(artifact)
            else:
                draw = ImageDraw.Draw(img)
                color = _outline_color(img)
                for det in valid:
                    x_min, y_min, x_max, y_max = det.box
                    draw.rectangle(
                        (x_min, y_min, x_max - 1, y_max - 1), outline=color, width=1
                    )
                out = io.BytesIO()
                img.save(out, format="PNG" if artifact.mime == "image/png" else "JPEG")
                annotated.append(
                    FileArtifact(
                        name=artifact.name,
                        data=out.getvalue(),
                        mime=artifact.mime,
                        depth=artifact.depth,
                    )
                )
            for det in valid:
                writer.writerow(
                    [
                        artifact.name,
                        det.box[0],
                        det.box[1],
                        det.box[2],
                        det.box[3],
                        det.label,
                        format_cell(det.score),
                    ]
                )
    return ImageInferenceResult(
        annotated=tuple(annotated), csv_text=buf.getvalue(), rejected=tuple(rejected)
    )
