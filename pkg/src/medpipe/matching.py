"""Header-to-model matching and image routing.

Tabular path: embed dataset headers and each model's required headers, build a
cosine similarity matrix, assign greedily above a strict threshold, then rank
eligible models. Image path: a confidence-gated modality-then-disease decision
loop over a pluggable vision-language client.
"""

from __future__ import annotations

import base64
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import requests

from .embedding import Embedder, cosine, embed
from .errors import ClientUnavailable, NoEligibleModel, RoutingInconclusive
from .ingest import FileArtifact
from .registry import ModelDatabase, ModelDescriptor
from .tabular import TabularDataset

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6
DEFAULT_STEP_THRESHOLDS = (0.5, 0.5)
DEFAULT_MAX_ATTEMPTS = 3


@dataclass(frozen=True)
class MatchResult:
    model_id: str
    # required header -> (dataset column, similarity); injective over columns
    assignment: dict[str, tuple[str, float]]
    mean_similarity: float
    eligible: bool


def similarity_matrix(
    required: list[str], dataset_headers: list[str], embedder: Embedder
) -> np.ndarray:
    """|required| x |dataset_headers| cosine similarities."""
    texts = list(dict.fromkeys(list(required) + list(dataset_headers)))
    vectors = dict(zip(texts, embed(texts, embedder)))
    sims = np.empty((len(required), len(dataset_headers)), dtype=np.float64)
    for i, req in enumerate(required):
        for j, col in enumerate(dataset_headers):
            sims[i, j] = cosine(vectors[req], vectors[col])
    return sims


def greedy_match(
    dataset_headers: list[str],
    model: ModelDescriptor,
    sims: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    global_order: bool = False,
) -> MatchResult:
    """Assign each required header its best unused column scoring above threshold.

    Default iterates required headers in the model's declared order; the
    global variant consumes (required, column) pairs by descending score.
    Ineligibility is a value, never an error.
    """
    sims = np.asarray(sims, dtype=np.float64)
    required = list(model.headers)
    if sims.shape != (len(required), len(dataset_headers)):
        raise ValueError(
            f"similarity matrix shape {sims.shape} does not match "
            f"{len(required)}x{len(dataset_headers)}"
        )
    assignment: dict[str, tuple[str, float]] = {}
    used: set[int] = set()
    if global_order:
        pairs = sorted(
            ((i, j) for i in range(len(required)) for j in range(len(dataset_headers))),
            key=lambda ij: (-sims[ij], ij),
        )
        done: set[int] = set()
        for i, j in pairs:
            if i in done or j in used or sims[i, j] <= threshold:
                continue
            assignment[required[i]] = (dataset_headers[j], float(sims[i, j]))
            done.add(i)
            used.add(j)
        assignment = {r: assignment[r] for r in required if r in assignment}
    else:
        for i, req in enumerate(required):
            best_j = -1
            best_score = threshold  # strict: a score equal to threshold never assigns
            for j in range(len(dataset_headers)):
                if j in used:
                    continue
                if sims[i, j] > best_score:
                    best_score = sims[i, j]
                    best_j = j
            if best_j >= 0:
                assignment[req] = (dataset_headers[best_j], float(sims[i, best_j]))
                used.add(best_j)
    scores = [s for _, s in assignment.values()]
    return MatchResult(
        model_id=model.id,
        assignment=assignment,
        mean_similarity=float(np.mean(scores)) if scores else 0.0,
        eligible=len(assignment) == len(required),
    )


# Ranker hook: higher is better; production may consult an LLM, default is
# plain mean similarity so the suite stays reproducible.
Ranker = Callable[[ModelDescriptor, MatchResult], float]


def _default_ranker(model: ModelDescriptor, result: MatchResult) -> float:
    return result.mean_similarity


def match_all(
    table_headers: list[str],
    registry: ModelDatabase,
    embedder: Embedder,
    threshold: float = DEFAULT_THRESHOLD,
    global_order: bool = False,
) -> list[tuple[ModelDescriptor, MatchResult]]:
    results = []
    for model in registry.table_models:
        sims = similarity_matrix(list(model.headers), table_headers, embedder)
        results.append(
            (model, greedy_match(table_headers, model, sims, threshold, global_order))
        )
    return results


def select_model(
    table: TabularDataset,
    registry: ModelDatabase,
    embedder: Embedder,
    threshold: float = DEFAULT_THRESHOLD,
    ranker: Ranker | None = None,
    global_order: bool = False,
) -> tuple[ModelDescriptor, TabularDataset, MatchResult]:
    """Pick the best eligible model and return the filtered, renamed dataset."""
    if not registry.table_models:
        raise ValueError("registry has no table models")
    ranker = ranker or _default_ranker
    results = match_all(list(table.headers), registry, embedder, threshold, global_order)
    eligible = [(m, r) for m, r in results if r.eligible]
    if not eligible:
        raise NoEligibleModel(
            f"none of {len(results)} table models fully matched above {threshold}"
        )
    # Rank desc by score; ties fall to fewer required headers, then model id.
    model, result = min(
        eligible, key=lambda mr: (-ranker(mr[0], mr[1]), len(mr[0].headers), mr[0].id)
    )
    source_columns = [result.assignment[req][0] for req in model.headers]
    renames = {result.assignment[req][0]: req for req in model.headers}
    filtered = table.select(source_columns, renames=renames)
    logger.info("selected model %s (mean similarity %.4f)", model.id, result.mean_similarity)
    return model, filtered, result


# --- Image routing ---------------------------------------------------------------


@dataclass(frozen=True)
class ImageRoute:
    modality: str
    disease: str
    confidences: tuple[float, float]  # (modality step, disease step)
    attempts: int
    model_id: str


class VisionLanguageClient(Protocol):
    """Two-step visual classifier; may raise ClientUnavailable."""

    def classify_modality(
        self, artifact: FileArtifact, options: list[str]
    ) -> tuple[str, float]: ...

    def classify_disease(
        self, artifact: FileArtifact, captions: list[str]
    ) -> tuple[str, float]: ...


@dataclass
class ScriptedVisionClient:
    """Test double replaying (modality, conf), (disease, conf) per attempt."""

    responses: list[tuple[tuple[str, float], tuple[str, float]]] = field(
        default_factory=list
    )
    calls: int = 0

    def _current(self) -> tuple[tuple[str, float], tuple[str, float]]:
        idx = min(max(self.calls - 1, 0), len(self.responses) - 1)
        return self.responses[idx]

    def classify_modality(
        self, artifact: FileArtifact, options: list[str]
    ) -> tuple[str, float]:
        # One modality call starts one attempt; both steps replay its entry.
        self.calls += 1
        return self._current()[0]

    def classify_disease(
        self, artifact: FileArtifact, captions: list[str]
    ) -> tuple[str, float]:
        return self._current()[1]


@dataclass(frozen=True)
class RemoteVisionClient:
    """POST /classify with a base64 image, step name, and options."""

    url: str
    timeout: float = 30.0

    def _classify(
        self, artifact: FileArtifact, step: str, options: list[str]
    ) -> tuple[str, float]:
        payload = {
            "image": base64.b64encode(artifact.data).decode("ascii"),
            "step": step,
            "options": options,
        }
        try:
            resp = requests.post(
                f"{self.url.rstrip('/')}/classify", json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ClientUnavailable(f"classify request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ClientUnavailable(f"classify endpoint returned {resp.status_code}")
        try:
            body = resp.json()
            return str(body["label"]), float(body["confidence"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ClientUnavailable(f"malformed classify response: {exc}") from exc

    def classify_modality(
        self, artifact: FileArtifact, options: list[str]
    ) -> tuple[str, float]:
        return self._classify(artifact, "modality", options)

    def classify_disease(
        self, artifact: FileArtifact, captions: list[str]
    ) -> tuple[str, float]:
        return self._classify(artifact, "disease", captions)


def find_image_model(
    registry: ModelDatabase, modality: str, disease: str
) -> ModelDescriptor | None:
    """Exact modality match, disease as a case-insensitive caption substring."""
    candidates = [
        m
        for m in registry.image_models
        if m.modality == modality and disease.lower() in m.caption.lower()
    ]
    return candidates[0] if candidates else None  # image_models sorted by id


def route_image(
    images: list[FileArtifact],
    registry: ModelDatabase,
    vlm: VisionLanguageClient,
    thresholds: tuple[float, float] = DEFAULT_STEP_THRESHOLDS,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    seed: int = 0,
) -> ImageRoute:
    """Confidence-gated modality-then-disease routing over random images.

    Any low-confidence step or failed registry lookup burns one attempt and
    re-draws a random image.
    """
    if not images:
        raise ValueError("route_image requires at least one image")
    if not registry.image_models:
        raise ValueError("registry has no image models")
    t_mod, t_dis = thresholds
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    rng = random.Random(seed)
    modality_options = sorted({m.modality for m in registry.image_models})
    for attempt in range(1, max_attempts + 1):
        artifact = images[rng.randrange(len(images))]
        modality, mod_conf = vlm.classify_modality(artifact, modality_options)
        if mod_conf < t_mod:
            logger.info("attempt %d: modality confidence %.2f below %.2f", attempt, mod_conf, t_mod)
            continue
        candidates = [m for m in registry.image_models if m.modality == modality]
        if not candidates:
            logger.info("attempt %d: modality %r matches no model", attempt, modality)
            continue
        disease, dis_conf = vlm.classify_disease(artifact, [m.caption for m in candidates])
        if dis_conf < t_dis:
            logger.info("attempt %d: disease confidence %.2f below %.2f", attempt, dis_conf, t_dis)
            continue
        model = find_image_model(registry, modality, disease)
        if model is None:
            logger.info("attempt %d: no model for (%r, %r)", attempt, modality, disease)
            continue
        return ImageRoute(
            modality=modality,
            disease=disease,
            confidences=(float(mod_conf), float(dis_conf)),
            attempts=attempt,
            model_id=model.id,
        )
    raise RoutingInconclusive(f"no confident route after {max_attempts} attempts")
