"""Engine configuration: defaults, TOML file, then flag overrides.

The config owns every tunable the stages consume, plus the pluggable client
objects (embedder, vision, detection, redaction) so tests can inject doubles.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from urllib.parse import urlparse

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .anonymize import MaskPolicy, PiiKind, VisualRedactionClient
from .embedding import Embedder, FallbackEmbedder, RemoteEmbedder
from .errors import ConfigError
from .gbm import GbmConfig
from .inference import DetectionClient, RemoteDetectionClient, ScriptedDetectionClient, Detection
from .matching import (
    DEFAULT_MAX_ATTEMPTS,
    DEFAULT_STEP_THRESHOLDS,
    DEFAULT_THRESHOLD,
    ScriptedVisionClient,
    VisionLanguageClient,
)
from .preprocess import DEFAULT_SIZE_GATE_BYTES

ENV_CONFIG = "MEDPIPE_CONFIG"

EXPLAIN_MODES = ("shapley", "permutation", "off")
CLOCK_KINDS = ("tick", "system")


def _valid_url(url: str) -> bool:
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


@dataclass
class NoopRedactionClient:
    """Default visual redaction: no regions, images pass through unchanged."""

    def detect_regions(self, artifact) -> list[tuple[int, int, int, int]]:
        return []


@dataclass
class EngineConfig:
    registry_path: Path | None = None
    embedder_spec: str = "fallback"  # "fallback" or a base URL
    similarity_threshold: float = DEFAULT_THRESHOLD
    size_gate_bytes: int = DEFAULT_SIZE_GATE_BYTES
    seed: int = 0
    output_dir: Path = Path("out")
    explain: str = "shapley"
    force_auto: bool = False
    global_match: bool = False
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    gbm: GbmConfig = field(default_factory=GbmConfig)
    step_thresholds: tuple[float, float] = DEFAULT_STEP_THRESHOLDS
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    max_archive_depth: int = 8
    unpack_limit_bytes: int = 1 << 30
    clock_kind: str = "tick"
    user_overrides: dict | None = None
    # Pluggable clients; None picks a default at build time.
    vlm: VisionLanguageClient | None = None
    detector: DetectionClient | None = None
    redaction: VisualRedactionClient | None = None

    def validate(self) -> "EngineConfig":
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ConfigError(
                f"similarity threshold must be in (0, 1], got {self.similarity_threshold}"
            )
        if self.embedder_spec != "fallback" and not _valid_url(self.embedder_spec):
            raise ConfigError(f"embedder must be 'fallback' or an http(s) URL, got {self.embedder_spec!r}")
        if self.explain not in EXPLAIN_MODES:
            raise ConfigError(f"explain must be one of {EXPLAIN_MODES}, got {self.explain!r}")
        if self.clock_kind not in CLOCK_KINDS:
            raise ConfigError(f"clock must be one of {CLOCK_KINDS}, got {self.clock_kind!r}")
        if self.size_gate_bytes <= 0 or self.max_archive_depth < 1 or self.unpack_limit_bytes <= 0:
            raise ConfigError("size limits and archive depth must be positive")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if not all(0.0 <= t <= 1.0 for t in self.step_thresholds):
            raise ConfigError(f"step thresholds must lie in [0, 1], got {self.step_thresholds}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        return self

    def build_embedder(self) -> Embedder:
        if self.embedder_spec == "fallback":
            return FallbackEmbedder()
        remote = RemoteEmbedder(url=self.embedder_spec)
        remote.health()  # refuse a sidecar that reports the wrong dimension
        return remote

    def build_redaction(self) -> VisualRedactionClient:
        return self.redaction if self.redaction is not None else NoopRedactionClient()


def _mask_policy_from(doc: dict) -> MaskPolicy:
    policy = MaskPolicy()
    disabled = doc.get("disabled_kinds", [])
    if disabled:
        try:
            off = {PiiKind(k) for k in disabled}
        except ValueError as exc:
            raise ConfigError(f"unknown PII kind in disabled_kinds: {exc}") from exc
        policy = replace(policy, enabled=frozenset(set(PiiKind) - off))
    if "mrn_pattern" in doc:
        policy = replace(policy, mrn_pattern=str(doc["mrn_pattern"]))
    if "mask_whole_cell" in doc:
        policy = replace(policy, mask_whole_cell=bool(doc["mask_whole_cell"]))
    return policy


def _gbm_from(doc: dict) -> GbmConfig:
    cfg = GbmConfig()
    fields = {
        "n_rounds": int,
        "learning_rate": float,
        "max_depth": int,
        "patience": int,
        "holdout_fraction": float,
        "seed": int,
        "task": str,
    }
    updates = {}
    for key, cast in fields.items():
        if key in doc:
            updates[key] = cast(doc[key])
    return replace(cfg, **updates) if updates else cfg


def _clients_from(doc: dict) -> dict:
    out: dict = {}
    vlm = doc.get("vlm")
    if vlm == "mock":
        script = doc.get("vlm_script", [])
        responses = [
            ((str(row[0]), float(row[1])), (str(row[2]), float(row[3])))
            for row in script
        ]
        if not responses:
            raise ConfigError("vlm = 'mock' requires a non-empty vlm_script")
        out["vlm"] = ScriptedVisionClient(responses=responses)
    elif isinstance(vlm, str) and vlm:
        if not _valid_url(vlm):
            raise ConfigError(f"vlm must be 'mock' or an http(s) URL, got {vlm!r}")
        from .matching import RemoteVisionClient

        out["vlm"] = RemoteVisionClient(url=vlm)
    detector = doc.get("detector")
    if detector == "mock":
        boxes = doc.get("detector_boxes", [])
        detections = [
            Detection(
                box=(int(b[0]), int(b[1]), int(b[2]), int(b[3])),
                label=str(b[4]),
                score=float(b[5]),
            )
            for b in boxes
        ]
        out["detector"] = ScriptedDetectionClient(detections={"": detections})
    elif isinstance(detector, str) and detector:
        if not _valid_url(detector):
            raise ConfigError(f"detector must be 'mock' or an http(s) URL, got {detector!r}")
        out["detector"] = RemoteDetectionClient(url=detector)
    return out


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {p} is not valid TOML: {exc}") from exc


def config_from_document(doc: dict, base: EngineConfig | None = None) -> EngineConfig:
    """Layer a parsed TOML document over a base config."""
    cfg = base or EngineConfig()
    updates: dict = {}
    scalar_casts = {
        "registry": ("registry_path", Path),
        "embedder": ("embedder_spec", str),
        "threshold": ("similarity_threshold", float),
        "size_gate_bytes": ("size_gate_bytes", int),
        "seed": ("seed", int),
        "out": ("output_dir", Path),
        "explain": ("explain", str),
        "auto": ("force_auto", bool),
        "global_match": ("global_match", bool),
        "clock": ("clock_kind", str),
        "max_archive_depth": ("max_archive_depth", int),
        "unpack_limit_bytes": ("unpack_limit_bytes", int),
    }
    for key, (attr, cast) in scalar_casts.items():
        if key in doc:
            updates[attr] = cast(doc[key])
    if "mask" in doc:
        updates["mask_policy"] = _mask_policy_from(doc["mask"])
    if "gbm" in doc:
        updates["gbm"] = _gbm_from(doc["gbm"])
    routing = doc.get("routing", {})
    if "thresholds" in routing:
        t = routing["thresholds"]
        updates["step_thresholds"] = (float(t[0]), float(t[1]))
    if "max_attempts" in routing:
        updates["max_attempts"] = int(routing["max_attempts"])
    updates.update(_clients_from(doc.get("clients", {})))
    return replace(cfg, **updates)
