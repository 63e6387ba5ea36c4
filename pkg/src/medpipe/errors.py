"""Exception types raised across the pipeline.

Every recoverable failure mode has its own class so stages and the CLI can
report precise outcomes instead of re-parsing messages.
"""

from __future__ import annotations


class MedpipeError(Exception):
    """Base class for all engine errors."""


# --- ingest ---------------------------------------------------------------

class DepthExceeded(MedpipeError):
    """Archive nesting deeper than the configured maximum."""


class CorruptArchive(MedpipeError):
    """Archive bytes could not be read as a ZIP container."""


class ZipBomb(MedpipeError):
    """Cumulative uncompressed size exceeded the configured limit."""


class RaggedRows(MedpipeError):
    """CSV rows of differing arity beyond tolerance."""


class EmptyTable(MedpipeError):
    """Parsed table has no columns or no data rows."""


class UnsupportedSheet(MedpipeError):
    """XLSX workbook without a readable first worksheet."""


class DuplicateHeader(MedpipeError):
    """Table declares the same column name twice."""


# --- anonymize / clients ---------------------------------------------------

class ClientUnavailable(MedpipeError):
    """A pluggable external client (redaction, VLM, detector) is unreachable."""


# --- embedding / matching --------------------------------------------------

class EmbedderUnavailable(MedpipeError):
    """Remote embedder returned an error or could not be reached."""


class DimensionMismatch(MedpipeError):
    """Embedder returned vectors of the wrong dimension."""


class ZeroVector(MedpipeError):
    """Cosine similarity is undefined for a zero vector."""


class NoEligibleModel(MedpipeError):
    """No registry model had all required headers matched above threshold."""


class RoutingInconclusive(MedpipeError):
    """Image routing failed to produce a confident (modality, disease) pair."""


class RegistryError(MedpipeError):
    """Model database file is malformed or violates its invariants."""


# --- preprocess -------------------------------------------------------------

class OverridesRejected(MedpipeError):
    """User preprocessing overrides refused (e.g. dataset above the size gate)."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class InvalidEdit(MedpipeError):
    """A plan edit references an unknown column or illegal step."""


class UnknownColumn(MedpipeError):
    """Plan step references a column absent from the table."""


class NonNumericUnderScaling(MedpipeError):
    """Scaling step applied to a column with non-numeric values."""


# --- inference ---------------------------------------------------------------

class TargetLeakage(MedpipeError):
    """Target column listed among training features."""


class TooFewRows(MedpipeError):
    """Not enough rows to train."""


class NonBinaryTarget(MedpipeError):
    """Classification requested for a target that is not two-valued 0/1."""


class TooManyFeatures(MedpipeError):
    """Exact Shapley enumeration refused above the feature bound."""


class MissingFeature(MedpipeError):
    """Prediction table lacks a feature the model was trained on."""


class InvalidBox(MedpipeError):
    """Detection client returned a degenerate or out-of-bounds box."""


# --- pipeline ----------------------------------------------------------------

class OrderViolation(MedpipeError):
    """Audit event recorded out of canonical stage order."""


class StageFailure(MedpipeError):
    """A pipeline stage failed; carried as the run outcome, never a crash."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(MedpipeError):
    """Engine configuration failed validation."""
