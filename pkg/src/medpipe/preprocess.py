"""Column profiling, rule-based type inference, plan recommendation, execution.

A plan is an ordered list of per-column steps. Execution fits statistics from
the data it sees (imputation from raw values, scaling from imputed values) and
records every fitted parameter so the same transform can be replayed on unseen
rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    EmptyTable,
    InvalidEdit,
    NonNumericUnderScaling,
    OverridesRejected,
    UnknownColumn,
)
from .registry import ModelDescriptor
from .tabular import TabularDataset, format_cell

logger = logging.getLogger(__name__)

DEFAULT_SIZE_GATE_BYTES = 50 * 2**20  # beyond this, user-guided mode is disabled
DEFAULT_ONEHOT_MAX_LEVELS = 20
DEFAULT_LOW_CARDINALITY_CAP = 20
DEFAULT_LOW_CARDINALITY_FRACTION = 0.05
DEFAULT_SHORT_STRING_CAP = 20.0
HIGH_CARDINALITY_FRACTION = 0.8


class ColumnType(str, Enum):
    BINARY = "Binary"
    CATEGORICAL = "Categorical"
    NUMERICAL = "Numerical"
    TEXTUAL = "Textual"


class PlanMode(str, Enum):
    USER_GUIDED = "UserGuided"
    AUTO = "Auto"


class StepKind(str, Enum):
    IMPUTE_MEDIAN = "impute_median"
    IMPUTE_MODE = "impute_mode"
    SCALE_ZSCORE = "scale_zscore"
    SCALE_MINMAX = "scale_minmax"
    ENCODE_ONEHOT = "encode_onehot"
    ENCODE_ORDINAL = "encode_ordinal"
    MAP_BINARY = "map_binary"
    DROP = "drop"


_IMPUTE_KINDS = {StepKind.IMPUTE_MEDIAN, StepKind.IMPUTE_MODE}
_SCALE_KINDS = {StepKind.SCALE_ZSCORE, StepKind.SCALE_MINMAX}
_ENCODE_KINDS = {StepKind.ENCODE_ONEHOT, StepKind.ENCODE_ORDINAL, StepKind.MAP_BINARY}


@dataclass(frozen=True)
class ColumnMetadata:
    name: str
    storage_type: str  # integer | real | string
    null_count: int
    unique_count: int
    row_count: int
    min: float | None = None
    max: float | None = None
    mean_str_len: float | None = None


@dataclass(frozen=True)
class PlanStep:
    column: str
    kind: StepKind
    params: dict = field(default_factory=dict)


@dataclass
class PreprocessingPlan:
    steps: list[PlanStep]
    mode: PlanMode
    target: str | None = None

    def steps_for(self, column: str) -> list[PlanStep]:
        return [s for s in self.steps if s.column == column]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "target": self.target,
            "steps": [
                {"column": s.column, "kind": s.kind.value, "params": dict(s.params)}
                for s in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessingPlan":
        try:
            mode = PlanMode(doc["mode"])
            steps = [
                PlanStep(
                    column=s["column"],
                    kind=StepKind(s["kind"]),
                    params=dict(s.get("params") or {}),
                )
                for s in doc["steps"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidEdit(f"malformed plan document: {exc}") from exc
        return cls(steps=steps, mode=mode, target=doc.get("target"))


def _is_null(value) -> bool:
    return value is None or (isinstance(value, str) and value.strip() == "")


def _parse_number(value) -> float | None:
    if isinstance(value, float):
        return value
    if isinstance(value, (int, np.floating)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            return None
    return None


def profile_columns(table: TabularDataset) -> list[ColumnMetadata]:
    """One record per column; empty strings count as nulls."""
    if table.n_cols == 0 or table.n_rows == 0:
        raise EmptyTable("cannot profile an empty table")
    metas = []
    for name in table.headers:
        values = [v for v in table.columns[name] if not _is_null(v)]
        null_count = table.n_rows - len(values)
        numbers = [_parse_number(v) for v in values]
        if values and all(n is not None for n in numbers):
            nums = [float(n) for n in numbers]  # type: ignore[arg-type]
            storage = "integer" if all(n == int(n) for n in nums) else "real"
            metas.append(
                ColumnMetadata(
                    name=name,
                    storage_type=storage,
                    null_count=null_count,
                    unique_count=len(set(nums)),
                    row_count=table.n_rows,
                    min=min(nums),
                    max=max(nums),
                )
            )
        else:
            rendered = [format_cell(v) for v in values]
            metas.append(
                ColumnMetadata(
                    name=name,
                    storage_type="string",
                    null_count=null_count,
                    unique_count=len(set(rendered)),
                    row_count=table.n_rows,
                    mean_str_len=(
                        float(np.mean([len(r) for r in rendered])) if rendered else None
                    ),
                )
            )
    return metas


def infer_column_type(
    meta: ColumnMetadata,
    low_cardinality_cap: int = DEFAULT_LOW_CARDINALITY_CAP,
    low_cardinality_fraction: float = DEFAULT_LOW_CARDINALITY_FRACTION,
    short_string_cap: float = DEFAULT_SHORT_STRING_CAP,
) -> ColumnType:
    """First matching rule wins; rule order removes overlaps."""
    numeric = meta.storage_type in ("integer", "real")
    low_card = max(low_cardinality_cap, low_cardinality_fraction * meta.row_count)
    if meta.unique_count == 2:
        return ColumnType.BINARY
    if numeric and meta.unique_count > HIGH_CARDINALITY_FRACTION * meta.row_count:
        return ColumnType.NUMERICAL
    if numeric and meta.unique_count <= low_card:
        return ColumnType.CATEGORICAL
    if (
        not numeric
        and meta.unique_count <= low_card
        and meta.mean_str_len is not None
        and meta.mean_str_len <= short_string_cap
    ):
        return ColumnType.CATEGORICAL
    if numeric:
        return ColumnType.NUMERICAL
    return ColumnType.TEXTUAL


def _default_steps(
    meta: ColumnMetadata, ctype: ColumnType, is_target: bool, onehot_max_levels: int
) -> list[PlanStep]:
    col = meta.name
    if ctype == ColumnType.BINARY:
        return [
            PlanStep(col, StepKind.IMPUTE_MODE),
            PlanStep(col, StepKind.MAP_BINARY),
        ]
    if ctype == ColumnType.NUMERICAL:
        steps = [PlanStep(col, StepKind.IMPUTE_MEDIAN)]
        if not is_target:  # the target is never rescaled
            steps.append(PlanStep(col, StepKind.SCALE_ZSCORE))
        return steps
    if ctype == ColumnType.CATEGORICAL:
        encode = (
            StepKind.ENCODE_ONEHOT
            if meta.unique_count <= onehot_max_levels and not is_target
            else StepKind.ENCODE_ORDINAL
        )
        return [PlanStep(col, StepKind.IMPUTE_MODE), PlanStep(col, encode)]
    if is_target:
        # A textual target cannot be dropped; ordinal codes keep it trainable.
        return [PlanStep(col, StepKind.IMPUTE_MODE), PlanStep(col, StepKind.ENCODE_ORDINAL)]
    return [PlanStep(col, StepKind.DROP)]


def recommend(
    table: TabularDataset,
    metas: list[ColumnMetadata],
    selected_model: ModelDescriptor | None,
    dataset_bytes: int,
    user_overrides: dict | None = None,
    size_gate_bytes: int = DEFAULT_SIZE_GATE_BYTES,
    onehot_max_levels: int = DEFAULT_ONEHOT_MAX_LEVELS,
    force_auto: bool = False,
) -> PreprocessingPlan:
    """Per-type default steps, optionally merged with user overrides.

    Above the size gate the plan is fully automatic and overrides are refused.
    """
    by_name = {m.name: m for m in metas}
    missing = [h for h in table.headers if h not in by_name]
    if missing:
        raise UnknownColumn(f"metadata missing for columns: {missing}")
    auto = force_auto or dataset_bytes > size_gate_bytes
    if auto and user_overrides:
        raise OverridesRejected("SizeGate")
    target = selected_model.output if selected_model else None
    steps: list[PlanStep] = []
    for header in table.headers:
        meta = by_name[header]
        ctype = infer_column_type(meta)
        column_steps = _default_steps(meta, ctype, header == target, onehot_max_levels)
        if user_overrides and header in user_overrides:
            column_steps = _parse_override(header, user_overrides[header])
        if any(s.kind == StepKind.DROP for s in column_steps):
            logger.info("column %r (%s) will be dropped", header, ctype.value)
        steps.extend(column_steps)
    if user_overrides:
        unknown = set(user_overrides) - set(table.headers)
        if unknown:
            raise InvalidEdit(f"overrides reference unknown columns: {sorted(unknown)}")
    plan = PreprocessingPlan(
        steps=steps, mode=PlanMode.AUTO if auto else PlanMode.USER_GUIDED, target=target
    )
    validate_plan(plan, table)
    return plan


def _parse_override(column: str, raw_steps) -> list[PlanStep]:
    if not isinstance(raw_steps, list):
        raise InvalidEdit(f"override for {column!r} must be a list of steps")
    out = []
    for raw in raw_steps:
        if not isinstance(raw, dict) or "kind" not in raw:
            raise InvalidEdit(f"override step for {column!r} needs a 'kind'")
        try:
            kind = StepKind(raw["kind"])
        except ValueError as exc:
            raise InvalidEdit(f"unknown step kind {raw['kind']!r}") from exc
        out.append(PlanStep(column, kind, dict(raw.get("params") or {})))
    return out


def apply_edits(
    plan: PreprocessingPlan, edits: dict, table: TabularDataset
) -> PreprocessingPlan:
    """Replace the edited columns' steps wholesale, then revalidate."""
    if not isinstance(edits, dict):
        raise InvalidEdit("edits must map column name to a step list")
    unknown = set(edits) - set(table.headers)
    if unknown:
        raise InvalidEdit(f"edits reference unknown columns: {sorted(unknown)}")
    new_steps: list[PlanStep] = []
    seen: set[str] = set()
    for step in plan.steps:
        if step.column in edits:
            if step.column not in seen:
                new_steps.extend(_parse_override(step.column, edits[step.column]))
                seen.add(step.column)
            continue
        new_steps.append(step)
    for column in edits:
        if column not in seen:  # column had no steps before (e.g. was dropped)
            new_steps.extend(_parse_override(column, edits[column]))
    edited = PreprocessingPlan(steps=new_steps, mode=plan.mode, target=plan.target)
    validate_plan(edited, table)
    return edited


def validate_plan(plan: PreprocessingPlan, table: TabularDataset) -> None:
    nulls = {
        h: any(_is_null(v) for v in table.columns[h]) for h in table.headers
    }
    per_column: dict[str, list[StepKind]] = {}
    for step in plan.steps:
        if step.column not in table.columns:
            raise UnknownColumn(f"plan step references unknown column {step.column!r}")
        per_column.setdefault(step.column, []).append(step.kind)
    for column, kinds in per_column.items():
        if sum(k in _IMPUTE_KINDS for k in kinds) > 1:
            raise InvalidEdit(f"column {column!r} has more than one imputation step")
        if sum(k in _SCALE_KINDS for k in kinds) > 1:
            raise InvalidEdit(f"column {column!r} has more than one scaling step")
        if StepKind.DROP in kinds and len(kinds) > 1:
            raise InvalidEdit(f"column {column!r} mixes drop with other steps")
        impute_at = [i for i, k in enumerate(kinds) if k in _IMPUTE_KINDS]
        other_at = [i for i, k in enumerate(kinds) if k in _SCALE_KINDS | _ENCODE_KINDS]
        if impute_at and other_at and impute_at[0] > min(other_at):
            raise InvalidEdit(f"column {column!r} imputes after transforming")
        if nulls[column] and StepKind.DROP not in kinds and not impute_at:
            raise InvalidEdit(
                f"column {column!r} has nulls but no imputation step"
            )
        if plan.target == column:
            if any(k in _SCALE_KINDS for k in kinds):
                raise InvalidEdit(f"target column {column!r} must not be scaled")
            if StepKind.DROP in kinds:
                raise InvalidEdit(f"target column {column!r} must not be dropped")
            if StepKind.ENCODE_ONEHOT in kinds:
                raise InvalidEdit(f"target column {column!r} must stay single-column")


@dataclass
class ExecutionResult:
    table: TabularDataset
    # One record per executed step: {"column", "kind", "params"}; params hold
    # every fitted statistic needed to replay the transform on unseen rows.
    fitted: list[dict]


def execute_plan(table: TabularDataset, plan: PreprocessingPlan) -> ExecutionResult:
    """Apply steps in plan order; fit statistics as each step runs."""
    validate_plan(plan, table)
    work = {h: list(table.columns[h]) for h in table.headers}
    order = list(table.headers)
    fitted: list[dict] = []
    for step in plan.steps:
        params = _fit_step(step, work)
        fitted.append({"column": step.column, "kind": step.kind.value, "params": params})
        _apply_step(step.column, step.kind, params, work, order)
    out = TabularDataset(headers=order, columns={h: work[h] for h in order})
    return ExecutionResult(table=out, fitted=fitted)


def apply_transform(table: TabularDataset, fitted: list[dict]) -> TabularDataset:
    """Replay recorded steps on a new table using only stored parameters."""
    work = {h: list(table.columns[h]) for h in table.headers}
    order = list(table.headers)
    for record in fitted:
        kind = StepKind(record["kind"])
        column = record["column"]
        if column not in work:
            raise UnknownColumn(f"transform references unknown column {column!r}")
        _apply_step(column, kind, record["params"], work, order)
    return TabularDataset(headers=order, columns={h: work[h] for h in order})


def _numeric_column(column: str, values: list, kind: StepKind) -> list[float]:
    nums = []
    for v in values:
        n = _parse_number(v)
        if n is None:
            raise NonNumericUnderScaling(
                f"column {column!r}: {kind.value} needs numeric values, got {v!r}"
            )
        nums.append(n)
    return nums


def _fit_step(step: PlanStep, work: dict[str, list]) -> dict:
    if step.column not in work:
        raise UnknownColumn(f"plan step references unknown column {step.column!r}")
    values = work[step.column]
    present = [v for v in values if not _is_null(v)]
    kind = step.kind
    if kind == StepKind.IMPUTE_MEDIAN:
        if not present:
            raise InvalidEdit(f"column {step.column!r} is all-null; median undefined")
        nums = _numeric_column(step.column, present, kind)
        return {"value": float(np.median(nums))}
    if kind == StepKind.IMPUTE_MODE:
        if not present:
            raise InvalidEdit(f"column {step.column!r} is all-null; mode undefined")
        rendered = [format_cell(v) for v in present]
        counts: dict[str, int] = {}
        for r in rendered:
            counts[r] = counts.get(r, 0) + 1
        top = max(counts.values())
        return {"value": sorted(r for r, c in counts.items() if c == top)[0]}
    if kind in _SCALE_KINDS:
        nums = _numeric_column(step.column, values, kind)  # nulls already imputed
        if kind == StepKind.SCALE_ZSCORE:
            mean = float(np.mean(nums))
            std = float(np.std(nums, ddof=1)) if len(nums) > 1 else 0.0
            return {"mean": mean, "std": std, "degenerate": std == 0.0}
        lo, hi = float(min(nums)), float(max(nums))
        return {"min": lo, "max": hi, "degenerate": lo == hi}
    if kind in _ENCODE_KINDS:
        levels = sorted({format_cell(v) for v in values})
        if kind == StepKind.MAP_BINARY and len(levels) != 2:
            raise InvalidEdit(
                f"column {step.column!r} has {len(levels)} distinct values; "
                f"map_binary needs exactly 2"
            )
        return {"levels": levels}
    if kind == StepKind.DROP:
        return {}
    raise InvalidEdit(f"unknown step kind {kind!r}")


def _apply_step(
    column: str, kind: StepKind, params: dict, work: dict[str, list], order: list[str]
) -> None:
    values = work[column]
    if kind == StepKind.IMPUTE_MEDIAN:
        fill = float(params["value"])
        out = []
        for v in values:
            if _is_null(v):
                out.append(fill)
            else:
                n = _parse_number(v)
                if n is None:
                    raise NonNumericUnderScaling(
                        f"column {column!r}: impute_median over non-numeric {v!r}"
                    )
                out.append(n)
        work[column] = out
    elif kind == StepKind.IMPUTE_MODE:
        fill = params["value"]
        work[column] = [fill if _is_null(v) else format_cell(v) for v in values]
    elif kind == StepKind.SCALE_ZSCORE:
        nums = _numeric_column(column, values, kind)
        if params["degenerate"]:
            work[column] = [0.0 for _ in nums]
        else:
            mean, std = params["mean"], params["std"]
            work[column] = [(n - mean) / std for n in nums]
    elif kind == StepKind.SCALE_MINMAX:
        nums = _numeric_column(column, values, kind)
        if params["degenerate"]:
            work[column] = [0.0 for _ in nums]
        else:
            lo, hi = params["min"], params["max"]
            work[column] = [(n - lo) / (hi - lo) for n in nums]
    elif kind == StepKind.ENCODE_ONEHOT:
        levels = params["levels"]
        position = order.index(column)
        rendered = [format_cell(v) for v in values]
        new_names = []
        for level in levels:
            name = f"{column}={level}"
            if name in work:
                raise InvalidEdit(f"one-hot column name {name!r} collides")
            work[name] = [1.0 if r == level else 0.0 for r in rendered]
            new_names.append(name)
        order[position : position + 1] = new_names
        del work[column]
    elif kind == StepKind.ENCODE_ORDINAL:
        codes = {level: float(i) for i, level in enumerate(params["levels"])}
        work[column] = [codes.get(format_cell(v), -1.0) for v in values]
    elif kind == StepKind.MAP_BINARY:
        lo, hi = params["levels"]
        mapping = {lo: 0.0, hi: 1.0}
        work[column] = [mapping.get(format_cell(v), -1.0) for v in values]
    elif kind == StepKind.DROP:
        del work[column]
        order.remove(column)
    else:
        raise InvalidEdit(f"unknown step kind {kind!r}")
