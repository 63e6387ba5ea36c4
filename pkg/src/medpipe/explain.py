"""Feature attribution: exact Shapley values and permutation importance.

Shapley values are computed by full subset enumeration against a background
sample, in the model's margin space; the method refuses more than 12 features.
Permutation importance is the model-agnostic fallback for wider tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TooManyFeatures
from .gbm import TASK_CLASSIFICATION, BoostedModel, log_loss, squared_loss, matrix_from_table
from .tabular import TabularDataset

MAX_EXACT_FEATURES = 12
TOP_FEATURES_LIMIT = 10
DEFAULT_BACKGROUND_ROWS = 64
DEFAULT_REPEATS = 5


def sample_background(
    table: TabularDataset, feature_names: list[str], limit: int = DEFAULT_BACKGROUND_ROWS, seed: int = 0
) -> np.ndarray:
    """Seeded background sample of at most `limit` rows, as a feature matrix."""
    X = matrix_from_table(table, list(feature_names))
    if X.shape[0] <= limit:
        return X
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.permutation(X.shape[0])[:limit])
    return X[idx]


def shapley_exact(
    model: BoostedModel, row: np.ndarray, background: np.ndarray | TabularDataset
) -> dict[str, float]:
    """phi_i = sum over S not containing i of |S|!(n-|S|-1)!/n! * (v(S+i) - v(S)).

    v(S) fixes features in S to the row's values and marginalizes the rest
    over the background rows; outputs are margins, so efficiency reads
    sum(phi) = f(row) - mean_background f.
    """
    if isinstance(background, TabularDataset):
        background = matrix_from_table(background, list(model.feature_names))
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise ValueError("background must be a non-empty 2-D matrix")
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    n = len(model.feature_names)
    if row.shape[0] != n or background.shape[1] != n:
        raise ValueError("row/background width must equal the model's feature count")
    if n > MAX_EXACT_FEATURES:
        raise TooManyFeatures(
            f"{n} features exceed the exact enumeration bound "
            f"{MAX_EXACT_FEATURES}; use permutation importance"
        )

    b = background.shape[0]
    masks = 1 << n
    # One big matrix: block m holds the background with masked features fixed.
    stacked = np.tile(background, (masks, 1))
    for i in range(n):
        hit = np.asarray([(m >> i) & 1 for m in range(masks)], dtype=bool)
        block_rows = np.repeat(hit, b)
        stacked[block_rows, i] = row[i]
    values = model.margins(stacked).reshape(masks, b).mean(axis=1)

    fact = [math.factorial(k) for k in range(n + 1)]
    weights = [fact[s] * fact[n - s - 1] / fact[n] for s in range(n)]
    phi = np.zeros(n)
    for mask in range(masks):
        s = bin(mask).count("1")
        for i in range(n):
            if mask & (1 << i):
                continue
            phi[i] += weights[s] * (values[mask | (1 << i)] - values[mask])
    return {name: float(phi[i]) for i, name in enumerate(model.feature_names)}


def _model_loss(model: BoostedModel, X: np.ndarray, y: np.ndarray) -> float:
    margins = model.margins(X)
    if model.task == TASK_CLASSIFICATION:
        return log_loss(y, margins)
    return squared_loss(y, margins)


def permutation_importance(
    model: BoostedModel,
    table: TabularDataset,
    target: str,
    seed: int = 0,
    repeats: int = DEFAULT_REPEATS,
) -> list[tuple[str, float]]:
    """Loss increase after shuffling each feature; descending, seeded, stable."""
    if target not in table.columns:
        raise ValueError(f"target column {target!r} not in table")
    X = matrix_from_table(table, list(model.feature_names))
    y = np.asarray([float(v) for v in table.columns[target]])
    base = _model_loss(model, X, y)
    rng = np.random.default_rng(seed)
    importances = []
    for i, name in enumerate(model.feature_names):
        increases = []
        for _ in range(repeats):
            shuffled = X.copy()
            shuffled[:, i] = shuffled[rng.permutation(X.shape[0]), i]
            increases.append(_model_loss(model, shuffled, y) - base)
        importances.append((name, float(np.mean(increases))))
    return sorted(importances, key=lambda kv: -kv[1])


@dataclass(frozen=True)
class AttributionSummary:
    method: str  # shapley | permutation
    # row index -> {feature: phi}; empty for permutation importance
    per_row: dict[int, dict[str, float]]
    top_features: list[tuple[str, float]]

    def __post_init__(self) -> None:
        if len(self.top_features) > TOP_FEATURES_LIMIT:
            raise ValueError(
                f"top_features capped at {TOP_FEATURES_LIMIT}, got {len(self.top_features)}"
            )


def rank_by_mean_abs(per_row: dict[int, dict[str, float]]) -> list[tuple[str, float]]:
    """Mean |phi| across explained rows, descending, capped at the top-10 limit."""
    if not per_row:
        return []
    names = list(next(iter(per_row.values())).keys())
    means = [
        (name, float(np.mean([abs(phis[name]) for phis in per_row.values()])))
        for name in names
    ]
    return sorted(means, key=lambda kv: -kv[1])[:TOP_FEATURES_LIMIT]
