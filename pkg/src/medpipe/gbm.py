"""Desk-scale gradient-boosted regression trees, written from scratch.

Squared loss for regression, log loss for binary classification. Trees are
fit to pseudo-residuals by exact greedy splitting; classification leaves take
a Newton step. Training holds out a seeded 20% validation split and stops
early when validation loss stalls. A guard drops any tree that would raise
training loss, so training loss is non-increasing by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    MissingFeature,
    NonBinaryTarget,
    TargetLeakage,
    TooFewRows,
)
from .tabular import TabularDataset

logger = logging.getLogger(__name__)

MIN_TRAINING_ROWS = 20
_EPS = 1e-9
_MIN_GAIN = 1e-12

TASK_CLASSIFICATION = "binary_classification"
TASK_REGRESSION = "regression"


@dataclass(frozen=True)
class GbmConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 3
    patience: int = 10
    holdout_fraction: float = 0.2
    seed: int = 0
    task: str = "auto"  # auto | binary_classification | regression


@dataclass(frozen=True)
class TreeNode:
    value: float = 0.0
    feature: int | None = None
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


def _tree_values(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack: list[tuple[TreeNode, np.ndarray]] = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.value
            continue
        mask = X[idx, nd.feature] < nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


@dataclass(frozen=True)
class BoostedModel:
    feature_names: tuple[str, ...]
    task: str
    base_score: float
    learning_rate: float
    trees: tuple[TreeNode, ...]
    # training diagnostics
    train_losses: tuple[float, ...] = ()
    holdout_loss: float = float("nan")
    holdout_fraction: float = 0.2
    seed: int = 0

    def margins(self, X: np.ndarray) -> np.ndarray:
        """Raw score: mean for regression, logit for classification."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != len(self.feature_names):
            raise MissingFeature(
                f"expected {len(self.feature_names)} features, got {X.shape[1]}"
            )
        out = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            out += self.learning_rate * _tree_values(tree, X)
        return out

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        if self.task != TASK_CLASSIFICATION:
            raise NonBinaryTarget("probabilities are defined only for classification")
        return _sigmoid(self.margins(X))

    def outputs(self, X: np.ndarray) -> np.ndarray:
        """Margin for regression, probability for classification."""
        if self.task == TASK_CLASSIFICATION:
            return self.probabilities(X)
        return self.margins(X)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def squared_loss(y: np.ndarray, margin: np.ndarray) -> float:
    return float(np.mean((y - margin) ** 2))


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    p = np.clip(_sigmoid(margin), 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def matrix_from_table(table: TabularDataset, feature_names: list[str]) -> np.ndarray:
    """Row-major float matrix in feature order; absent columns are an error."""
    missing = [f for f in feature_names if f not in table.columns]
    if missing:
        raise MissingFeature(f"table lacks feature columns: {missing}")
    cols = []
    for name in feature_names:
        try:
            cols.append(np.asarray([float(v) for v in table.columns[name]]))
        except (TypeError, ValueError) as exc:
            raise MissingFeature(
                f"feature column {name!r} holds non-numeric values: {exc}"
            ) from exc
    if not cols:
        raise MissingFeature("model has no features")
    return np.column_stack(cols)


def _best_split(X: np.ndarray, res: np.ndarray) -> tuple[float, int, float]:
    """Exact greedy squared-error split; first-best ties keep determinism."""
    n = len(res)
    total = float(res.sum())
    base = total * total / n
    best_gain, best_feature, best_threshold = 0.0, -1, 0.0
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        rs = res[order]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        csum = np.cumsum(rs)[:-1]
        k = np.arange(1, n, dtype=np.float64)
        gains = csum**2 / k + (total - csum) ** 2 / (n - k) - base
        gains[~valid] = -np.inf
        kk = int(np.argmax(gains))
        if gains[kk] > best_gain + _MIN_GAIN:
            best_gain = float(gains[kk])
            best_feature = f
            best_threshold = float((xs[kk] + xs[kk + 1]) / 2.0)
    return best_gain, best_feature, best_threshold


def _leaf_value(res: np.ndarray, hess: np.ndarray | None) -> float:
    if hess is None:
        return float(np.mean(res))
    return float(res.sum() / (hess.sum() + _EPS))  # Newton step for log loss


def _build_tree(
    X: np.ndarray, res: np.ndarray, hess: np.ndarray | None, depth: int, max_depth: int
) -> TreeNode:
    if depth >= max_depth or len(res) < 2:
        return TreeNode(value=_leaf_value(res, hess))
    gain, feature, threshold = _best_split(X, res)
    if feature < 0 or gain <= _MIN_GAIN:
        return TreeNode(value=_leaf_value(res, hess))
    mask = X[:, feature] < threshold
    left = _build_tree(X[mask], res[mask], None if hess is None else hess[mask], depth + 1, max_depth)
    right = _build_tree(X[~mask], res[~mask], None if hess is None else hess[~mask], depth + 1, max_depth)
    return TreeNode(feature=feature, threshold=threshold, left=left, right=right)


def holdout_split(n_rows: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split; validation takes the first fraction of rows."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_rows)
    n_val = max(1, int(round(fraction * n_rows)))
    return perm[n_val:], perm[:n_val]


def train_gbm(
    table: TabularDataset,
    target: str,
    config: GbmConfig = GbmConfig(),
    feature_names: list[str] | None = None,
) -> BoostedModel:
    if target not in table.columns:
        raise MissingFeature(f"target column {target!r} not in table")
    if feature_names is None:
        feature_names = [h for h in table.headers if h != target]
    if target in feature_names:
        raise TargetLeakage(f"target {target!r} listed among training features")
    if table.n_rows < MIN_TRAINING_ROWS:
        raise TooFewRows(f"need >= {MIN_TRAINING_ROWS} rows, got {table.n_rows}")

    X = matrix_from_table(table, feature_names)
    try:
        y = np.asarray([float(v) for v in table.columns[target]])
    except (TypeError, ValueError) as exc:
        raise NonBinaryTarget(f"target {target!r} holds non-numeric values") from exc

    distinct = set(np.unique(y).tolist())
    if config.task == TASK_CLASSIFICATION:
        if distinct != {0.0, 1.0}:
            raise NonBinaryTarget(
                f"classification target must take values {{0, 1}}, got {sorted(distinct)}"
            )
        task = TASK_CLASSIFICATION
    elif config.task == TASK_REGRESSION:
        task = TASK_REGRESSION
    elif config.task == "auto":
        task = TASK_CLASSIFICATION if distinct == {0.0, 1.0} else TASK_REGRESSION
    else:
        raise ValueError(f"unknown task {config.task!r}")

    train_idx, val_idx = holdout_split(table.n_rows, config.holdout_fraction, config.seed)
    X_tr, y_tr = X[train_idx], y[train_idx]
    X_val, y_val = X[val_idx], y[val_idx]

    if task == TASK_CLASSIFICATION:
        p0 = float(np.clip(np.mean(y_tr), 1e-6, 1.0 - 1e-6))
        base = float(np.log(p0 / (1.0 - p0)))
        loss_fn = log_loss
    else:
        base = float(np.mean(y_tr))
        loss_fn = squared_loss

    lr = config.learning_rate
    margin_tr = np.full(len(y_tr), base)
    margin_val = np.full(len(y_val), base)
    trees: list[TreeNode] = []
    train_losses = [loss_fn(y_tr, margin_tr)]
    val_losses = [loss_fn(y_val, margin_val)]
    best_val = val_losses[0]
    best_round = 0
    stale = 0

    for _ in range(config.n_rounds):
        if task == TASK_CLASSIFICATION:
            p = _sigmoid(margin_tr)
            res = y_tr - p  # negative gradient of log loss
            hess = p * (1.0 - p)
        else:
            res = y_tr - margin_tr
            hess = None
        tree = _build_tree(X_tr, res, hess, 0, config.max_depth)
        step_tr = lr * _tree_values(tree, X_tr)
        new_train_loss = loss_fn(y_tr, margin_tr + step_tr)
        if new_train_loss > train_losses[-1] + _MIN_GAIN:
            # An uphill step means boosting has converged at this depth.
            break
        margin_tr = margin_tr + step_tr
        trees.append(tree)
        train_losses.append(new_train_loss)
        margin_val = margin_val + lr * _tree_values(tree, X_val)
        val_loss = loss_fn(y_val, margin_val)
        val_losses.append(val_loss)
        if val_loss < best_val - _MIN_GAIN:
            best_val = val_loss
            best_round = len(trees)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        if abs(new_train_loss) < _MIN_GAIN and task == TASK_REGRESSION:
            break  # perfect fit

    trees = trees[:best_round]
    train_losses = train_losses[: best_round + 1]
    logger.info(
        "trained %s model: %d rounds, holdout loss %.6f",
        task,
        len(trees),
        best_val,
    )
    return BoostedModel(
        feature_names=tuple(feature_names),
        task=task,
        base_score=base,
        learning_rate=lr,
        trees=tuple(trees),
        train_losses=tuple(train_losses),
        holdout_loss=best_val,
        holdout_fraction=config.holdout_fraction,
        seed=config.seed,
    )
