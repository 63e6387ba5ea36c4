import numpy as np
import pytest

from medpipe.errors import TooManyFeatures
from medpipe.explain import (
    AttributionSummary,
    permutation_importance,
    rank_by_mean_abs,
    sample_background,
    shapley_exact,
)
from medpipe.gbm import (
    BoostedModel,
    GbmConfig,
    TreeNode,
    matrix_from_table,
    train_gbm,
)
from medpipe.tabular import TabularDataset

from tests.conftest import rule_dataset
from tests.oracles import shapley_by_permutations


def float_table(cols):
    return TabularDataset(
        headers=list(cols), columns={c: list(v) for c, v in cols.items()}
    )


def stump(feature: int, threshold: float, lo: float, hi: float) -> TreeNode:
    return TreeNode(
        value=0.0,
        feature=feature,
        threshold=threshold,
        left=TreeNode(value=lo),
        right=TreeNode(value=hi),
    )


def hand_model(trees, names, lr=1.0, base=0.0, task="regression") -> BoostedModel:
    return BoostedModel(
        feature_names=tuple(names),
        task=task,
        base_score=base,
        learning_rate=lr,
        trees=tuple(trees),
        train_losses=(0.0,) * len(trees),
        holdout_loss=0.0,
        holdout_fraction=0.2,
        seed=0,
    )


def trained_model(n_features=4, n=80, seed=2):
    rng = np.random.default_rng(seed)
    cols = {f"f{i}": list(rng.uniform(-1, 1, n)) for i in range(n_features)}
    X = np.column_stack([cols[f"f{i}"] for i in range(n_features)])
    y = X[:, 0] * 2.0 + (X[:, 1] > 0).astype(float) - 0.5 * X[:, 2]
    cols["y"] = list(y)
    t = float_table(cols)
    model = train_gbm(t, "y", GbmConfig(seed=seed))
    return model, t


# --- exact values -------------------------------------------------------------------


def value_function(model, row, background):
    """v(S) in the marginal-expectation game, computed naively per subset."""

    def v(subset: frozenset) -> float:
        sample = background.copy()
        for i in subset:
            sample[:, i] = row[i]
        return float(np.mean(model.margins(sample)))

    return v


def test_agrees_with_permutation_oracle():
    model, t = trained_model(n_features=4)
    X = matrix_from_table(t, list(model.feature_names))
    background = X[:12]
    for row_idx in (0, 7, 33):
        row = X[row_idx]
        phi = shapley_exact(model, row, background)
        oracle = shapley_by_permutations(
            value_function(model, row, background), len(model.feature_names)
        )
        for i, name in enumerate(model.feature_names):
            assert phi[name] == pytest.approx(oracle[i], abs=1e-9)


def test_efficiency():
    model, t = trained_model(n_features=5, seed=4)
    X = matrix_from_table(t, list(model.feature_names))
    background = X[:20]
    for row_idx in (1, 11):
        row = X[row_idx]
        phi = shapley_exact(model, row, background)
        total = sum(phi.values())
        expected = float(model.margins(row.reshape(1, -1))[0]) - float(
            np.mean(model.margins(background))
        )
        assert total == pytest.approx(expected, abs=1e-9)


def test_symmetry_identical_features():
    # two mirrored stumps: f0 and f1 perfectly interchangeable
    trees = [stump(0, 0.0, -1.0, 1.0), stump(1, 0.0, -1.0, 1.0)]
    model = hand_model(trees, ["f0", "f1", "f2"])
    background = np.array(
        [[-1.0, -1.0, 0.5], [1.0, 1.0, -0.5], [0.25, 0.25, 0.0]]
    )
    row = np.array([0.8, 0.8, 0.1])
    phi = shapley_exact(model, row, background)
    assert phi["f0"] == pytest.approx(phi["f1"], abs=1e-9)


def test_null_player_is_exactly_zero():
    trees = [stump(0, 0.0, -2.0, 2.0)]
    model = hand_model(trees, ["f0", "unused1", "unused2"])
    rng = np.random.default_rng(0)
    background = rng.uniform(-1, 1, size=(8, 3))
    row = np.array([0.4, 9.0, -9.0])
    phi = shapley_exact(model, row, background)
    assert abs(phi["unused1"]) <= 1e-12
    assert abs(phi["unused2"]) <= 1e-12
    assert phi["f0"] != 0.0


def test_too_many_features():
    n = 13
    model = hand_model([stump(0, 0.0, -1.0, 1.0)], [f"f{i}" for i in range(n)])
    with pytest.raises(TooManyFeatures):
        shapley_exact(model, np.zeros(n), np.zeros((4, n)))


def test_width_validation():
    model = hand_model([stump(0, 0.0, -1.0, 1.0)], ["f0", "f1"])
    with pytest.raises(ValueError):
        shapley_exact(model, np.zeros(3), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        shapley_exact(model, np.zeros(2), np.zeros((0, 2)))


def test_classification_margins_used():
    t = rule_dataset(100, seed=7)
    model = train_gbm(t, "y", GbmConfig(seed=1))
    X = matrix_from_table(t, list(model.feature_names))
    phi = shapley_exact(model, X[0], X[:16])
    total = sum(phi.values())
    expected = float(model.margins(X[:1])[0]) - float(np.mean(model.margins(X[:16])))
    assert total == pytest.approx(expected, abs=1e-9)


# --- background sampling ------------------------------------------------------------


def test_sample_background_deterministic_subset():
    t = rule_dataset(100, seed=2)
    a = sample_background(t, ["x1", "x2", "x3"], limit=16, seed=5)
    b = sample_background(t, ["x1", "x2", "x3"], limit=16, seed=5)
    assert np.array_equal(a, b)
    assert a.shape == (16, 3)
    c = sample_background(t, ["x1", "x2", "x3"], limit=16, seed=6)
    assert not np.array_equal(a, c)


def test_sample_background_small_table_uses_all_rows():
    t = rule_dataset(10, seed=2)
    a = sample_background(t, ["x1", "x2"], limit=64, seed=5)
    assert a.shape == (10, 2)


# --- permutation importance ---------------------------------------------------------


def test_permutation_importance_signal_above_noise():
    t = rule_dataset(200, seed=3)
    model = train_gbm(t, "y", GbmConfig(seed=0))
    ranking = permutation_importance(model, t, "y", seed=11)
    by_name = dict(ranking)
    # x3 is a pure distractor in the generating rule
    assert by_name["x1"] > by_name["x3"]
    assert by_name["x2"] > by_name["x3"]
    assert [r[1] for r in ranking] == sorted(
        (r[1] for r in ranking), reverse=True
    )


def test_permutation_importance_deterministic():
    t = rule_dataset(120, seed=3)
    model = train_gbm(t, "y", GbmConfig(seed=0))
    a = permutation_importance(model, t, "y", seed=4)
    b = permutation_importance(model, t, "y", seed=4)
    assert a == b


# --- summaries ----------------------------------------------------------------------


def test_rank_by_mean_abs_caps_at_ten():
    per_row = {
        0: {f"f{i}": float(i) for i in range(15)},
        1: {f"f{i}": float(-i) for i in range(15)},
    }
    top = rank_by_mean_abs(per_row)
    assert len(top) == 10
    assert top[0][0] == "f14"
    assert top[0][1] == pytest.approx(14.0)


def test_attribution_summary_rejects_oversized_top():
    with pytest.raises(ValueError):
        AttributionSummary(
            method="shapley",
            per_row={},
            top_features=tuple((f"f{i}", 0.0) for i in range(11)),
        )
