import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loratwin.errors import FittingError, TrainingError, ValidationError
from loratwin.metrics import smape
from loratwin.placement import FEATURE_NAMES, TARGET_NAMES
from loratwin.predictor import (
    ForestModel, PlacementModel, RegressionTree, best_split, evaluate, extract_rules, predict, train_forest,
    train_linear_baseline, train_placement_model, train_tree,
)


def test_constant_target_single_leaf():
    X = np.random.default_rng(0).random((30, 3))
    t = train_tree(X, np.full(30, 7.5))
    assert t.n_nodes == 1 and t.value == [7.5]


def test_step_function_split():
    X = np.arange(10, dtype=float)[:, None]
    y = np.where(X[:, 0] < 5, 10.0, 20.0)
    t = train_tree(X, y, max_depth=1)
    assert t.feature[0] == 0 and 4 < t.threshold[0] <= 5
    assert sorted(t.value[1:]) == [10.0, 20.0]
    np.testing.assert_array_equal(t.predict(X), y)


def split_candidates(X, y, min_leaf=1):
    """Exhaustive search: every feature, every midpoint, SSE summed directly."""
    out = []
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            left = y[X[:, f] <= thr]
            right = y[X[:, f] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            out.append((((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum(), f, thr))
    return sorted(out, key=lambda c: c[0])


def test_xor_grid_root_matches_brute_force():
    xs = np.array(list(itertools.product(range(4), range(4))), dtype=float)
    y = ((xs[:, 0] >= 2) ^ (xs[:, 1] >= 2)).astype(float) * 10 + xs[:, 0] * 0.1
    t = train_tree(xs, y, max_depth=2)
    _, f, thr = split_candidates(xs, y)[0]
    assert (t.feature[0], t.threshold[0]) == (f, thr)
    assert t.depth() <= 2


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 200), st.integers(1, 5), st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_split_matches_brute_force(n, p, seed, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 8, size=(n, p)).astype(float)
    y = rng.normal(size=n) * 3 + X[:, 0]
    got = best_split(X, y, range(p), min_leaf)
    cands = split_candidates(X, y, min_leaf)
    if not cands:
        assert got is None
        return
    assert got is not None
    best_sse, f, thr = cands[0]
    assert got[2] == pytest.approx(best_sse, rel=1e-9, abs=1e-9)
    if len(cands) == 1 or cands[1][0] - best_sse > 1e-9 * max(best_sse, 1.0):
        assert got[:2] == (f, thr)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_depth_bound(depth, seed):
    rng = np.random.default_rng(seed)
    X = rng.random((150, 4))
    t = train_tree(X, rng.normal(size=150), max_depth=depth)
    assert t.depth() <= depth
    for i in range(t.n_nodes):
        assert (t.left[i] < 0) == (t.right[i] < 0)
        assert np.isfinite(t.value[i])


def test_min_leaf_respected():
    rng = np.random.default_rng(3)
    X = rng.random((100, 2))
    t = train_tree(X, rng.random(100), max_depth=6, min_leaf=7)
    assert min(t.n_samples[i] for i in range(t.n_nodes) if t.feature[i] < 0) >= 7


def test_training_errors():
    with pytest.raises(TrainingError):
        train_tree(np.empty((0, 3)), np.empty(0))
    with pytest.raises(TrainingError):
        train_tree(np.ones((3, 1)), np.ones(3), max_depth=0)
    with pytest.raises(TrainingError):
        train_forest(np.ones((3, 16)), np.ones(3), min_leaf=5)
    with pytest.raises(TrainingError):
        train_forest(np.ones((30, 16)), np.ones(30), n_trees=11)


def synthetic(n=300, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, len(FEATURE_NAMES)))
    y = 100 * (X[:, 0] > 0.5) + 40 * X[:, 3] + rng.normal(0, 2, n) + 10
    return X, y


def test_single_tree_forest_equals_tree():
    X, y = synthetic()
    forest = train_forest(X, y, n_trees=1, bootstrap=False, seed=4)
    tree = train_tree(X, y, 5, 1, None, seed=0)
    np.testing.assert_array_equal(forest.predict_matrix(X), tree.predict(X))


@pytest.mark.parametrize("seed", range(5))
def test_forest_no_worse_than_worst_tree(seed):
    X, y = synthetic(seed=seed)
    forest = train_forest(X, y, seed=seed, feature_subset_size=6)
    mse = lambda p: float(np.mean((p - y) ** 2))  # noqa: E731
    worst = max(mse(t.predict(X)) for t in forest.trees)
    assert mse(forest.predict_matrix(X)) <= worst


def test_forest_deterministic():
    X, y = synthetic()
    a = train_forest(X, y, seed=3).to_json()
    b = train_forest(X, y, seed=3).to_json()
    assert a == b
    assert a != train_forest(X, y, seed=4).to_json()


def test_all_single_leaves_predict_value():
    leaf = RegressionTree([-1], [0.0], [-1], [-1], [42.0], [5], 5)
    model = ForestModel([leaf] * 10, "max_throughput")
    assert predict(model, [0.0] * 16) == 42.0


def test_integer_targets_rounded_and_clamped():
    leaf = RegressionTree([-1], [0.0], [-1], [-1], [0.2], [5], 5)
    assert predict(ForestModel([leaf], "n_star"), [0.0] * 16) == 1
    leaf = RegressionTree([-1], [0.0], [-1], [-1], [12.6], [5], 5)
    assert predict(ForestModel([leaf], "g_star"), [0.0] * 16) == 13


def test_predict_by_name_ignores_column_order():
    X, y = synthetic()
    model = train_forest(X, y, seed=1)
    x = X[7]
    named = dict(zip(FEATURE_NAMES, x))
    shuffled = dict(reversed(list(named.items())))
    assert predict(model, shuffled) == predict(model, x.tolist()) == predict(model, named)
    del named["rank_std"]
    with pytest.raises(ValidationError, match="rank_std"):
        predict(model, named)
    with pytest.raises(ValidationError):
        predict(model, [1.0] * 15)


def test_prediction_latency():
    X, y = synthetic()
    model = train_forest(X, y, seed=0)
    rows = X[:200].tolist()
    t0 = time.perf_counter()
    for _ in range(5):
        for r in rows:
            predict(model, r)
    per_call = (time.perf_counter() - t0) / (5 * len(rows))
    assert per_call < 0.12e-3


def test_bundle_round_trip(tmp_path):
    X, y = synthetic()
    targets = {"max_throughput": y, "n_star": np.round(y / 10), "g_star": np.round(y / 20) + 1}
    model = train_placement_model(X, targets, seed=2)
    model.evaluation = {"note": "x"}
    model.save(tmp_path / "m.json")
    back = PlacementModel.load(tmp_path / "m.json")
    probe = np.random.default_rng(9).random((1000, 16)) * 2 - 0.5
    for t in TARGET_NAMES:
        a = model.forests[t].predict_matrix(probe)
        b = back.forests[t].predict_matrix(probe)
        assert a.tobytes() == b.tobytes()
    assert back.evaluation == {"note": "x"}


def test_bundle_schema_rejects_bad_docs():
    with pytest.raises(ValidationError):
        PlacementModel.from_json({"format": "loratwin-forest", "version": 1, "forests": {"n_star": {}}})


def test_rules_single_split():
    X = np.arange(10, dtype=float)[:, None].repeat(16, axis=1)
    y = np.where(X[:, 0] < 5, 10.0, 20.0)
    model = train_forest(X, y, n_trees=1, bootstrap=False, max_depth=1)
    rules = extract_rules(model)
    assert len(rules) == 2
    for x in np.linspace(-10, 20, 61):
        assert sum(r.matches([x] * 16) for r in rules) == 1
    assert "rate_max <= 4.5" in rules[0].text(FEATURE_NAMES, "n_star")


def test_rules_coverage_and_replay():
    X, y = synthetic(200)
    model = train_forest(X, y, seed=5, n_trees=4)
    rules = extract_rules(model)
    for ti, tree in enumerate(model.trees):
        mine = [r for r in rules if r.tree == ti]
        assert sum(r.coverage for r in mine) == len(y)
        for x in X:
            hit = [r for r in mine if r.matches(x)]
            assert len(hit) == 1
            assert hit[0].value == tree.predict_one(x)


def test_linear_well_specified():
    rng = np.random.default_rng(1)
    X = rng.random((100, 16))
    y = X @ np.arange(1, 17) + 3.0
    m = train_linear_baseline(X, y)
    assert evaluate(m, X, y) < 1e-8


def test_linear_constant_target_is_intercept_only():
    X = np.tile(np.arange(16.0), (30, 1))  # every column constant
    m = train_linear_baseline(X, np.full(30, 5.0))
    assert m.columns == [] and m.coef[-1] == pytest.approx(5.0)


def test_linear_drops_redundant_columns():
    rng = np.random.default_rng(2)
    X = rng.random((40, 16))
    X[:, 5] = 2 * X[:, 1] - X[:, 2]
    m = train_linear_baseline(X, X[:, 1] + 1)
    assert 5 not in m.columns


def test_linear_needs_rows():
    with pytest.raises(FittingError):
        train_linear_baseline(np.random.default_rng(0).random((16, 16)), np.ones(16))


def test_forest_beats_linear_on_step_target():
    X, y = synthetic(600, seed=8)
    forest = train_forest(X[:500], y[:500], seed=0)
    linear = train_linear_baseline(X[:500], y[:500])
    assert evaluate(forest, X[500:], y[500:]) < evaluate(linear, X[500:], y[500:])
    assert smape(forest.predict_matrix(X[500:]), y[500:]) == evaluate(forest, X[500:], y[500:])
