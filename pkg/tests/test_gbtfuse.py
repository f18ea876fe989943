import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aespipe.errors import ConfigError, DataError, ShapeError
from aespipe.gbtfuse import (
    GbtHyperparams,
    GbtModel,
    MetricFeatureVector,
    cv_train,
    fold_partition,
    gbt_predict,
    gbt_train,
    hp_search,
)

ONE_ROUND = GbtHyperparams(rounds=1, max_depth=1, learning_rate=1.0, min_samples_leaf=1,
                           l2_leaf_reg=0.0, subsample=1.0)


def test_one_round_hand_trace():
    m = gbt_train([[0.0], [1.0]], [0.0, 10.0], ONE_ROUND)
    assert m.base_score == 5.0
    t = m.trees[0]
    assert t.feature[0] == 0 and t.threshold[0] == 0.5
    assert sorted(t.value[t.feature < 0].tolist()) == [-5.0, 5.0]
    assert m.predict([[0.0], [1.0]]).tolist() == [0.0, 10.0]
    assert gbt_predict(m, [0.0]) == 0.0


def test_constant_target_single_leaf():
    X = np.random.default_rng(0).normal(size=(30, 3))
    m = gbt_train(X, np.full(30, 4.0), GbtHyperparams(rounds=5))
    assert all(t.n_nodes == 1 and t.value[0] == 0.0 for t in m.trees)
    assert np.all(m.predict(X) == 4.0)


def test_deterministic_with_subsample():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(60, 4)), rng.normal(size=60)
    hp = GbtHyperparams(rounds=10, max_depth=3, subsample=0.7)
    a, b = gbt_train(X, y, hp, seed=3), gbt_train(X, y, hp, seed=3)
    for s, t in zip(a.trees, b.trees):
        assert np.array_equal(s.feature, t.feature) and np.array_equal(s.threshold, t.threshold)
        assert np.array_equal(s.value, t.value)


def test_null_ensemble():
    m = GbtModel(3.25, [], 0.1, 2)
    assert gbt_predict(m, [1.0, 2.0]) == 3.25


def test_all_nan_input_is_finite():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(40, 3)), rng.normal(size=40)
    X[rng.random(X.shape) < 0.2] = np.nan
    m = gbt_train(X, y, GbtHyperparams(rounds=20, max_depth=3))
    assert np.isfinite(gbt_predict(m, [np.nan] * 3))


def test_missing_values_follow_larger_child():
    # 3 rows left of the split, 1 right; the missing row must go left
    X = np.array([[0.0], [0.1], [0.2], [5.0], [np.nan]])
    y = np.array([0.0, 0.0, 0.0, 9.0, 0.0])
    m = gbt_train(X, y, ONE_ROUND)
    assert bool(m.trees[0].default_left[0])


def test_feature_vector_and_shape_errors():
    m = gbt_train([[0.0], [1.0]], [0.0, 10.0], ONE_ROUND)
    v = MetricFeatureVector([1.0], ["dnsmos"])
    assert gbt_predict(m, v) == 10.0
    with pytest.raises(ShapeError):
        gbt_predict(m, [1.0, 2.0])
    with pytest.raises(ShapeError):
        MetricFeatureVector([1.0, 2.0], ["a"])


def test_train_errors():
    with pytest.raises(DataError):
        gbt_train([[0.0]], [1.0], ONE_ROUND)
    with pytest.raises(DataError):
        gbt_train([[0.0], [1.0]], [1.0, np.nan], ONE_ROUND)
    with pytest.raises(ConfigError):
        GbtHyperparams(rounds=0)


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(50, 2)), rng.normal(size=50)
    m = gbt_train(X, y, GbtHyperparams(rounds=3, max_depth=4, min_samples_leaf=7))
    for t in m.trees:
        counts = {}
        for row in X:
            node = 0
            while t.feature[node] >= 0:
                node = t.left[node] if row[t.feature[node]] < t.threshold[node] else t.right[node]
            counts[node] = counts.get(node, 0) + 1
        assert min(counts.values()) >= 7


def test_depth_limit():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(100, 3)), rng.normal(size=100)
    m = gbt_train(X, y, GbtHyperparams(rounds=4, max_depth=2))
    assert max(t.depth() for t in m.trees) <= 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.0, 3.0))
def test_training_loss_non_increasing(seed, lr, l2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    y = np.sin(X[:, 0]) + rng.normal(0, 0.3, 40)
    hist = []
    gbt_train(X, y, GbtHyperparams(rounds=15, max_depth=2, learning_rate=lr, l2_leaf_reg=l2), 0, hist)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_fold_partition():
    parts = fold_partition(4, 2, seed=0)
    assert [len(p) for p in parts] == [2, 2]
    parts = fold_partition(23, 10, seed=5)
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(np.concatenate(parts).tolist()) == list(range(23))
    with pytest.raises(ConfigError):
        fold_partition(3, 4, seed=0)


def test_cv_beats_constant_predictor():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 1, size=(80, 2))
    y = np.where(X[:, 0] > 0.5, 8.0, 2.0)
    cv = cv_train(X, y, GbtHyperparams(rounds=30, max_depth=1, learning_rate=0.5), folds=5, seed=1)
    assert len(cv.models) == 5
    assert cv.mean_cv_mse < np.var(y)
    assert np.allclose(cv.predict(X), np.mean([m.predict(X) for m in cv.models], axis=0))


def test_leave_one_out():
    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(6, 2)), rng.normal(size=6)
    cv = cv_train(X, y, GbtHyperparams(rounds=3, max_depth=1), folds=6, seed=0)
    assert len(cv.fold_mse) == 6


def test_search_single_trial():
    rng = np.random.default_rng(8)
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    space = {"rounds": (5, 10), "max_depth": (1, 3)}
    best, mse, trace = hp_search(X, y, space, trials=1, folds=3, seed=0)
    assert len(trace) == 1 and trace[0] == (best, mse)


def test_search_degenerate_space():
    rng = np.random.default_rng(9)
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    space = {"rounds": (7, 7), "max_depth": (2, 2), "learning_rate": (0.2, 0.2)}
    best, mse, trace = hp_search(X, y, space, trials=5, folds=3, seed=0)
    assert (best.rounds, best.max_depth, best.learning_rate) == (7, 2, 0.2)
    assert len({m for _, m in trace}) == 1
    assert trace[0][0] is best  # earliest trial wins ties


def test_search_prefers_deeper_trees_on_xor():
    g = np.linspace(0.05, 0.95, 8)
    X = np.array([(a, b) for a in g for b in g])
    y = np.where((X[:, 0] > 0.5) ^ (X[:, 1] > 0.5), 9.0, 1.0)
    hp = GbtHyperparams(rounds=20, learning_rate=0.5, l2_leaf_reg=0.0)
    direct = {d: cv_train(X, y, GbtHyperparams(20, d, 0.5, 1, 0.0), 4, 0).mean_cv_mse for d in (1, 3)}
    assert direct[3] < direct[1]
    best, mse, _ = hp_search(X, y, {"max_depth": [1, 3]}, trials=6, folds=4, seed=0, base=hp)
    assert best.max_depth == 3 and mse == direct[3]


def test_search_errors():
    X, y = np.zeros((10, 1)), np.arange(10.0)
    with pytest.raises(ConfigError):
        hp_search(X, y, {"rounds": (10, 5)}, trials=1, folds=2)
    with pytest.raises(ConfigError):
        hp_search(X, y, {"max_depth": []}, trials=1, folds=2)
    with pytest.raises(ConfigError):
        hp_search(X, y, {}, trials=0, folds=2)
