import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import split_scan
from tlrisk.data import DataError
from tlrisk.gbt import (GbtConfig, GbtModel, best_split, build_tree, fit_gbt,
                        predict_log_odds_gbt, training_loss_trace)
from tlrisk.glm import mean_nll, sigmoid

FULL = dict(subsample_rows=1.0)


def small_instance(seed, n=None, p=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(4, 13))
    p = p or int(rng.integers(1, 4))
    # coarse grid values so ties between rows and candidates actually occur
    X = rng.integers(0, 5, size=(n, p)).astype(float)
    y = rng.integers(0, 2, n)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return X, y.astype(float)


def node_rows(tree, X):
    """Map node id -> rows of X routed through it."""
    out = {0: np.arange(X.shape[0])}
    stack = [0]
    while stack:
        i = stack.pop()
        f = tree.feature[i]
        if f < 0:
            continue
        r = out[i]
        left = X[r, f] < tree.threshold[i]
        out[tree.left[i]], out[tree.right[i]] = r[left], r[~left]
        stack += [tree.left[i], tree.right[i]]
    return out


@pytest.mark.parametrize("seed", range(40))
def test_splits_match_exhaustive_scan(seed):
    X, y = small_instance(seed)
    cfg = GbtConfig(n_trees=1, max_depth=3, min_child_weight=0.0, **FULL)
    model = fit_gbt(X, y, cfg)
    p0 = sigmoid(np.full(y.shape[0], model.base_score))
    g, h = p0 - y, p0 * (1 - p0)
    tree = model.trees[0]
    rows = node_rows(tree, X)
    for node, r in rows.items():
        ref = split_scan(X[r], g[r], h[r], cfg.l2_leaf_penalty) if r.size >= 2 else None
        if tree.feature[node] < 0:
            # a leaf: either depth ran out or no positive gain was available
            depth_left = node_depth(tree, node) < cfg.max_depth
            assert not (depth_left and ref is not None and ref[0] > 1e-12)
            continue
        assert ref is not None
        assert tree.feature[node] == ref[1]
        assert tree.threshold[node] == ref[2]
        assert tree.gain[node] == pytest.approx(ref[0], rel=1e-12, abs=1e-15)


def node_depth(tree, target):
    stack = [(0, 0)]
    while stack:
        i, d = stack.pop()
        if i == target:
            return d
        if tree.feature[i] >= 0:
            stack += [(tree.left[i], d + 1), (tree.right[i], d + 1)]
    raise KeyError(target)


def test_best_split_helper_matches_scan():
    rng = np.random.default_rng(3)
    for _ in range(30):
        X = rng.integers(0, 4, size=(10, 3)).astype(float)
        g = rng.normal(size=10)
        h = rng.uniform(0.05, 0.25, 10)
        a = best_split(X, g, h, 1.0, 0.0)
        b = split_scan(X, g, h, 1.0)
        assert (a is None) == (b is None)
        if a is not None:
            assert a[1:] == b[1:] and a[0] == pytest.approx(b[0], rel=1e-12)


def test_stump_finds_the_separating_feature():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 3))
    y = np.r_[np.zeros(5), np.ones(5)]
    X[:, 1] = np.r_[rng.uniform(-2, -1, 5), rng.uniform(1, 2, 5)]
    model = fit_gbt(X, y, GbtConfig(n_trees=1, max_depth=1, min_child_weight=0.0, **FULL))
    p0 = sigmoid(np.full(10, model.base_score))
    ref = split_scan(X, p0 - y, p0 * (1 - p0), 1.0)
    assert model.trees[0].feature[0] == 1 == ref[1]


def test_exact_gain_tie_goes_to_lower_threshold():
    # cuts at 2.0 and 3.5 give mirror-image children with identical gain
    X = np.array([[3.0], [3.0], [3.0], [4.0], [1.0], [4.0], [1.0], [4.0], [1.0]])
    y = np.array([0.0, 1, 1, 1, 0, 0, 0, 0, 1])
    model = fit_gbt(X, y, GbtConfig(n_trees=1, max_depth=1, min_child_weight=0.0, **FULL))
    p0 = sigmoid(np.full(9, model.base_score))
    g, h = p0 - y, p0 * (1 - p0)
    assert split_scan(X, g, h, 1.0)[1:] == (0, 2.0)
    assert model.trees[0].threshold[0] == 2.0
    assert best_split(X, g, h, 1.0, 0.0)[1:] == (0, 2.0)


def test_leaf_weights_on_hand_built_instance():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    g = np.array([0.5, -0.25, -0.5, -0.25])
    h = np.array([0.25, 0.1875, 0.25, 0.1875])
    cfg = GbtConfig(n_trees=1, max_depth=1, learning_rate=1.0, min_child_weight=0.0,
                    l2_leaf_penalty=1.0, **FULL)
    tree = build_tree(X, g, h, cfg)
    assert tree.feature[0] == 0 and tree.threshold[0] == 0.5
    assert tree.value[tree.left[0]] == -(0.5 - 0.25) / (0.25 + 0.1875 + 1.0)
    assert tree.value[tree.right[0]] == -(-0.5 - 0.25) / (0.25 + 0.1875 + 1.0)


def test_noise_below_min_gain_gives_single_leaves():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 3))
    y = np.r_[np.zeros(20), np.ones(20)]
    model = fit_gbt(X, y, GbtConfig(n_trees=5, min_split_gain=1e6, **FULL))
    assert all(t.feature.tolist() == [-1] for t in model.trees)
    np.testing.assert_allclose(model.predict_log_odds(X), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_full_sample_trace_non_increasing(seed):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(20, 200)), int(rng.integers(1, 6))
    X = rng.normal(size=(n, p))
    y = (rng.uniform(size=n) < sigmoid(X[:, 0] - 0.5)).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    model = fit_gbt(X, y, GbtConfig(n_trees=30, seed=seed, **FULL))
    tr = training_loss_trace(model)
    assert tr.shape == (30,)
    assert np.all(np.diff(tr) <= 1e-12)
    assert tr[0] <= mean_nll(y, np.full(n, model.base_score))


def test_single_tree_trace_length():
    X, y = small_instance(5, n=12, p=2)
    assert training_loss_trace(fit_gbt(X, y, GbtConfig(n_trees=1))).shape == (1,)


def test_zero_trees_is_base_score():
    X, y = small_instance(6, n=10, p=2)
    model = fit_gbt(X, y, GbtConfig(n_trees=1))
    empty = GbtModel(model.base_score, [], model.config, 2)
    assert np.all(empty.predict_log_odds(X) == model.base_score)
    assert model.base_score == pytest.approx(np.log(y.mean() / (1 - y.mean())))


def test_overfit_model_recovers_training_labels():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 2))
    y = rng.integers(0, 2, 30).astype(float)
    cfg = GbtConfig(n_trees=50, max_depth=8, learning_rate=0.5, min_child_weight=0.0,
                    l2_leaf_penalty=0.0, **FULL)
    p = fit_gbt(X, y, cfg).predict_proba(X)
    assert np.all((p >= 0.5) == (y == 1))


def test_row_permutation_equivariance():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(100, 4))
    y = (X[:, 1] > 0).astype(float)
    model = fit_gbt(X, y, GbtConfig(n_trees=20))
    perm = rng.permutation(100)
    np.testing.assert_array_equal(model.predict_log_odds(X[perm]), model.predict_log_odds(X)[perm])
    np.testing.assert_array_equal(predict_log_odds_gbt(model, X), model.predict_log_odds(X))


def test_serialization_bit_exact_and_deterministic():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(150, 5))
    y = (rng.uniform(size=150) < sigmoid(X[:, 0] * X[:, 1])).astype(float)
    cfg = GbtConfig(n_trees=40, seed=3)
    model = fit_gbt(X, y, cfg)
    back = GbtModel.loads(model.dumps())
    Xn = rng.normal(size=(500, 5))
    np.testing.assert_array_equal(back.predict_log_odds(Xn), model.predict_log_odds(Xn))
    assert fit_gbt(X, y, cfg).dumps() == model.dumps()


def test_input_validation():
    with pytest.raises(DataError):
        fit_gbt(np.array([[np.nan], [1.0]]), np.array([0, 1]))
    with pytest.raises(DataError):
        fit_gbt(np.zeros((4, 1)), np.ones(4))
    model = fit_gbt(np.arange(8.0).reshape(4, 2), np.array([0, 1, 0, 1]), GbtConfig(n_trees=1))
    with pytest.raises(DataError):
        model.predict_log_odds(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        GbtConfig(subsample_rows=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 12), st.integers(1, 3))
def test_root_split_property(seed, n, p):
    X, y = small_instance(seed, n=n, p=p)
    model = fit_gbt(X, y, GbtConfig(n_trees=1, max_depth=1, min_child_weight=0.0, **FULL))
    p0 = sigmoid(np.full(n, model.base_score))
    ref = split_scan(X, p0 - y, p0 * (1 - p0), 1.0)
    tree = model.trees[0]
    if ref is None or ref[0] <= 0:
        assert tree.feature[0] == -1
    else:
        assert (tree.feature[0], tree.threshold[0]) == ref[1:]
