import numpy as np
import pytest

from iocseq.forest import (Forest, ForestConfig, Tree, feature_dim, featurize, featurize_window,
                           fit_forest, predict_forest)
from iocseq.telemetry import (PAD_STEP, EncodedStep, IntervalRecord, WindowInstance,
                              build_vocabulary, windowize)


def _win(steps):
    pad = [s is None for s in steps]
    return WindowInstance([PAD_STEP if s is None else s for s in steps], None, ("o", "u", 0),
                          [not p for p in pad])


def test_indicator_placement():
    # three real events: ids 2, 3, 4 map to indicator columns 0, 1, 2
    win = _win([EncodedStep((2,), 0.0, 1.0, 2.0), EncodedStep((4,), 5.7, 3.0, 4.0)])
    vec = featurize_window(win, 3)
    np.testing.assert_array_equal(vec[:6], [1, 0, 0, 0, 0, 1])
    np.testing.assert_allclose(vec[6:], [1.0, 2.0, 0.0, 3.0, 4.0, 5.7], rtol=1e-6)


def test_padded_steps_are_zero_blocks():
    win = _win([None, None, EncodedStep((3, 2), 1.0, 1.0, 1.0)])
    vec = featurize_window(win, 2)
    assert not vec[:4].any() and vec[4:6].tolist() == [1, 1]
    assert not vec[6:12].any() and vec[12:].tolist() == [1, 1, 1]


def test_unknown_event_has_no_indicator():
    vec = featurize_window(_win([EncodedStep((1,), 0.0, 0.0, 0.0)]), 2)
    assert not vec.any()


def test_dimension_formula():
    assert feature_dim(21, 216) == 21 * 216 + 63 == 4599
    vocab = build_vocabulary([[f"e{i:03d}" for i in range(216)]])
    recs = [IntervalRecord("o", "u", 300 * i, ("e001",), 1, 1) for i in range(3)]
    X = featurize(windowize(recs, vocab, 21), vocab)
    assert X.shape == (3, 4599)
    assert set(np.unique(X[:, :21 * 216])) <= {0.0, 1.0}


def _toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 5)).astype(np.float32)
    y = (X[:, 2] > 0.3).astype(np.int64)
    return X, y


def test_stump_learns_single_feature_dichotomy():
    X = np.array([[0.0], [0.0], [1.0], [1.0]] * 10, dtype=np.float32)
    y = np.array([0, 0, 1, 1] * 10)
    f = fit_forest(ForestConfig(n_trees=1, max_depth=1), X, y)
    assert (predict_forest(f, X).argmax(axis=1) == y).all()
    assert f.trees[0].n_nodes == 3


def test_beats_majority_on_toy_data():
    X, y = _toy()
    f = fit_forest(ForestConfig(n_trees=20, seed=1), X, y)
    Xt, yt = _toy(seed=9)
    acc = (predict_forest(f, Xt).argmax(axis=1) == yt).mean()
    assert acc >= max(yt.mean(), 1 - yt.mean())
    assert acc > 0.9


def test_same_seed_same_predictions_and_workers_agree():
    X, y = _toy()
    a = fit_forest(ForestConfig(n_trees=8, seed=3), X, y)
    b = fit_forest(ForestConfig(n_trees=8, seed=3), X, y, workers=4)
    np.testing.assert_array_equal(predict_forest(a, X), predict_forest(b, X))
    assert a.to_bytes() == b.to_bytes()


def test_probabilities_sum_to_one():
    X, y = _toy()
    y[:20] = 2
    p = predict_forest(fit_forest(ForestConfig(n_trees=5), X, y), X)
    assert p.shape == (200, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_single_tree_returns_its_leaf_distribution():
    X, y = _toy()
    f = fit_forest(ForestConfig(n_trees=1, max_depth=2), X, y)
    np.testing.assert_allclose(predict_forest(f, X), f.trees[0].predict(X))


def test_unanimous_pure_leaves_give_probability_one():
    leaf = Tree([-1], [np.nan], [-1], [-1], [[0.0, 1.0, 0.0]])
    f = Forest(ForestConfig(n_trees=3), [leaf, leaf, leaf], n_features=2, n_classes=3)
    np.testing.assert_array_equal(predict_forest(f, np.zeros((4, 2))), [[0, 1, 0]] * 4)


def test_prediction_invariant_to_tree_order():
    X, y = _toy()
    f = fit_forest(ForestConfig(n_trees=6), X, y)
    g = Forest(f.config, f.trees[::-1], f.n_features, f.n_classes)
    np.testing.assert_allclose(predict_forest(f, X), predict_forest(g, X), atol=1e-12)


def test_dimension_mismatch():
    X, y = _toy()
    f = fit_forest(ForestConfig(n_trees=2), X, y)
    with pytest.raises(ValueError, match="dimension"):
        predict_forest(f, np.zeros((1, 4)))


def test_single_class_is_an_error():
    with pytest.raises(ValueError):
        fit_forest(ForestConfig(), np.zeros((5, 2)), np.zeros(5, dtype=int))


def test_config_validation():
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(max_depth=0)


def test_max_depth_is_respected():
    X, y = _toy()
    y = (X[:, 0] * X[:, 1] > 0).astype(int)
    f = fit_forest(ForestConfig(n_trees=3, max_depth=2), X, y)
    for t in f.trees:
        depth = {0: 0}
        for node in range(t.n_nodes):
            if t.feature[node] >= 0:
                depth[t.left[node]] = depth[t.right[node]] = depth[node] + 1
        assert max(depth.values()) <= 2


def _gini(counts):
    n = counts.sum()
    return 1.0 - float(((counts / n) ** 2).sum())


def test_splits_never_worsen_impurity():
    # replay the tree on its own bootstrap sample: a child pair never has
    # higher weighted impurity than its parent
    X, y = _toy(n=150, seed=4)
    y = (np.abs(X[:, 1]) > 0.7).astype(int) + (X[:, 3] > 1).astype(int)
    f = fit_forest(ForestConfig(n_trees=1, max_depth=None, seed=2), X, y)
    t = f.trees[0]
    rng = np.random.default_rng(np.random.SeedSequence([2, 51]).spawn(1)[0])
    boot = np.sort(rng.integers(0, len(y), len(y)))
    leaves = t.apply(X[boot])
    reach = {0: boot}
    for node in range(t.n_nodes):
        if t.feature[node] < 0 or node not in reach:
            continue
        idx = reach[node]
        go = X[idx, t.feature[node]] <= t.threshold[node]
        reach[t.left[node]], reach[t.right[node]] = idx[go], idx[~go]
    assert set(np.unique(leaves)) <= set(reach)
    for node in np.unique(leaves):
        hist = np.bincount(y[reach[node]], minlength=3)
        np.testing.assert_allclose(t.value[node], hist / hist.sum())
    for node in range(t.n_nodes):
        if t.feature[node] < 0:
            continue
        parent = np.bincount(y[reach[node]], minlength=3)
        l = np.bincount(y[reach[t.left[node]]], minlength=3)
        r = np.bincount(y[reach[t.right[node]]], minlength=3)
        assert l.sum() > 0 and r.sum() > 0
        weighted = (l.sum() * _gini(l) + r.sum() * _gini(r)) / parent.sum()
        assert weighted < _gini(parent)


def test_checkpoint_roundtrip(tmp_path):
    X, y = _toy()
    vocab = build_vocabulary([["a"]])
    f = fit_forest(ForestConfig(n_trees=4, max_depth=None), X, y, classes=["n", "p"], vocab=vocab,
                   task="family", w=21)
    path = tmp_path / "rf.ckpt"
    f.save(path)
    back = Forest.load(path)
    assert back.to_bytes() == f.to_bytes()
    assert back.config == f.config and back.classes == ["n", "p"] and back.vocab == vocab
    np.testing.assert_array_equal(predict_forest(back, X), predict_forest(f, X))


def test_tree_json_roundtrip():
    X, y = _toy()
    t = fit_forest(ForestConfig(n_trees=1), X, y).trees[0]
    back = Tree.from_json(t.to_json())
    np.testing.assert_array_equal(back.predict(X), t.predict(X))
