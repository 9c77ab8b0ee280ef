import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wearloc.forest import (DecisionTree, DimensionError, ForestParams, RandomForestModel, SchemaError,
                            VersionError, deserialize, load_model, predict, save_model, serialize, train_forest,
                            tree_seed)


def blobs(n=300, d=6, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(n_classes, size=n)
    X = rng.normal(size=(n, d)) + y[:, None] * 0.8
    return X, np.array([f"c{v}" for v in y])


def leaf(h):
    return DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                        np.array([0]), np.array([h]))


def gini(counts):
    n = sum(counts)
    return 1 - sum(Fraction(c, n) ** 2 for c in counts)


def brute_force_tree(X, y, n_classes, min_leaf=1):
    """Exhaustive CART with exact gains; first (feature, threshold) wins ties. BFS node list."""
    nodes = []
    queue = [np.arange(len(y))]
    while queue:
        rows = queue.pop(0)
        counts = [int(np.sum(y[rows] == c)) for c in range(n_classes)]
        best = None
        if sum(c > 0 for c in counts) > 1 and len(rows) >= 2 * min_leaf:
            parent = gini(counts)
            for f in range(X.shape[1]):
                vals = np.unique(X[rows, f])
                for lo, hi in zip(vals[:-1], vals[1:]):
                    thr = 0.5 * (lo + hi)
                    lmask = X[rows, f] <= thr
                    nl, nr = lmask.sum(), (~lmask).sum()
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    cl = [int(np.sum(y[rows][lmask] == c)) for c in range(n_classes)]
                    cr = [a - b for a, b in zip(counts, cl)]
                    gain = parent - Fraction(int(nl), len(rows)) * gini(cl) - Fraction(int(nr), len(rows)) * gini(cr)
                    if best is None or gain > best[0]:
                        best = (gain, f, thr, lmask)
        if best is None or best[0] <= Fraction(1, 10**12):
            nodes.append(("leaf", counts))
        else:
            nodes.append(("split", best[1], best[2]))
            queue.append(rows[best[3]])
            queue.append(rows[~best[3]])
    return nodes


class TestTraining:
    def test_single_label_gives_single_leaves(self):
        X = np.random.default_rng(0).normal(size=(50, 4))
        m = train_forest(X, ["A"] * 50, ForestParams(n_trees=5), vocabulary=["A", "B"])
        assert all(t.n_nodes == 1 for t in m.trees)
        labels, proba = m.predict(X[:3])
        assert labels.tolist() == ["A"] * 3
        np.testing.assert_array_equal(proba, [[1.0, 0.0]] * 3)

    def test_one_dimensional_separable(self):
        x = np.concatenate([np.linspace(-5, -0.01, 100), np.linspace(0, 5, 100)])
        y = np.array(["A"] * 100 + ["B"] * 100)
        m = train_forest(x[:, None], y, ForestParams(n_trees=10, seed=3))
        assert (m.predict(x[:, None])[0] == y).mean() == 1.0

    def test_same_seed_byte_identical(self):
        X, y = blobs()
        a = serialize(train_forest(X, y, ForestParams(n_trees=8, seed=42)))
        b = serialize(train_forest(X, y, ForestParams(n_trees=8, seed=42)))
        c = serialize(train_forest(X, y, ForestParams(n_trees=8, seed=43)))
        assert a == b
        assert a != c

    def test_matches_brute_force_cart(self):
        X, y = blobs(n=60, d=3, seed=5)
        vocab = sorted(set(y))
        yi = np.array([vocab.index(v) for v in y])
        for min_leaf in (1, 3):
            params = ForestParams(n_trees=1, features_per_split=3, bootstrap=False, min_samples_leaf=min_leaf)
            tree = train_forest(X, y, params, vocab).trees[0]
            ref = brute_force_tree(X, yi, len(vocab), min_leaf)
            assert tree.n_nodes == len(ref)
            for i, node in enumerate(ref):
                if node[0] == "leaf":
                    assert tree.feature[i] == -1
                    assert tree.hist[i].tolist() == node[1]
                else:
                    assert tree.feature[i] == node[1]
                    assert tree.threshold[i] == pytest.approx(node[2], abs=1e-15)

    def test_every_split_decreases_gini(self):
        X, y = blobs(n=400, seed=9)
        m = train_forest(X, y, ForestParams(n_trees=5, min_samples_leaf=2))
        for t in m.trees:
            for i in np.flatnonzero(t.feature >= 0):
                h, hl, hr = t.hist[i], t.hist[t.left[i]], t.hist[t.right[i]]
                n = h.sum()
                dec = gini(h) - hl.sum() / n * gini(hl) - hr.sum() / n * gini(hr)
                assert dec > 0
                assert hl.sum() >= 2 and hr.sum() >= 2

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 4), st.integers(10, 80))
    def test_monotone_capacity(self, seed, n_classes, n):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 3))  # continuous: no duplicate rows with clashing labels
        y = rng.integers(n_classes, size=n).astype(str)
        m = train_forest(X, y, ForestParams(n_trees=3, bootstrap=False, seed=seed))
        assert (m.predict(X)[0] == y).all()

    def test_default_features_per_split(self):
        assert ForestParams().resolved_features(132) == 11

    def test_tree_seed_wraps(self):
        assert tree_seed(2 ** 32 - 1, 1) == 0
        assert tree_seed(5, 2) == 7

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            train_forest(np.array([[np.nan]]), ["A"])
        with pytest.raises(DimensionError):
            train_forest(np.zeros((3, 2)), ["A", "B"])
        with pytest.raises(ValueError):
            ForestParams(n_trees=0)


class TestPrediction:
    def test_single_leaf_forest(self):
        m = RandomForestModel((leaf([10]),), ForestParams(n_trees=1), ("A",), 4)
        label, proba = predict(m, np.zeros(4))
        assert label == "A"
        assert proba.tolist() == [1.0]

    def test_tie_goes_to_first_class(self):
        m = RandomForestModel((leaf([3, 0]), leaf([0, 7])), ForestParams(n_trees=2), ("A", "B"), 2)
        label, proba = predict(m, np.zeros(2))
        assert proba.tolist() == [0.5, 0.5]
        assert label == "A"

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000))
    def test_proba_is_distribution(self, seed):
        X, y = blobs(n=120, seed=seed % 7)
        m = train_forest(X, y, ForestParams(n_trees=7, seed=seed, min_samples_leaf=3))
        P = m.predict_proba(np.random.default_rng(seed).normal(scale=3, size=(50, X.shape[1])))
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        X, y = blobs(d=4)
        m = train_forest(X, y, ForestParams(n_trees=2))
        with pytest.raises(DimensionError):
            m.predict(np.zeros((1, 5)))


class TestGridIdentities:
    def test_prefix_equals_smaller_forest(self):
        X, y = blobs(n=250, seed=1)
        big = train_forest(X, y, ForestParams(n_trees=12, seed=4))
        small = train_forest(X, y, ForestParams(n_trees=5, seed=4))
        assert serialize(big.prefix(5)) == serialize(small)

    @pytest.mark.parametrize("depth", [0, 1, 3, 6])
    def test_truncation_equals_depth_limited(self, depth):
        X, y = blobs(n=250, seed=2)
        full = train_forest(X, y, ForestParams(n_trees=6, seed=8))
        limited = train_forest(X, y, ForestParams(n_trees=6, seed=8, max_depth=depth))
        assert serialize(full.truncate(depth)) == serialize(limited)
        np.testing.assert_array_equal(full.trees[0].predict_proba(X, depth), limited.trees[0].predict_proba(X))


class TestSerialization:
    def test_round_trip_predictions(self, tmp_path):
        X, y = blobs(seed=3)
        m = train_forest(X, y, ForestParams(n_trees=10, seed=1), kind="location", vru="cyclist")
        path = tmp_path / "m.json"
        save_model(m, path)
        back = load_model(path)
        Q = np.random.default_rng(0).normal(scale=2, size=(1000, X.shape[1]))
        np.testing.assert_array_equal(back.predict_proba(Q), m.predict_proba(Q))
        assert back.vru == "cyclist" and back.kind == "location"
        assert serialize(back) == serialize(m)

    def test_loaded_model_truncates_like_original(self):
        X, y = blobs(seed=4)
        m = train_forest(X, y, ForestParams(n_trees=4, seed=1))
        back = deserialize(serialize(m))
        assert serialize(back.truncate(2)) == serialize(m.truncate(2))
        np.testing.assert_array_equal(back.trees[1].hist, m.trees[1].hist)

    def test_truncated_file(self):
        data = serialize(train_forest(*blobs(), ForestParams(n_trees=2)))
        with pytest.raises(SchemaError):
            deserialize(data[: len(data) // 2])

    def test_version_99(self):
        doc = json.loads(serialize(train_forest(*blobs(), ForestParams(n_trees=2))))
        doc["version"] = 99
        with pytest.raises(VersionError):
            deserialize(json.dumps(doc).encode())

    @pytest.mark.parametrize("mutate", [
        lambda d: d.pop("trees"),
        lambda d: d.update(kind="other"),
        lambda d: d["trees"].pop(),
        lambda d: d["trees"][0]["nodes"].__setitem__(0, {"f": 999, "thr": 0.0, "l": 1, "r": 2}),
        lambda d: d["trees"][0]["nodes"].__setitem__(0, {"hist": [1]}),
        lambda d: d["params"].update(n_trees="x"),
    ])
    def test_schema_violations(self, mutate):
        doc = json.loads(serialize(train_forest(*blobs(), ForestParams(n_trees=2))))
        mutate(doc)
        with pytest.raises(SchemaError):
            deserialize(json.dumps(doc).encode())
