import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toriscope.evaluation import (
    DecisionTree,
    ForestModel,
    LabeledSet,
    cosine_similarity_matrix,
    evaluate,
    label_order,
    mean_ndcg,
    query_ndcg,
    repeated_split_eval,
    stratified_split,
    train_forest,
    write_report,
)
from toriscope.evaluation.forest import _best_split

from .oracles import ndcg_brute


class TestCosine:
    def test_orthogonal_and_parallel(self):
        s = cosine_similarity_matrix(np.array([[1.0, 0.0], [0.0, 3.0], [2.0, 0.0]]))
        assert s[0, 1] == 0.0 and s[0, 2] == pytest.approx(1.0)

    def test_properties(self):
        x = np.random.default_rng(0).standard_normal((20, 7))
        s = cosine_similarity_matrix(x)
        np.testing.assert_array_equal(s, s.T)
        np.testing.assert_array_equal(np.diag(s), 1.0)
        assert np.all(np.abs(s) <= 1.0)

    def test_zero_row(self):
        with pytest.raises(ValueError, match="row"):
            cosine_similarity_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestNdcg:
    def test_hand_example(self):
        # relevant at ranks 1 and 3 of 3: (1 + 1/2) / (1 + 1/log2 3)
        v = query_ndcg(np.array([0.9, 0.5, 0.1]), np.array([True, False, True]), ["a", "b", "c"])
        assert v == pytest.approx(1.5 / (1 + 1 / math.log2(3)), abs=1e-15)
        assert v == pytest.approx(0.9197, abs=1e-4)

    @pytest.mark.parametrize("k", [1, 2, 5, 9])
    def test_single_relevant_at_rank(self, k):
        sims = -np.arange(10, dtype=float)
        rel = np.zeros(10, bool)
        rel[k - 1] = True
        assert query_ndcg(sims, rel, [f"{i}" for i in range(10)]) == pytest.approx(1 / math.log2(k + 1))

    def test_ties_by_song_id(self):
        rel = np.array([False, True])
        assert query_ndcg(np.zeros(2), rel, ["a", "b"]) == pytest.approx(1 / math.log2(3))
        assert query_ndcg(np.zeros(2), rel, ["b", "a"]) == 1.0

    def test_perfect_clusters(self):
        x = np.array([[1, 0.01], [1, 0.02], [0.01, 1], [0.02, 1]])
        assert mean_ndcg(x, ["a", "a", "b", "b"]) == 1.0

    def test_singleton_label_skipped(self, caplog):
        x = np.array([[1, 0.01], [1, 0.02], [0.01, 1]])
        assert mean_ndcg(x, ["a", "a", "b"]) == 1.0
        assert "no other item" in caplog.text

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 30))
        x = rng.standard_normal((n, int(rng.integers(2, 8))))
        labels = rng.choice(["a", "b", "c"], n).tolist()
        if min(labels.count(l) for l in set(labels)) < 2:
            labels[:2] = [labels[0]] * 2
        ids = [f"id{rng.integers(0, 10**6):07d}_{i}" for i in range(n)]
        assert mean_ndcg(x, labels, ids) == pytest.approx(ndcg_brute(x.tolist(), labels, ids), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_bounds_and_scale_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((12, 4))
        labels = ["a", "b", "c"] * 4
        v = mean_ndcg(x, labels)
        assert 0.0 < v <= 1.0
        assert mean_ndcg(x * scale, labels) == pytest.approx(v, abs=1e-12)


def blobs(rng, per_class=20, d=5, sep=6.0, classes=("gyung", "menari", "yukja")):
    centres = rng.standard_normal((len(classes), d)) * sep
    x = np.concatenate([c + rng.standard_normal((per_class, d)) for c in centres])
    y = [c for c in classes for _ in range(per_class)]
    return x, y


def gini_oracle(X, y):
    """Lowest weighted Gini over every feature and every midpoint, by explicit loops."""
    n = len(y)
    best = math.inf
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for lo, hi in zip(vals, vals[1:]):
            thr = (lo + hi) / 2
            parts = [[y[i] for i in range(n) if X[i, f] <= thr], [y[i] for i in range(n) if X[i, f] > thr]]
            imp = 0.0
            for part in parts:
                g = 1.0 - sum((part.count(c) / len(part)) ** 2 for c in set(part))
                imp += len(part) / n * g
            best = min(best, imp)
    return best


class TestForest:
    def test_label_order(self):
        assert label_order(["others", "yukja", "gyung", "menari"]) == ["gyung", "menari", "yukja", "others"]
        assert label_order(["z", "gyung", "a"]) == ["gyung", "a", "z"]

    @pytest.mark.parametrize("seed", range(6))
    def test_best_split_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X = np.round(rng.standard_normal((15, 3)), 1)
        y = rng.integers(0, 3, 15)
        f, thr, score = _best_split(X, y, 3, np.arange(3))
        go = X[:, f] <= thr
        imp = 0.0
        for part in (y[go], y[~go]):
            imp += len(part) / len(y) * (1 - np.sum((np.bincount(part, minlength=3) / len(part)) ** 2))
        assert imp == pytest.approx(gini_oracle(X, y.tolist()), abs=1e-12)

    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        x, y = blobs(rng)
        xt, yt = blobs(np.random.default_rng(0), per_class=20)
        forest = train_forest(x, y, seed=1)
        assert np.mean(np.array(forest.predict(xt)) == np.array(yt)) > 0.95

    def test_row_order_invariant(self):
        rng = np.random.default_rng(3)
        x, y = blobs(rng, sep=1.0)
        perm = rng.permutation(len(y))
        a = train_forest(x, y, seed=4, n_trees=20)
        b = train_forest(x[perm], [y[i] for i in perm], seed=4, n_trees=20)
        probe = rng.standard_normal((50, 5))
        assert a.predict(probe) == b.predict(probe)

    def test_deterministic(self):
        x, y = blobs(np.random.default_rng(5), sep=1.0)
        probe = np.random.default_rng(6).standard_normal((40, 5))
        assert train_forest(x, y, seed=2, n_trees=10).predict(probe) == train_forest(x, y, seed=2, n_trees=10).predict(probe)

    def test_single_class(self):
        with pytest.raises(ValueError, match="single class"):
            train_forest(np.zeros((4, 2)), ["gyung"] * 4)

    def test_trees_fit_training_rows(self):
        x, y = blobs(np.random.default_rng(7), sep=0.5)
        forest = train_forest(x, y, seed=0, n_trees=1)
        # distinct rows: a fully grown tree is pure on its bootstrap sample
        tree = forest.trees[0]
        leaves = tree.counts[tree.feature < 0]
        assert np.all(np.count_nonzero(leaves, axis=1) <= 1)

    def test_vote_tie_goes_to_label_order(self):
        def leaf(counts):
            return DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([counts]))

        forest = ForestModel([leaf([0, 1, 0]), leaf([0, 0, 1])], ["gyung", "menari", "yukja"], 1)
        assert forest.predict(np.zeros((1, 1))) == ["menari"]
        # a tied leaf also resolves to the earlier label
        assert ForestModel([leaf([0, 2, 2])], ["gyung", "menari", "yukja"], 1).predict(np.zeros((1, 1))) == ["menari"]


class TestProtocol:
    def test_stratified_split(self):
        labels = ["a"] * 20 + ["b"] * 8
        tr, te = stratified_split(labels, 0.75, np.random.default_rng(0))
        assert len(set(tr) & set(te)) == 0 and len(tr) + len(te) == 28
        assert [labels[i] for i in tr].count("a") == 15
        assert [labels[i] for i in tr].count("b") == 6

    def test_split_needs_two_per_class(self):
        with pytest.raises(ValueError, match="'b'"):
            stratified_split(["a", "a", "b"], 0.75, np.random.default_rng(0))

    def test_one_hot_features_perfect(self):
        classes = ["gyung", "menari", "yukja"]
        y = [c for c in classes for _ in range(12)]
        x = np.array([[1.0 if c == k else 0.0 for k in classes] for c in y])
        mean, std, accs = repeated_split_eval(LabeledSet([str(i) for i in range(36)], x, y), repeats=5)
        assert mean == 1.0 and std == 0.0 and len(accs) == 5

    def test_noise_near_chance(self):
        rng = np.random.default_rng(11)
        classes = ["gyung", "menari", "yukja", "others"]
        y = [c for c in classes for _ in range(25)]
        x = rng.standard_normal((100, 8))
        mean, _, _ = repeated_split_eval(LabeledSet([str(i) for i in range(100)], x, y), repeats=10, seed=2)
        assert abs(mean - 0.25) <= 0.10

    def test_report(self, tmp_path):
        x, y = blobs(np.random.default_rng(0), per_class=8)
        data = LabeledSet([f"s{i}" for i in range(24)], x, y)
        rep = evaluate(data, "blobs", repeats=3, seed=1)
        assert rep == evaluate(data, "blobs", repeats=3, seed=1)
        assert rep["std_kind"] == "population" and rep["n_items"] == 24
        assert rep["rf_accuracy_std"] == pytest.approx(np.std(rep["per_repeat_accuracy"]))
        write_report(rep, tmp_path / "r.json", tmp_path / "r.csv")
        body = json.loads((tmp_path / "r.json").read_text())
        assert body["embedding_name"] == "blobs" and "per_repeat_accuracy" not in body
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 4

    def test_from_table_drops_unlabeled(self):
        data = LabeledSet.from_table(["a", "b", "c"], np.eye(3), {"a": "x", "c": "y", "b": None})
        assert data.song_ids == ["a", "c"]
