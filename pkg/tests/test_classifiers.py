import numpy as np
import pytest

from enfuse.classifiers import (
    fit_gbt,
    fit_gnb,
    fit_knn,
    fit_rf,
    fit_svm,
    load_classifier,
    predict,
    predict_proba,
    save_classifier,
)
from enfuse.errors import InvalidDatasetError
from enfuse.linalg import standardize


def blobs(centers, n=20, spread=0.5, seed=0):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, center in enumerate(centers):
        xs.append(rng.normal(center, spread, size=(n, len(center))))
        ys.append(np.full(n, label))
    return np.concatenate(xs), np.concatenate(ys)


class TestSvm:
    def test_separable_blobs(self):
        x, y = blobs([(-3, 0), (3, 0)], spread=0.5, seed=1)
        clf = fit_svm(x, y)
        assert np.array_equal(predict(clf, x), y)

    def test_three_class(self):
        x, y = blobs([(-4, 0), (4, 0), (0, 5)], spread=0.4, seed=2)
        clf = fit_svm(x, y)
        assert np.mean(predict(clf, x) == y) == 1.0

    def test_scaling_invariance_after_standardization(self):
        x, y = blobs([(-2, 1), (2, -1)], seed=3)
        a = predict(fit_svm(standardize(x)[0], y), standardize(x)[0])
        b = predict(fit_svm(standardize(10 * x)[0], y), standardize(10 * x)[0])
        assert np.array_equal(a, b)

    def test_symmetric_bias_near_zero(self):
        x = np.array([[1.0], [-1.0], [1.5], [-1.5]])
        y = np.array([1, 0, 1, 0])
        clf = fit_svm(x, y)
        assert np.max(np.abs(clf.arrays["b"])) < 1e-3

    def test_single_class_rejected(self):
        with pytest.raises(InvalidDatasetError):
            fit_svm(np.zeros((5, 2)), np.zeros(5, dtype=int))


class TestKnn:
    def test_hand_example(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]])
        y = np.array([0, 0, 1])
        clf = fit_knn(x, y)
        # distances from (0.5, 0): 0.5, 0.5, 3.5 -> weights 2, 2, 0.2857 -> class 0
        assert predict(clf, [[0.5, 0.0]])[0] == 0

    def test_exact_match_rule(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [0.1, 0.0]])
        y = np.array([0, 1, 1])
        clf = fit_knn(x, y)
        p = predict_proba(clf, [[1.0, 0.0]])
        assert np.array_equal(p[0], [0.0, 1.0])

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(40, 3))
        y = rng.integers(0, 3, size=40)
        clf = fit_knn(x, y)
        queries = rng.normal(size=(200, 3))
        got = predict(clf, queries)
        for q, label in zip(queries, got):
            dist = np.array([np.sqrt(((q - row) ** 2).sum()) for row in x])
            nearest = np.argsort(dist, kind="stable")[:3]
            weights = np.zeros(3)
            for j in nearest:
                weights[y[j]] += 1.0 / (dist[j] + 1e-12)
            assert label == int(np.argmax(weights))

    def test_too_few_points_rejected(self):
        with pytest.raises(InvalidDatasetError):
            fit_knn(np.zeros((2, 2)), np.array([0, 1]))


class TestGnb:
    def test_symmetric_posterior(self):
        x = np.array([[-2.0], [0.0], [0.0], [2.0]])
        y = np.array([0, 0, 1, 1])
        clf = fit_gnb(x, y)
        p = predict_proba(clf, [[0.0]])[0]
        assert np.allclose(p, [0.5, 0.5], atol=1e-9)
        # argmax tie resolves to the lowest class index
        assert predict(clf, [[0.0]])[0] == 0

    def test_query_at_mean_dominates(self):
        x, y = blobs([(0.0,), (100.0,)], n=10, spread=1.0, seed=4)
        clf = fit_gnb(x, y)
        mean0 = x[y == 0].mean()
        assert predict_proba(clf, [[mean0]])[0, 0] > 0.999

    def test_closed_form_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0], [5.0, 1.0], [7.0, 3.0]])
        y = np.array([0, 0, 1, 1])
        clf = fit_gnb(x, y)
        q = np.array([3.0, 2.0])
        floor = 1e-9 * x.var(axis=0).max()
        dens = np.zeros(2)
        for cls in range(2):
            rows = x[y == cls]
            mu, var = rows.mean(axis=0), rows.var(axis=0) + floor
            dens[cls] = 0.5 * np.prod(
                np.exp(-((q - mu) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var))
        expected = dens / dens.sum()
        assert np.allclose(predict_proba(clf, [q])[0], expected, atol=1e-9)

    def test_single_sample_class_rejected(self):
        with pytest.raises(InvalidDatasetError):
            fit_gnb(np.zeros((3, 1)), np.array([0, 0, 1]))


class TestRf:
    def test_pure_class_single_leaves(self):
        x = np.random.default_rng(0).normal(size=(10, 2))
        y = np.zeros(10, dtype=int)
        clf = fit_rf(x, y, n_trees=10, seed=0)
        assert all(len(t.feature) == 1 for t in clf.trees)
        assert np.array_equal(predict_proba(clf, x[:3]), np.ones((3, 1)))

    def test_xor_pattern(self):
        x, y = blobs([(-2, -2), (2, 2), (-2, 2), (2, -2)], n=10, spread=0.3, seed=5)
        y = np.where(y < 2, 0, 1)  # diagonal clusters share a label
        clf = fit_rf(x, y, seed=1)
        assert np.mean(predict(clf, x) == y) == 1.0

    def test_seed_determinism(self):
        x, y = blobs([(-1, 0), (1, 0)], seed=6)
        a = fit_rf(x, y, n_trees=20, seed=3)
        b = fit_rf(x, y, n_trees=20, seed=3)
        assert np.array_equal(predict_proba(a, x), predict_proba(b, x))

    def test_different_seed_differs(self):
        x, y = blobs([(-1, 0), (1, 0)], spread=1.5, seed=6)
        a = fit_rf(x, y, n_trees=5, seed=3)
        b = fit_rf(x, y, n_trees=5, seed=4)
        assert not np.array_equal(predict_proba(a, x), predict_proba(b, x))


class TestGbt:
    def test_separable_blobs_fast(self):
        x, y = blobs([(-3, 0), (3, 0), (0, 4)], n=15, spread=0.5, seed=8)
        clf = fit_gbt(x, y, rounds=10)
        assert np.mean(predict(clf, x) == y) == 1.0

    def test_log_loss_non_increasing(self):
        x, y = blobs([(-1, 0), (1, 0)], spread=1.2, seed=9)
        clf = fit_gbt(x, y, rounds=15)
        log = clf.meta["train_log_loss"]
        assert all(b <= a + 1e-9 for a, b in zip(log, log[1:]))

    def test_root_split_at_true_threshold(self):
        x = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]])
        y = np.array([0, 0, 0, 1, 1, 1])
        clf = fit_gbt(x, y, rounds=1)
        root_feature = clf.trees[0].feature[0]
        root_threshold = clf.trees[0].threshold[0]
        assert root_feature == 0
        assert root_threshold == 2.5

    def test_consistent_dataset_memorized(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(64, 4))
        y = rng.integers(0, 3, size=64)
        clf = fit_gbt(x, y)
        assert np.mean(predict(clf, x) == y) == 1.0


@pytest.fixture(scope="module")
def fitted():
    x, y = blobs([(-2, 0), (2, 0), (0, 3)], n=8, spread=0.6, seed=11)
    return x, y, {
        "SVM": fit_svm(x, y),
        "KNN": fit_knn(x, y),
        "GNB": fit_gnb(x, y),
        "RF": fit_rf(x, y, n_trees=10, seed=0),
        "GBT": fit_gbt(x, y, rounds=5),
    }


class TestSharedContracts:

    def test_proba_rows_are_distributions(self, fitted):
        x, _, models = fitted
        q = np.random.default_rng(12).normal(size=(10, 2))
        for clf in models.values():
            p = predict_proba(clf, q)
            assert np.all(p >= 0)
            assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_predict_is_argmax(self, fitted):
        x, _, models = fitted
        for clf in models.values():
            p = predict_proba(clf, x)
            assert np.array_equal(predict(clf, x), np.argmax(p, axis=1))

    def test_persistence_roundtrip(self, fitted, tmp_path):
        x, _, models = fitted
        q = np.random.default_rng(13).normal(size=(6, 2))
        for kind, clf in models.items():
            path = tmp_path / f"{kind}.bin"
            save_classifier(clf, path)
            back = load_classifier(path)
            assert back.kind == kind
            assert np.array_equal(predict_proba(back, q), predict_proba(clf, q))
