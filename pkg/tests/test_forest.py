import numpy as np
import pytest

from lcprf.core import DataError
from lcprf.forest import (
    RandomForest,
    Tree,
    _best_split,
    conditional_cdf,
    cross_weight_matrix,
    default_min_leaf,
    grow_tree,
    localizer_row,
)


def brute_split(X, y, w, min_leaf):
    """Exhaustive weighted-SSE split search; ties go to lower feature then threshold."""
    best, arg = np.inf, None
    for f in range(X.shape[1]):
        vals = np.unique(X[w > 0, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2
            left = (X[:, f] <= thr) & (w > 0)
            right = (X[:, f] > thr) & (w > 0)
            wl, wr = w[left].sum(), w[right].sum()
            if wl < min_leaf or wr < min_leaf:
                continue
            sse = sum(
                np.sum(w[m] * (y[m] - np.average(y[m], weights=w[m])) ** 2) for m in (left, right)
            )
            if sse < best - 1e-12:
                best, arg = sse, (f, thr)
    return arg


class TestSplitSearch:
    def test_step_data(self):
        X = np.arange(10.0).reshape(-1, 1)
        y = (X[:, 0] >= 5).astype(float)
        f = RandomForest(n_estimators=1, min_samples_leaf=1, bootstrap=False).fit(X, y)
        t = f.trees_[0]
        assert t.feature[0] == 0 and 4 < t.threshold[0] < 5
        assert t.n_leaves == 2
        for j in range(2):
            members, _ = t.leaf_members(j)
            assert np.ptp(y[members]) == 0

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_exhaustive_search_on_bootstrap_counts(self, seed):
        rng = np.random.default_rng(seed)
        n, d = 30, 3
        X = rng.uniform(size=(n, d))
        y = X[:, seed % d] + 0.1 * rng.normal(size=n)
        w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
        idx = np.flatnonzero(w > 0)
        got = _best_split(X, y, w, idx, np.arange(d), 2)
        want = brute_split(X, y, w, 2)
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1])

    def test_single_leaf_when_min_leaf_is_n(self):
        X = np.random.default_rng(0).uniform(size=(10, 2))
        f = RandomForest(n_estimators=4, min_samples_leaf=10, random_state=1).fit(X, np.arange(10.0))
        assert all(t.n_leaves == 1 for t in f.trees_)

    def test_leaf_population_respects_min_leaf(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(size=(200, 4))
        f = RandomForest(n_estimators=5, min_samples_leaf=7, random_state=0).fit(X, X[:, 0] + rng.normal(size=200))
        for t in f.trees_:
            assert t.population.min() >= 7
            assert t.population.sum() == 200

    def test_leaf_budget(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(300, 2))
        f = RandomForest(n_estimators=3, min_samples_leaf=1, max_leaf_nodes=6).fit(X, rng.normal(size=300))
        assert all(t.n_leaves <= 6 for t in f.trees_)

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            RandomForest(min_samples_leaf=5).fit(np.zeros((3, 1)), np.zeros(3))

    def test_default_min_leaf(self):
        assert default_min_leaf(10) == 5
        assert default_min_leaf(1000) == 16


class TestDeterminism:
    def test_same_seed_same_trees(self):
        rng = np.random.default_rng(0)
        X, y = rng.uniform(size=(80, 3)), rng.normal(size=80)
        a = RandomForest(n_estimators=5, random_state=9).fit(X, y)
        b = RandomForest(n_estimators=5, random_state=9).fit(X, y)
        assert a.to_dict() == b.to_dict()
        assert np.array_equal(a.weights(X), b.weights(X))

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        X, y = rng.uniform(size=(50, 2)), rng.normal(size=50)
        f = RandomForest(n_estimators=4, random_state=2).fit(X, y)
        g = RandomForest.from_dict(f.to_dict())
        assert np.array_equal(f.predict(X), g.predict(X))

    def test_bad_format(self):
        with pytest.raises(DataError):
            RandomForest.from_dict({"forest_format": 99})


class TestWeights:
    @pytest.mark.parametrize("seed", range(100))
    def test_rows_are_probability_vectors(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(5, 60)), int(rng.integers(1, 5))
        X, y = rng.uniform(size=(n, d)), rng.normal(size=n)
        f = RandomForest(n_estimators=int(rng.integers(1, 8)), min_samples_leaf=int(rng.integers(1, 5)),
                         bootstrap=bool(seed % 2), random_state=seed).fit(X, y)
        Q = rng.uniform(size=(4, d))
        W = f.weights(Q)
        assert (W >= 0).all()
        assert np.allclose(W.sum(axis=1), 1.0, atol=1e-9)
        row = localizer_row(f, int(rng.integers(n)), Q[0])
        assert (row >= 0).all() and abs(row.sum() - 1.0) <= 1e-9

    def test_single_leaf_uniform(self):
        n = 9
        X = np.random.default_rng(0).uniform(size=(n, 2))
        f = RandomForest(n_estimators=3, min_samples_leaf=n, bootstrap=False).fit(X, np.arange(n, dtype=float))
        row = localizer_row(f, 0, X[0] + 0.01)
        assert np.allclose(row, 1.0 / (n + 1))
        assert np.allclose(cross_weight_matrix(f, X[1]), 1.0 / (n + 1))
        assert f.predict(X[:1])[0] == pytest.approx(np.mean(np.arange(n)))
        assert f.predict_quantile(X[:1], 0.5)[0] == 4.0

    def test_two_leaf_block(self):
        X = np.array([[0.1], [0.2], [0.3], [0.7], [0.8], [0.9]])
        y = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        f = RandomForest(n_estimators=1, min_samples_leaf=3, bootstrap=False).fit(X, y)
        assert f.trees_[0].threshold[0] == pytest.approx(0.5)
        row = localizer_row(f, 0, np.array([0.95]))
        assert row[-1] == 0.0
        assert np.allclose(row[:3], 1 / 3) and np.all(row[3:6] == 0)
        W = cross_weight_matrix(f, np.array([0.95]))
        assert np.all(W[:3, 3:] == 0) and np.all(W[3:, :3] == 0)
        assert np.allclose(W[3:, -1], 0.25)
        assert f.predict(np.array([[0.9]]))[0] == 1.0

    def test_anchor_at_test_point(self):
        rng = np.random.default_rng(5)
        X, y = rng.uniform(size=(40, 2)), rng.normal(size=40)
        f = RandomForest(n_estimators=6, min_samples_leaf=3, random_state=1).fit(X, y)
        x = rng.uniform(size=2)
        a = localizer_row(f, None, x)
        b = localizer_row(RandomForest.from_dict(f.to_dict()), None, x)
        assert np.array_equal(a, b)
        assert abs(a.sum() - 1) < 1e-12 and a[-1] > 0

    def test_sparsity_follows_leaves(self):
        rng = np.random.default_rng(6)
        X, y = rng.uniform(size=(60, 2)), rng.normal(size=60)
        f = RandomForest(n_estimators=3, min_samples_leaf=4, random_state=0).fit(X, y)
        W = f.weights(X)
        leaves = f.apply(X)
        share = (leaves[:, None, :] == leaves[None, :, :]).any(axis=2)
        assert not np.any((W > 0) & ~share)

    def test_quantile_on_uniform_leaf(self):
        X = np.zeros((10, 1))
        y = np.arange(1.0, 11.0)
        f = RandomForest(n_estimators=1, min_samples_leaf=10, bootstrap=False).fit(X, y)
        assert f.predict_quantile(X[:1], 0.9)[0] == 9.0

    def test_wrong_feature_count(self):
        f = RandomForest(n_estimators=1, min_samples_leaf=1).fit(np.zeros((4, 2)), np.arange(4.0))
        with pytest.raises(DataError):
            f.predict(np.zeros((1, 3)))

    def test_conditional_cdf_places_slot(self):
        F = conditional_cdf([0.25, 0.25, 0.5], [1.0, 2.0], 1.5)
        assert F.atoms == [(1.0, 0.25), (1.5, 0.5), (2.0, 0.25)]


class TestRepopulate:
    def test_leaves_hold_new_rows(self):
        rng = np.random.default_rng(8)
        X, y = rng.uniform(size=(100, 2)), rng.normal(size=100)
        f = RandomForest(n_estimators=4, min_samples_leaf=5, random_state=3).fit(X, y)
        X2, y2 = rng.uniform(size=(30, 2)), rng.normal(size=30)
        g = f.repopulate(X2, y2)
        assert g.n_train_ == 30
        for t, u in zip(f.trees_, g.trees_):
            assert np.array_equal(t.feature, u.feature)
            assert u.population.sum() == 30
            assert np.array_equal(np.sort(u.members), np.arange(30))
        for x in rng.uniform(size=(5, 2)):
            row = localizer_row(g, None, x)
            assert abs(row.sum() - 1.0) < 1e-12

    def test_empty_leaf_population_is_zero(self):
        t = Tree(feature=np.array([0, -1, -1]), threshold=np.array([0.5, 0, 0]), left=np.array([1, -1, -1]),
                 right=np.array([2, -1, -1]), leaf=np.array([-1, 0, 1]), ptr=np.array([0, 2, 2]),
                 members=np.array([0, 1]), counts=np.array([1, 2]), value=np.array([0.0, 1.0]))
        assert t.population.tolist() == [3.0, 0.0]


def test_grow_tree_is_seeded():
    rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
    X = np.random.default_rng(2).uniform(size=(40, 5))
    y = X[:, 2]
    counts = np.ones(40, dtype=np.intp)
    a = grow_tree(X, y, counts, rng_a, 2, 3)
    b = grow_tree(X, y, counts, rng_b, 2, 3)
    assert a.to_dict() == b.to_dict()
