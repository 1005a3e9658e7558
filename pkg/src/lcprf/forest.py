"""CART regression forests and the weights they induce.

A fitted forest defines, for a query point ``x``, a probability vector over
its training rows: each tree spreads ``1/k`` over the bootstrap members of
the leaf containing ``x`` in proportion to their bootstrap counts.  The
same weights give the mean prediction, the quantile-regression-forest
c.d.f., and the localizer rows used for conformal calibration.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import make_rng
from .core import LEVEL_TOL, DataError, DomainError, merge_duplicates

FOREST_FORMAT = 1


@dataclass
class Tree:
    """Array-backed binary tree.

    Internal nodes have ``feature >= 0`` and send ``x[feature] <= threshold``
    left.  Leaves have ``feature == -1`` and ``leaf[node]`` indexes the
    leaf tables: members of leaf ``j`` are
    ``members[ptr[j]:ptr[j + 1]]`` with bootstrap ``counts`` alongside.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    ptr: np.ndarray
    members: np.ndarray
    counts: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self):
        return self.ptr.size - 1

    @property
    def population(self):
        """Bootstrap population ``N`` of each leaf."""
        seg = np.repeat(np.arange(self.n_leaves), np.diff(self.ptr))
        return np.bincount(seg, weights=self.counts, minlength=self.n_leaves)

    def leaf_members(self, j):
        s, e = self.ptr[j], self.ptr[j + 1]
        return self.members[s:e], self.counts[s:e]

    def apply(self, X):
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = np.arange(X.shape[0])
        while active.size:
            f = self.feature[node[active]]
            inner = f >= 0
            active, f = active[inner], f[inner]
            if not active.size:
                break
            cur = node[active]
            go_left = X[active, f] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return self.leaf[node]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    def repopulate(self, X, y):
        """Same splits, leaves refilled with the rows of ``X`` (count one each).

        Leaves that receive no row keep their old value and have population 0.
        """
        leaves = self.apply(X)
        order = np.argsort(leaves, kind="stable")
        ptr = np.searchsorted(leaves[order], np.arange(self.n_leaves + 1))
        sums = np.bincount(leaves, weights=y, minlength=self.n_leaves)
        sizes = np.diff(ptr)
        value = np.where(sizes > 0, sums / np.maximum(sizes, 1), self.value)
        return Tree(self.feature, self.threshold, self.left, self.right, self.leaf,
                    ptr.astype(np.intp), order.astype(np.intp), np.ones(X.shape[0], dtype=np.intp), value)

    @classmethod
    def from_dict(cls, d):
        dtypes = {"threshold": float, "value": float}
        return cls(**{k: np.asarray(d[k], dtype=dtypes.get(k, np.intp))
                      for k in cls.__dataclass_fields__})


def _best_split(X, y, w, idx, feats, min_leaf):
    Xn = X[np.ix_(idx, feats)]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ws = w[idx][order]
    wy = ws * y[idx][order]
    cw = np.cumsum(ws, axis=0)[:-1]
    cy = np.cumsum(wy, axis=0)[:-1]
    tw, ty = cw[-1, 0] + ws[-1, 0], cy[-1] + wy[-1]
    valid = (xs[1:] > xs[:-1]) & (cw >= min_leaf) & (tw - cw >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        # sum-of-squares decrease up to a constant
        gain = cy * cy / cw + (ty - cy) ** 2 / (tw - cw)
    gain = np.where(valid, gain, -np.inf).T
    f, t = np.unravel_index(np.argmax(gain), gain.shape)
    lo, hi = xs[t, f], xs[t + 1, f]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return feats[f], thr


def grow_tree(X, y, counts, rng, mtry, min_leaf, max_leaves=None):
    """Grow one CART tree on the rows with positive bootstrap ``counts``.

    Nodes are expanded breadth-first so that a leaf budget cuts the tree
    evenly.  A node stays a leaf when its bootstrap population is below
    ``2 * min_leaf``, its targets are constant, or no candidate feature
    admits a split leaving ``min_leaf`` on each side.
    """
    d = X.shape[1]
    w = counts.astype(float)
    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    leaf_rows = {}
    queue = [(0, np.flatnonzero(counts > 0))]
    n_leaves = 1
    head = 0
    while head < len(queue):
        node, idx = queue[head]
        head += 1
        split = None
        budget_left = max_leaves is None or n_leaves < max_leaves
        if budget_left and w[idx].sum() >= 2 * min_leaf and np.ptp(y[idx]) > 0:
            feats = np.sort(rng.choice(d, size=mtry, replace=False))
            split = _best_split(X, y, w, idx, feats, min_leaf)
        if split is None:
            leaf_rows[node] = idx
            continue
        f, thr = split
        go_left = X[idx, f] <= thr
        kids = []
        for rows in (idx[go_left], idx[~go_left]):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            kids.append(len(feature) - 1)
            queue.append((kids[-1], rows))
        feature[node], threshold[node] = int(f), float(thr)
        left[node], right[node] = kids
        n_leaves += 1

    n_nodes = len(feature)
    leaf = np.full(n_nodes, -1, dtype=np.intp)
    ptr, members, leaf_counts, value = [0], [], [], []
    for j, node in enumerate(sorted(leaf_rows)):
        rows = leaf_rows[node]
        leaf[node] = j
        members.append(rows)
        leaf_counts.append(counts[rows])
        ptr.append(ptr[-1] + rows.size)
        value.append(np.dot(w[rows], y[rows]) / w[rows].sum())
    return Tree(
        feature=np.asarray(feature, dtype=np.intp),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.intp),
        right=np.asarray(right, dtype=np.intp),
        leaf=leaf,
        ptr=np.asarray(ptr, dtype=np.intp),
        members=np.concatenate(members).astype(np.intp),
        counts=np.concatenate(leaf_counts).astype(np.intp),
        value=np.asarray(value, dtype=float),
    )


def default_min_leaf(n):
    return max(5, math.ceil(math.sqrt(n) / 2))


def _gather(ptr, seg):
    """Positions ``ptr[s]..ptr[s+1]-1`` for every segment ``s`` in ``seg``."""
    starts, ends = ptr[seg], ptr[seg + 1]
    lengths = ends - starts
    offsets = np.repeat(starts - np.cumsum(lengths) + lengths, lengths)
    return np.arange(lengths.sum()) + offsets, lengths


class RandomForest(RegressorMixin, BaseEstimator):
    """Bagged CART regression forest exposing its leaf weights.

    Parameters
    ----------
    n_estimators : int, default=100
        Number of trees ``k``.
    max_features : int, float or None, default=None
        Candidate features per split (``mtry``).  ``None`` uses
        ``ceil(d / 3)``; a float is a fraction of ``d``.
    min_samples_leaf : int or None, default=None
        Minimum bootstrap population of a leaf.  ``None`` uses
        ``max(5, ceil(sqrt(n) / 2))``.
    max_leaf_nodes : int or None, default=None
        Leaf budget per tree; unbounded when ``None``.
    bootstrap : bool, default=True
        Draw ``max_samples`` rows with replacement per tree.  When false
        every row enters every tree once.
    max_samples : int or None, default=None
        Bootstrap size ``a_n``; ``None`` means ``n``.
    random_state : int, default=0
        Tree ``l`` draws from its own stream keyed on ``(random_state, l)``.
    """

    def __init__(self, n_estimators=100, max_features=None, min_samples_leaf=None,
                 max_leaf_nodes=None, bootstrap=True, max_samples=None, random_state=0):
        self.n_estimators = n_estimators
        self.max_features = max_features
        self.min_samples_leaf = min_samples_leaf
        self.max_leaf_nodes = max_leaf_nodes
        self.bootstrap = bootstrap
        self.max_samples = max_samples
        self.random_state = random_state

    def _resolved_params(self, n, d):
        k = int(self.n_estimators)
        if k < 1:
            raise ValueError(f"n_estimators must be >= 1, got {k}")
        mf = self.max_features
        if mf is None:
            mtry = math.ceil(d / 3)
        elif isinstance(mf, float):
            mtry = max(1, math.ceil(mf * d))
        else:
            mtry = int(mf)
        if not 1 <= mtry <= d:
            raise ValueError(f"max_features must resolve to 1..{d}, got {mtry}")
        min_leaf = default_min_leaf(n) if self.min_samples_leaf is None else int(self.min_samples_leaf)
        if min_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        a_n = n if self.max_samples is None else int(self.max_samples)
        if a_n < 1:
            raise ValueError("max_samples must be >= 1")
        if self.max_leaf_nodes is not None and int(self.max_leaf_nodes) < 1:
            raise ValueError("max_leaf_nodes must be >= 1")
        return k, mtry, min_leaf, a_n

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        n, d = X.shape
        k, mtry, min_leaf, a_n = self._resolved_params(n, d)
        if n < min_leaf:
            raise ValueError(f"cannot fit: {n} rows is fewer than min_samples_leaf={min_leaf}")
        trees = []
        max_leaves = None if self.max_leaf_nodes is None else int(self.max_leaf_nodes)
        for l in range(k):
            rng = make_rng(self.random_state, l)
            if self.bootstrap:
                counts = np.bincount(rng.integers(0, n, size=a_n), minlength=n)
            else:
                counts = np.ones(n, dtype=np.intp)
            trees.append(grow_tree(X, y, counts, rng, mtry, min_leaf, max_leaves))
        self.trees_ = trees
        self.X_train_ = X
        self.y_train_ = y
        self.n_features_in_ = d
        self.min_leaf_ = min_leaf
        self.mtry_ = mtry
        return self

    def repopulate(self, X, y):
        """Copy of the forest with the same splits but leaves holding ``(X, y)``.

        Growing the splits on one sample and filling the leaves from another
        gives honest weights: they depend on the second sample only through
        which leaf each row falls in, never on its target.
        """
        check_is_fitted(self, "trees_")
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = clone(self)
        out.trees_ = [t.repopulate(X, y) for t in self.trees_]
        out.X_train_, out.y_train_ = X, y
        out.n_features_in_ = self.n_features_in_
        out.min_leaf_, out.mtry_ = self.min_leaf_, self.mtry_
        return out

    def _check_X(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=float, ensure_2d=False)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    @property
    def n_train_(self):
        return self.X_train_.shape[0]

    def apply(self, X):
        """Leaf indices, shape ``(n_queries, n_estimators)``."""
        X = self._check_X(X)
        return np.column_stack([t.apply(X) for t in self.trees_])

    def predict(self, X):
        """Forest mean ``sum_i w(x, X_i) Y_i``."""
        X = self._check_X(X)
        return np.mean([t.value[t.apply(X)] for t in self.trees_], axis=0)

    def weights(self, X):
        """Dense weight matrix ``w(x, X_i)``, shape ``(n_queries, n_train)``.

        No slot is reserved for the query itself.  Rows sum to one except
        after :meth:`repopulate`, where a query may land in an empty leaf.
        """
        X = self._check_X(X)
        m, n, k = X.shape[0], self.n_train_, len(self.trees_)
        W = np.zeros((m, n))
        for t in self.trees_:
            leaves = t.apply(X)
            pos, lengths = _gather(t.ptr, leaves)
            rows = np.repeat(np.arange(m), lengths)
            pop = t.population[leaves]
            vals = t.counts[pos] / (k * np.repeat(pop, lengths))
            np.add.at(W, (rows, t.members[pos]), vals)
        return W

    def predict_quantile(self, X, beta):
        """Quantile-regression-forest estimate ``Q(beta; sum_i w(x, X_i) 1[Y_i <= y])``."""
        beta = float(beta)
        if not 0.0 <= beta <= 1.0:
            raise DomainError(f"beta must lie in [0, 1], got {beta!r}")
        W = self.weights(X)
        order = np.argsort(self.y_train_, kind="stable")
        cum = np.cumsum(W[:, order], axis=1)
        k = (cum < beta - LEVEL_TOL).sum(axis=1)
        return self.y_train_[order][np.minimum(k, order.size - 1)]

    def to_dict(self):
        check_is_fitted(self, "trees_")
        return {
            "forest_format": FOREST_FORMAT,
            "params": self.get_params(),
            "X_train": self.X_train_.tolist(),
            "y_train": self.y_train_.tolist(),
            "trees": [t.to_dict() for t in self.trees_],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("forest_format") != FOREST_FORMAT:
            raise DataError(f"unsupported forest format {d.get('forest_format')!r}")
        forest = cls(**d["params"])
        forest.X_train_ = np.asarray(d["X_train"], dtype=float)
        forest.y_train_ = np.asarray(d["y_train"], dtype=float)
        forest.n_features_in_ = forest.X_train_.shape[1]
        n = forest.X_train_.shape[0]
        _, forest.mtry_, forest.min_leaf_, _ = forest._resolved_params(n, forest.n_features_in_)
        forest.trees_ = [Tree.from_dict(t) for t in d["trees"]]
        return forest


def localizer_row(forest, anchor, x_test):
    """Localizer weights of one anchor over the training rows plus the test slot.

    ``anchor`` is a training-row index, or ``None`` to anchor at ``x_test``.
    Returns a vector of length ``n + 1``; the last entry is the test slot.
    In each tree the test point joins the leaf it falls in, raising that
    leaf's population by one, so the row stays a probability vector.
    """
    x_test = np.asarray(x_test, dtype=float).reshape(1, -1)
    if x_test.shape[1] != forest.n_features_in_:
        raise DataError(f"expected {forest.n_features_in_} features, got {x_test.shape[1]}")
    n, k = forest.n_train_, len(forest.trees_)
    x_anchor = x_test if anchor is None else forest.X_train_[[anchor]]
    row = np.zeros(n + 1)
    for t in forest.trees_:
        la = t.apply(x_anchor)[0]
        lt = t.apply(x_test)[0]
        members, counts = t.leaf_members(la)
        shared = la == lt
        pop = counts.sum() + shared
        row[members] += counts / (k * pop)
        if shared:
            row[n] += 1.0 / (k * pop)
    return row


def cross_weight_matrix(forest, x_test):
    """Rows ``localizer_row(forest, i, x_test)`` for every training row ``i``."""
    return np.vstack([localizer_row(forest, i, x_test) for i in range(forest.n_train_)])


def conditional_cdf(row, residuals, v):
    """Residual distribution of one localizer row with the test slot placed at ``v``."""
    row = np.asarray(row, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if row.size != residuals.size + 1:
        raise DomainError(f"row has {row.size} entries for {residuals.size} residuals")
    return merge_duplicates(np.r_[residuals, v], row)
