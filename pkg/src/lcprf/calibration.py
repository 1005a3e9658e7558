"""Split-conformal, localized (LCP-RF) and training-conditional thresholds.

Notation used throughout: ``V`` are the calibration scores, ``w(i, j)`` the
localizer weight of calibration row ``j`` in the row anchored at ``X_i``,
``p_i`` the weight row ``i`` gives the test slot, and ``t_j`` the weight
the test row gives calibration row ``j``.  With the unknown test score set
to ``v``, the mass row ``i`` puts strictly below its own score is

    m_i(v) = sum_j w(i, j) 1[V_j < V_i] + p_i 1[v < V_i]

and the test row's is ``theta(v) = sum_j t_j 1[V_j < v]``.  Since
``V_i <= Q(a; F_i)`` holds exactly when ``m_i < a``, the search for the
adapted level and the test inversion both reduce to comparing these
masses.  :func:`lcp_threshold_naive` and :func:`alpha_tilde_naive` evaluate
the definitions literally with explicit distributions; the fast routines
work on the masses directly and must agree with them.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LEVEL_TOL,
    DataError,
    DomainError,
    check_alpha,
    conformal_rank,
    coverage_reached,
    empirical_split_cdf,
    weighted_quantile,
)
from .forest import RandomForest, conditional_cdf, cross_weight_matrix, localizer_row

log = logging.getLogger(__name__)

METHODS = ("split", "lcp-rf", "qrf-tc", "lcp-rf-tc")


def split_threshold(residuals, alpha):
    """``Q(1 - alpha)`` of the residuals with a ``+inf`` atom; the split-CP radius."""
    alpha = check_alpha(alpha)
    return weighted_quantile(1.0 - alpha, empirical_split_cdf(residuals))


@dataclass
class _Local:
    """Localizer quantities for one test point."""

    colocated: np.ndarray  # (k, n) anchor i shares the test leaf in tree l
    below: np.ndarray      # sum_j w(i, j) 1[V_j < V_i]
    slot: np.ndarray       # p_i
    test_row: np.ndarray   # t_j
    test_slot: float       # p_{n+1}


class LcpModel:
    """Calibration scores plus a localizer forest fitted on them.

    Parameters
    ----------
    localizer : RandomForest
        Forest fitted on ``(X_cal, residuals)``.
    alpha : float
        Target miscoverage.
    """

    def __init__(self, localizer, alpha):
        self.localizer = localizer
        self.alpha = check_alpha(alpha)
        V = localizer.y_train_
        self.residuals = V
        self.n = V.size
        self.order = np.argsort(V, kind="stable")
        self.sorted_residuals = V[self.order]
        self.order_stats = np.r_[self.sorted_residuals, np.inf]
        trees = localizer.trees_
        self.k = len(trees)
        self.leaf_of = localizer.apply(localizer.X_train_).T
        self.boot = np.zeros((self.k, self.n))
        self.pop = np.empty((self.k, self.n))
        self.leaf_pop = np.zeros((self.k, max(t.n_leaves for t in trees)))
        for l, t in enumerate(trees):
            self.boot[l, t.members] = t.counts
            self.leaf_pop[l, :t.n_leaves] = t.population
            self.pop[l] = self.leaf_pop[l, self.leaf_of[l]]
        self.count_below = self._count_below()
        self._dense = None
        self._gamma = None

    @classmethod
    def fit(cls, X_cal, residuals, alpha, **forest_params):
        forest = RandomForest(**forest_params).fit(X_cal, residuals)
        return cls(forest, alpha)

    @classmethod
    def fit_honest(cls, X_grow, V_grow, X_cal, residuals, alpha, **forest_params):
        """Localizer whose splits come from ``(X_grow, V_grow)`` only.

        The calibration rows fill the leaves but never influence a split,
        so the weights treat calibration and test points alike.
        """
        forest = RandomForest(**forest_params).fit(X_grow, V_grow)
        return cls(forest.repopulate(X_cal, residuals), alpha)

    def _count_below(self):
        """``c[l, i]``: bootstrap count in anchor ``i``'s leaf of tree ``l`` with score below ``V_i``."""
        k, n = self.k, self.n
        key = (self.leaf_of + (np.arange(k) * (self.leaf_of.max() + 1))[:, None]).ravel()
        V = np.tile(self.residuals, k)
        B = self.boot.ravel()
        order = np.lexsort((V, key))
        ks, vs, bs = key[order], V[order], B[order]
        excl = np.cumsum(bs) - bs
        new_group = np.r_[True, ks[1:] != ks[:-1]]
        group_base = excl[np.maximum.accumulate(np.where(new_group, np.arange(ks.size), 0))]
        new_run = new_group | np.r_[True, vs[1:] != vs[:-1]]
        run_first = np.maximum.accumulate(np.where(new_run, np.arange(ks.size), 0))
        out = np.empty(ks.size)
        out[order] = excl[run_first] - group_base
        return out.reshape(k, n)

    def test_leaves(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.localizer.n_features_in_:
            raise DataError(f"expected {self.localizer.n_features_in_} features, got {X.shape[1]}")
        return self.localizer.apply(X)

    def localize(self, x, test_leaf=None):
        """Localizer masses for one test point (``test_leaf`` skips the tree walk)."""
        if test_leaf is None:
            test_leaf = self.test_leaves(x)[0]
        M = self.leaf_of == test_leaf[:, None]
        test_pop = self.leaf_pop[np.arange(self.k), test_leaf]
        k = self.k
        below = (self.count_below / (self.pop + M)).sum(axis=0) / k
        slot = (M / (self.pop + 1.0)).sum(axis=0) / k
        test_row = (self.boot * M / (test_pop + 1.0)[:, None]).sum(axis=0) / k
        test_slot = float((1.0 / (test_pop + 1.0)).sum() / k)
        return _Local(M, below, slot, test_row, test_slot)

    def localize_many(self, X):
        for leaf in self.test_leaves(X):
            yield self.localize(None, leaf)

    # -- dense weight structures, built on first use -------------------------

    @property
    def calibration_weights(self):
        """``w(i, j)`` over calibration rows, no test point present (n x n)."""
        if self._dense is None:
            W = np.zeros((self.n, self.n))
            for l, t in enumerate(self.localizer.trees_):
                anchors_by_leaf = np.argsort(self.leaf_of[l], kind="stable")
                bounds = np.searchsorted(self.leaf_of[l][anchors_by_leaf], np.arange(t.n_leaves + 1))
                pop = t.population
                for j in range(t.n_leaves):
                    anchors = anchors_by_leaf[bounds[j]:bounds[j + 1]]
                    if anchors.size:
                        members, counts = t.leaf_members(j)
                        W[np.ix_(anchors, members)] += counts / (self.k * pop[j])
            self._dense = W
        return self._dense

    def _tie_ends(self):
        s = self.sorted_residuals
        last = np.r_[s[1:] != s[:-1], True]
        ends = np.flatnonzero(last)
        return ends[np.searchsorted(ends, np.arange(self.n))]

    def _gamma_index(self):
        """No-test cumulative masses: per-row table and a globally sorted index."""
        if self._gamma is None:
            ends = self._tie_ends()
            G = np.cumsum(self.calibration_weights[:, self.order], axis=1)[:, ends]
            fresh = np.ones_like(G, dtype=bool)
            fresh[:, 1:] = G[:, 1:] != G[:, :-1]
            vals = G[fresh]
            rows = np.nonzero(fresh)[0]
            srt = np.argsort(vals, kind="stable")
            # row i shifted by 2i: one sorted array for per-row searches
            flat = (G + 2.0 * np.arange(self.n)[:, None]).ravel()
            self._gamma = (G, flat, vals[srt], rows[srt], ends)
        return self._gamma


def _members(model, members):
    if members is None:
        return np.arange(model.n)
    members = np.asarray(members, dtype=np.intp)
    if members.size == 0:
        raise DomainError("empty calibration subset")
    return members


def _theta(model, test_row, v):
    """Test-row mass strictly below ``v`` (array of ``v`` allowed)."""
    prefix = np.r_[0.0, np.cumsum(test_row[model.order])]
    return prefix[np.searchsorted(model.sorted_residuals, v, side="left")]


def lcp_threshold(model, x, members=None, loc=None):
    """Largest calibration score accepted by the localized test inversion.

    ``members`` restricts the coverage sum and the candidate scores to a
    subset of calibration rows (groupwise calibration); the localizer rows
    themselves are never truncated.
    """
    R = _members(model, members)
    if loc is None:
        loc = model.localize(x)
    V = model.residuals[R]
    a, p = loc.below[R], loc.slot[R]
    cand = np.r_[np.sort(V), np.inf]
    theta = _theta(model, loc.test_row, cand)
    r = conformal_rank(model.alpha, R.size + 1)
    k_score = np.searchsorted(cand, V, side="left")
    k_plain = np.searchsorted(theta, a + LEVEL_TOL, side="right")
    k_slot = np.searchsorted(theta, a + p + LEVEL_TOL, side="right")
    diff = np.zeros(cand.size + 1)
    np.add.at(diff, np.maximum(k_score, k_plain), 1)
    part = k_slot < k_score
    np.add.at(diff, k_slot[part], 1)
    np.add.at(diff, k_score[part], -1)
    count = np.cumsum(diff)[:-1]
    accepted = np.flatnonzero(count <= r - 1)
    return float(cand[accepted[-1]]) if accepted.size else -math.inf


def lcp_thresholds(model, X, members=None):
    return np.array([lcp_threshold(model, None, members, loc) for loc in model.localize_many(X)])


def alpha_tilde(model, x, v=math.inf, members=None, loc=None):
    """Smallest candidate level whose coverage sum reaches ``1 - alpha``.

    Candidate levels are 0, 1 and every cumulative mass of the rows taking
    part in the sum (the test row included), with the test slot placed at
    ``v``.  Returns ``1.0`` when no candidate level reaches the target.
    """
    R = _members(model, members)
    if loc is None:
        loc = model.localize(x)
    V = model.residuals
    theta = float(_theta(model, loc.test_row, v))
    m = loc.below[R] + loc.slot[R] * (v < V[R])
    vals = np.sort(np.r_[m, theta])
    r = conformal_rank(model.alpha, R.size + 1)
    s = vals[r - 1]
    if s <= LEVEL_TOL:
        return 0.0
    thr = s + LEVEL_TOL
    best = 1.0 if 1.0 > thr else math.inf

    G0, flat, g_vals, g_rows, ends = model._gamma_index()
    in_R = np.zeros(model.n, dtype=bool)
    in_R[R] = True
    changed = loc.slot > 0
    allowed = in_R & ~changed
    pos = int(np.searchsorted(g_vals, thr, side="right"))
    step = 64
    while pos < g_vals.size:
        hit = np.flatnonzero(allowed[g_rows[pos:pos + step]])
        if hit.size:
            best = min(best, float(g_vals[pos + hit[0]]))
            break
        pos += step
        step *= 2

    cut = int(np.searchsorted(model.sorted_residuals, v, side="left"))
    own_atom = cut == model.n or model.sorted_residuals[cut] != v
    cands = [_row_levels(model, loc.test_row, loc.test_slot, ends, cut, own_atom)]
    S = np.flatnonzero(in_R & changed)
    if S.size:
        cands.append(_changed_row_levels(model, loc, S, G0, flat, ends, cut, own_atom, thr))
    cands = np.concatenate(cands)
    cands = cands[cands > thr]
    if cands.size:
        best = min(best, float(cands.min()))
    return best if math.isfinite(best) else 1.0


def _row_levels(model, row, slot, ends, cut, own_atom):
    G = np.cumsum(row[model.order])[ends]
    G[cut:] += slot
    if own_atom:
        G = np.r_[G, (G[cut - 1] if cut > 0 else 0.0) + slot]
    return G


def _changed_row_levels(model, loc, S, G0, flat, ends, cut, own_atom, thr):
    """Cumulative masses of rows ``S`` that may be the first to pass ``thr``.

    Adding the test point moves mass ``p_i`` of row ``i`` from its leaf
    mates to the test slot, so each such row stays within ``p_i`` of its
    no-test version and only positions inside that band need evaluating.
    """
    n = model.n
    M = loc.colocated
    # mass each tree moves off every calibration column
    removed = model.boot * M * (1.0 / model.pop - 1.0 / (model.pop + 1.0)) / model.k
    CD = np.cumsum(removed[:, model.order], axis=1)[:, ends]
    p = loc.slot[S]
    base = S * n
    # the shifted table is only accurate to ~1e-12, so pad the band
    lo = np.searchsorted(flat, 2.0 * S + (thr - p - 1e-9), side="right") - base
    hi = np.searchsorted(flat, 2.0 * S + (thr + p + 1e-9), side="right") - base
    lo = np.clip(lo - 1, 0, n - 1)
    hi = np.clip(hi, 0, n - 1)
    width = hi - lo + 1
    row = np.repeat(np.arange(S.size), width)
    start = np.cumsum(width) - width
    uu = lo[row] + np.arange(row.size) - start[row]
    ii = S[row]
    vals = G0[ii, uu] - (M[:, ii] * CD[:, uu]).sum(axis=0) + p[row] * (uu >= cut)
    if own_atom:
        if cut > 0:
            ext = G0[S, cut - 1] - (M[:, S] * CD[:, [cut - 1]]).sum(axis=0) + p
        else:
            ext = p
        vals = np.r_[vals, ext]
    return vals


def alpha_tilde_naive(model, x, v=math.inf, members=None, cache=None):
    """Literal evaluation: explicit rows, candidate set and binary search."""
    R = _members(model, members)
    forest, V = model.localizer, model.residuals
    if cache is None:
        cache = {}
    if "W" not in cache:
        cache["W"] = cross_weight_matrix(forest, x)
        cache["t"] = localizer_row(forest, None, x)
    W, t = cache["W"], cache["t"]
    cdfs = [conditional_cdf(W[i], V, v) for i in R]
    test_cdf = conditional_cdf(t, V, v)
    levels = np.unique(np.concatenate([[0.0, 1.0], test_cdf.cumulative,
                                       *[F.cumulative for F in cdfs]]))
    levels = levels[levels <= 1.0]

    def covered(a):
        hits = sum(V[i] <= weighted_quantile(a, F) for i, F in zip(R, cdfs))
        hits += v <= weighted_quantile(a, test_cdf)
        return hits

    def ok(a):
        return coverage_reached(covered(a), R.size + 1, model.alpha)

    if not ok(levels[-1]):
        return 1.0
    lo, hi = -1, levels.size - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(levels[mid]):
            hi = mid
        else:
            lo = mid
    if lo >= 0 and covered(levels[lo]) > covered(levels[hi]):
        raise AssertionError("coverage sum decreased with the level")
    return float(levels[hi])


def lcp_threshold_naive(model, x, members=None):
    """Brute-force test inversion over every candidate score."""
    R = _members(model, members)
    cache = {}
    alpha_tilde_naive(model, x, math.inf, R, cache)
    F = conditional_cdf(cache["t"], model.residuals, math.inf)
    best = -math.inf
    for v in np.r_[np.sort(model.residuals[R]), np.inf]:
        a = alpha_tilde_naive(model, x, v, R, cache)
        if v <= weighted_quantile(a, F):
            best = max(best, float(v))
    return best


def accepted_scores(model, x, members=None):
    """Acceptance flag of every candidate score (sorted, then ``+inf``)."""
    R = _members(model, members)
    cache = {}
    alpha_tilde_naive(model, x, math.inf, R, cache)
    F = conditional_cdf(cache["t"], model.residuals, math.inf)
    cand = np.r_[np.sort(model.residuals[R]), np.inf]
    flags = np.array([v <= weighted_quantile(alpha_tilde_naive(model, x, v, R, cache), F)
                      for v in cand])
    return cand, flags


def test_row_quantile(model, loc, level):
    """``Q(level; F)`` for the test row with its slot at ``+inf``."""
    level = min(1.0, float(level))
    mass = loc.test_row[model.order]
    cum = np.cumsum(mass)
    k = int(np.searchsorted(cum, level - LEVEL_TOL, side="left"))
    if k < model.n:
        # only level 0 can land on a leading zero-mass atom
        k += int(np.argmax(mass[k:] > 0)) if mass[k] == 0 else 0
        if mass[k] > 0:
            return float(model.sorted_residuals[k])
    return math.inf if loc.test_slot > 0 else float(model.sorted_residuals[-1])


@dataclass
class TcModel:
    """Training-conditional correction on top of an :class:`LcpModel`."""

    inner: LcpModel
    alpha_hat: float
    grid: np.ndarray
    coverage: np.ndarray
    adaptive: bool = True
    saturated: bool = False
    n2: int = 0

    def delta(self, epsilon):
        """``|T| exp(-2 n2 eps^2)`` reported with ``|T|`` grid points."""
        return self.grid.size * math.exp(-2.0 * self.n2 * epsilon ** 2)

    def level(self, x, loc=None):
        base = alpha_tilde(self.inner, x, math.inf, loc=loc) if self.adaptive else 1.0 - self.inner.alpha
        return min(1.0, base + self.alpha_hat)

    def threshold(self, x):
        return self.thresholds(np.atleast_2d(x))[0]

    def thresholds(self, X):
        return np.array([test_row_quantile(self.inner, loc, self.level(None, loc))
                         for loc in self.inner.localize_many(X)])


def tc_grid(alpha, grid_size):
    if grid_size < 1:
        raise DomainError("grid size must be >= 1")
    return np.arange(grid_size + 1) * (alpha / grid_size)


def tc_fit(inner, X2, V2, grid_size=100, adaptive=True):
    """Pick the smallest grid correction giving ``1 - alpha`` coverage on the second split.

    ``inner`` is calibrated on the first split only.  With ``adaptive``
    false the base level is ``1 - alpha`` for every point (QRF-TC).
    """
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    V2 = np.asarray(V2, dtype=float)
    alpha = inner.alpha
    grid = tc_grid(alpha, grid_size)
    base = np.empty(V2.size)
    below = np.empty(V2.size)
    for i, loc in enumerate(inner.localize_many(X2)):
        base[i] = alpha_tilde(inner, None, math.inf, loc=loc) if adaptive else 1.0 - alpha
        below[i] = _theta(inner, loc.test_row, V2[i])
    levels = np.minimum(1.0, base[None, :] + grid[:, None])
    hit = (below[None, :] < levels - LEVEL_TOL) | (below[None, :] == 0.0)
    counts = hit.sum(axis=1)
    coverage = counts / V2.size
    feasible = np.flatnonzero([coverage_reached(c, V2.size, alpha) for c in counts])
    saturated = feasible.size == 0
    if saturated:
        log.warning("no correction on the grid reaches coverage %.3f; using alpha", 1 - alpha)
        alpha_hat = float(grid[-1])
    else:
        alpha_hat = float(grid[feasible[0]])
    return TcModel(inner, alpha_hat, grid, coverage, adaptive, saturated, V2.size)


@dataclass
class SplitModel:
    residuals: np.ndarray
    alpha: float
    radius: float = field(init=False)

    def __post_init__(self):
        self.radius = split_threshold(self.residuals, self.alpha)


def predict_threshold(method, state, X):
    """Score thresholds for each row of ``X`` under a fitted calibration ``state``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if state is None:
        raise DomainError(f"method {method!r} is not fitted")
    if method == "split":
        return np.full(X.shape[0], state.radius)
    if method == "lcp-rf":
        return lcp_thresholds(state, X)
    if method in ("qrf-tc", "lcp-rf-tc"):
        return state.thresholds(X)
    raise DomainError(f"unknown method {method!r}")
