import math

import numpy as np
import pytest
from conftest import random_instance, single_leaf_model, split_order_stat

from lcprf.calibration import (
    LcpModel,
    SplitModel,
    TcModel,
    accepted_scores,
    alpha_tilde,
    alpha_tilde_naive,
    lcp_threshold,
    lcp_threshold_naive,
    lcp_thresholds,
    predict_threshold,
    split_threshold,
    tc_fit,
    tc_grid,
)
from lcprf.core import DomainError, conformal_rank, weighted_quantile
from lcprf.forest import RandomForest, conditional_cdf, localizer_row


class TestSplit:
    def test_examples(self):
        V = np.random.default_rng(0).permutation(np.arange(1.0, 10.0))
        assert split_threshold(V, 0.1) == 9.0
        assert split_threshold([1.0, 2.0, 3.0], 0.1) == math.inf
        assert split_threshold([2.5] * 8, 0.2) == 2.5

    def test_empty(self):
        with pytest.raises(DomainError):
            split_threshold([], 0.1)

    @pytest.mark.parametrize("n", [1, 5, 19, 100])
    @pytest.mark.parametrize("alpha", [0.05, 0.1, 0.37])
    def test_order_statistic(self, n, alpha):
        V = np.random.default_rng(n).normal(size=n)
        assert split_threshold(V, alpha) == split_order_stat(V, alpha)


class TestAlphaTilde:
    def test_uniform(self):
        m = single_leaf_model(np.arange(1.0, 10.0), 0.1)
        assert alpha_tilde(m, np.zeros(2)) == pytest.approx(0.9)
        assert alpha_tilde_naive(m, np.zeros(2)) == pytest.approx(0.9)

    @pytest.mark.parametrize("v", [-1.0, 0.5, 1.0, 2.0, math.inf])
    @pytest.mark.parametrize("alpha", [0.1, 0.4, 0.6])
    def test_single_point(self, v, alpha):
        """n = 1: enumerate the few candidate levels by hand."""
        m = single_leaf_model([1.0], alpha, d=1)
        x = np.zeros(1)
        w = localizer_row(m.localizer, 0, x)
        t = localizer_row(m.localizer, None, x)
        levels = sorted({0.0, 1.0, *np.cumsum(w), *np.cumsum(t)})
        want = 1.0
        for a in levels:
            hits = (1.0 <= weighted_quantile(a, conditional_cdf(w, [1.0], v)))
            hits += v <= weighted_quantile(a, conditional_cdf(t, [1.0], v))
            if hits >= (1 - alpha) * 2 - 1e-9:
                want = a
                break
        assert alpha_tilde(m, x, v) == pytest.approx(want, abs=1e-15)

    def test_independent_of_v_without_test_mass(self):
        """Test point in a leaf no calibration point occupies: every slot is zero."""
        rng = np.random.default_rng(0)
        X = np.r_[rng.uniform(0, 0.4, size=(20, 1)), rng.uniform(0.6, 1, size=(20, 1))]
        V = np.r_[rng.uniform(0, 1, 20), rng.uniform(2, 3, 20)]
        grown = RandomForest(n_estimators=1, min_samples_leaf=10, bootstrap=False).fit(X, V)
        fill = grown.repopulate(X[:20], V[:20])
        m = LcpModel(fill, 0.2)
        x = np.array([0.9])
        assert m.localize(x).slot.max() == 0.0
        vals = {alpha_tilde(m, x, v) for v in [-1.0, 0.3, 5.0, math.inf]}
        assert len(vals) == 1

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_naive(self, seed):
        m, x, rng = random_instance(seed)
        members = None if seed % 2 else np.sort(rng.choice(m.n, size=max(1, m.n // 2), replace=False))
        for v in [math.inf, float(m.residuals[0]), float(np.median(m.residuals)) + 1e-3, -1.0]:
            assert alpha_tilde(m, x, v, members) == pytest.approx(
                alpha_tilde_naive(m, x, v, members), abs=1e-12)


class TestLcpThreshold:
    def test_uniform_reduces_to_split(self):
        V = np.random.default_rng(3).normal(size=9) ** 2
        m = single_leaf_model(V, 0.1)
        assert lcp_threshold(m, np.zeros(2)) == split_order_stat(V, 0.1) == np.sort(V)[8]
        assert lcp_threshold_naive(m, np.zeros(2)) == np.sort(V)[8]

    def test_tiny_alpha_is_infinite(self):
        m = single_leaf_model([1.0, 2.0, 3.0, 4.0, 5.0], 0.001)
        assert lcp_threshold(m, np.zeros(2)) == math.inf
        assert lcp_threshold_naive(m, np.zeros(2)) == math.inf

    @pytest.mark.parametrize("seed", range(20))
    def test_single_leaf_any_query(self, seed):
        rng = np.random.default_rng(seed)
        V = rng.exponential(size=int(rng.integers(3, 40)))
        alpha = float(rng.uniform(0.05, 0.4))
        m = single_leaf_model(V, alpha, seed=seed)
        assert lcp_threshold(m, rng.uniform(size=2)) == split_threshold(V, alpha)

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_naive(self, seed):
        m, x, _ = random_instance(seed)
        assert lcp_threshold(m, x) == lcp_threshold_naive(m, x)

    @pytest.mark.parametrize("seed", range(30))
    def test_acceptance_is_downward_closed(self, seed):
        m, x, _ = random_instance(1000 + seed, n_max=25)
        _, flags = accepted_scores(m, x)
        if flags.any():
            last = np.flatnonzero(flags)[-1]
            assert flags[: last + 1].all()
        cand, _ = accepted_scores(m, x)
        accepted = cand[flags]
        assert lcp_threshold(m, x) == (accepted.max() if accepted.size else -math.inf)

    def test_batch_matches_single(self):
        m, _, rng = random_instance(5, n_max=40)
        X = rng.uniform(size=(6, m.localizer.n_features_in_))
        assert lcp_thresholds(m, X).tolist() == [lcp_threshold(m, x) for x in X]


def tc_oracle(inner, X2, V2, grid, adaptive=True):
    """Grid coverage on the second split through explicit distributions."""
    cov = []
    rows = [conditional_cdf(localizer_row(inner.localizer, None, x), inner.residuals, math.inf) for x in X2]
    base = [alpha_tilde_naive(inner, x) if adaptive else 1 - inner.alpha for x in X2]
    for a in grid:
        hits = [V2[i] <= weighted_quantile(min(1.0, base[i] + a), F) for i, F in enumerate(rows)]
        cov.append(np.mean(hits))
    return np.array(cov)


class TestTrainingConditional:
    def test_grid(self):
        T = tc_grid(0.1, 100)
        assert T.size == 101 and T[0] == 0.0 and T[-1] == pytest.approx(0.1)

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("adaptive", [True, False])
    def test_smallest_feasible(self, seed, adaptive):
        rng = np.random.default_rng(seed)
        n1, n2 = 30, 25
        X = rng.uniform(size=(n1 + n2, 2))
        V = np.abs(rng.normal(size=n1 + n2)) * (1 + 2 * X[:, 0])
        inner = LcpModel.fit(X[:n1], V[:n1], 0.2, n_estimators=3, min_samples_leaf=3, random_state=seed)
        tc = tc_fit(inner, X[n1:], V[n1:], grid_size=20, adaptive=adaptive)
        cov = tc_oracle(inner, X[n1:], V[n1:], tc.grid, adaptive)
        assert np.allclose(tc.coverage, cov)
        ok = np.flatnonzero(cov >= 0.8 - 1e-9)
        assert tc.alpha_hat == (tc.grid[ok[0]] if ok.size else tc.grid[-1])
        assert tc.saturated == (ok.size == 0)

    def test_zero_correction_when_covered(self):
        V = np.arange(1.0, 21.0)
        inner = single_leaf_model(V, 0.1)
        X2 = np.zeros((10, 2))
        tc = tc_fit(inner, X2, np.full(10, 0.5), grid_size=10)
        assert tc.alpha_hat == 0.0

    def test_deficit_forces_correction(self):
        """Calibrate on the small residuals only, then check on larger ones."""
        rng = np.random.default_rng(0)
        V = np.sort(rng.exponential(size=60))
        inner = single_leaf_model(V[:40], 0.1)
        X2 = np.zeros((20, 2))
        V2 = rng.permutation(np.r_[V[:12], V[-8:]])
        tc = tc_fit(inner, X2, V2, grid_size=50, adaptive=False)
        assert tc.alpha_hat > 0
        cov = tc_oracle(inner, X2, V2, tc.grid, adaptive=False)
        assert np.all(np.diff(cov) >= 0)
        assert np.all(cov[tc.grid < tc.alpha_hat] < 0.9 - 1e-9)

    @pytest.mark.parametrize("n", [9, 99])
    def test_uniform_reduction(self, n):
        V = np.random.default_rng(n).normal(size=n) ** 2
        inner = single_leaf_model(V, 0.1)
        for adaptive in (False, True):
            tc = TcModel(inner, 0.0, tc_grid(0.1, 10), np.zeros(11), adaptive)
            assert tc.threshold(np.zeros(2)) == split_order_stat(V, 0.1)

    def test_delta_uses_grid_size(self):
        tc = TcModel(None, 0.0, tc_grid(0.1, 100), np.zeros(101), n2=1000)
        assert tc.delta(0.05) == pytest.approx(101 * math.exp(-2 * 1000 * 0.05 ** 2))


class TestDispatch:
    def test_split(self):
        s = SplitModel(np.arange(1.0, 10.0), 0.1)
        assert predict_threshold("split", s, np.zeros((3, 2))).tolist() == [9.0] * 3

    def test_unfitted(self):
        with pytest.raises(DomainError):
            predict_threshold("lcp-rf", None, np.zeros((1, 2)))

    def test_unknown(self):
        with pytest.raises(DomainError):
            predict_threshold("jackknife", SplitModel(np.ones(3), 0.1), np.zeros((1, 2)))

    def test_lcp(self):
        m, x, _ = random_instance(2)
        assert predict_threshold("lcp-rf", m, x)[0] == lcp_threshold(m, x)


def test_rank_used_for_groups():
    assert conformal_rank(0.1, 5) == 5
