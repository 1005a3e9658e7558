import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcprf.core import (
    DataError,
    Dataset,
    DomainError,
    Interval,
    StepCdf,
    check_alpha,
    conformal_rank,
    coverage_reached,
    empirical_split_cdf,
    merge_duplicates,
    weighted_quantile,
)


def brute_quantile(beta, locations, masses):
    """inf{r : F(r) >= beta} by scanning candidate r over the atom locations."""
    for r in sorted(set(locations)):
        F = math.fsum(m for l, m in zip(locations, masses) if l <= r)
        if F >= beta - 1e-12 and any(m > 0 for l, m in zip(locations, masses) if l == r):
            return r
    return max(l for l, m in zip(locations, masses) if m > 0)


@st.composite
def raw_atoms(draw):
    k = draw(st.integers(1, 12))
    locs = draw(st.lists(st.sampled_from([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, math.inf]), min_size=k, max_size=k))
    raw = draw(st.lists(st.integers(0, 5), min_size=k, max_size=k))
    if sum(raw) == 0:
        raw[0] = 1
    total = sum(raw)
    return locs, [r / total for r in raw]


class TestCoverageHelpers:
    def test_rank_examples(self):
        assert conformal_rank(0.1, 10) == 9
        assert conformal_rank(0.1, 4) == 4
        assert conformal_rank(0.2, 100) == 80

    def test_coverage_reached_is_float_safe(self):
        # 0.9 * 10 is 9.000000000000002 in floating point
        assert coverage_reached(9, 10, 0.1)
        assert not coverage_reached(8, 10, 0.1)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 2.0])
    def test_alpha_domain(self, alpha):
        with pytest.raises(DomainError):
            check_alpha(alpha)


class TestStepCdf:
    def test_rejects_bad_mass(self):
        with pytest.raises(DomainError):
            StepCdf([0.0, 1.0], [0.5, 0.4])
        with pytest.raises(DomainError):
            StepCdf([0.0, 1.0], [-0.5, 1.5])

    def test_rejects_unsorted(self):
        with pytest.raises(DomainError):
            StepCdf([1.0, 0.0], [0.5, 0.5])

    def test_drops_zero_mass(self):
        F = StepCdf([0.0, 1.0, 2.0], [0.0, 0.5, 0.5])
        assert F.atoms == [(1.0, 0.5), (2.0, 0.5)]

    def test_cdf_and_mass_below(self):
        F = StepCdf([1.0, 2.0, math.inf], [0.25, 0.5, 0.25])
        assert F(0.5) == 0.0
        assert F(1.0) == 0.25
        assert F.mass_below(2.0) == 0.25
        assert F(2.0) == 0.75
        assert F(math.inf) == 1.0

    def test_merge_duplicates(self):
        F = merge_duplicates([2.0, 1.0, 2.0], [0.25, 0.25, 0.5])
        assert F.atoms == [(1.0, 0.25), (2.0, 0.75)]


class TestWeightedQuantile:
    def test_left_continuous(self):
        F = StepCdf([1.0, 2.0, 3.0], [0.25, 0.25, 0.5])
        assert weighted_quantile(0.25, F) == 1.0
        assert weighted_quantile(0.2500001, F) == 2.0
        assert weighted_quantile(0.0, F) == 1.0
        assert weighted_quantile(1.0, F) == 3.0

    def test_infinite_atom(self):
        F = empirical_split_cdf([1.0, 2.0, 3.0])
        assert weighted_quantile(0.75, F) == 3.0
        assert weighted_quantile(0.9, F) == math.inf

    def test_level_outside_unit_interval(self):
        F = StepCdf([1.0], [1.0])
        with pytest.raises(DomainError):
            weighted_quantile(1.5, F)
        with pytest.raises(DomainError):
            weighted_quantile(-0.1, F)

    def test_split_examples(self):
        V = np.arange(1.0, 10.0)
        assert weighted_quantile(0.9, empirical_split_cdf(V)) == 9.0
        assert weighted_quantile(0.9, empirical_split_cdf([1.0, 2.0, 3.0])) == math.inf

    @settings(max_examples=300, deadline=None)
    @given(raw_atoms(), st.floats(0.0, 1.0))
    def test_matches_brute_force(self, atoms, beta):
        locs, masses = atoms
        F = merge_duplicates(locs, masses)
        assert weighted_quantile(beta, F) == brute_quantile(beta, locs, masses)

    @settings(max_examples=200, deadline=None)
    @given(raw_atoms(), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_in_level(self, atoms, a, b):
        F = merge_duplicates(*atoms)
        lo, hi = sorted((a, b))
        assert weighted_quantile(lo, F) <= weighted_quantile(hi, F)


class TestDataset:
    def test_shapes(self):
        d = Dataset(np.zeros((3, 2)), np.zeros(3))
        assert (d.n, d.d) == (3, 2)
        assert d.feature_names == ("x0", "x1")

    def test_mismatch(self):
        with pytest.raises(DomainError):
            Dataset(np.zeros((3, 2)), np.zeros(4))

    def test_non_finite(self):
        X = np.zeros((2, 2))
        X[0, 0] = np.nan
        with pytest.raises(DomainError):
            Dataset(X, np.zeros(2))

    def test_data_error_is_domain_error(self):
        assert issubclass(DataError, DomainError)


class TestInterval:
    def test_empty(self):
        iv = Interval(math.nan, math.nan, 0.0)
        assert iv.is_empty() and iv.length == 0.0 and 0.0 not in iv

    def test_contains(self):
        iv = Interval(-1.0, 1.0, 0.0, 1.0)
        assert 1.0 in iv and 1.01 not in iv
        assert iv.length == 2.0

    def test_inverted_bounds(self):
        with pytest.raises(DomainError):
            Interval(1.0, 0.0, 0.5)
