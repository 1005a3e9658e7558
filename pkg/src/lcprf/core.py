"""Shared numeric types: datasets, weighted step distributions, intervals.

Quantiles use the left-continuous generalized inverse
``Q(beta; F) = inf{r : F(r) >= beta}``.  Cumulative masses are floating
point sums of forest weights, so every comparison between a cumulative
mass and a level goes through :data:`LEVEL_TOL`.
"""

import math
from dataclasses import dataclass

import numpy as np

#: Absolute slack when comparing a cumulative mass with a quantile level.
LEVEL_TOL = 1e-12

#: Allowed deviation of a distribution's total mass from one.
MASS_TOL = 1e-9


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class DataError(DomainError):
    """Input data (a table, a saved model, a feature matrix) is unusable."""


def check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha


def coverage_reached(count, total, alpha):
    """True when ``count / total >= 1 - alpha`` (integer count, float-safe)."""
    return count >= (1.0 - alpha) * total - 1e-9


def conformal_rank(alpha, total):
    """Smallest integer count ``r`` with ``r / total >= 1 - alpha``.

    For the split method with ``n`` calibration points, ``total = n + 1`` and
    the threshold is the ``r``-th order statistic.
    """
    return max(0, math.ceil((1.0 - alpha) * total - 1e-9))


@dataclass(frozen=True)
class Dataset:
    """Feature table and target vector.

    Categorical variables are expected to be encoded as integer-valued
    reals before they get here.
    """

    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if X.ndim != 2:
            raise DomainError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1:
            raise DomainError(f"targets must be 1-D, got shape {y.shape}")
        if X.shape[0] != y.shape[0]:
            raise DomainError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DomainError(f"dataset must have n >= 1 and d >= 1, got {X.shape}")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DomainError("dataset entries must all be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(X.shape[1])))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.targets[idx], self.feature_names)


class StepCdf:
    """Weighted discrete distribution on the extended reals.

    Atoms are kept sorted with strictly increasing locations; zero-mass
    atoms are dropped since they do not change the distribution function.
    A single atom at ``+inf`` may close the support.

    Parameters
    ----------
    locations, masses : array-like
        Already merged atoms.  Use :func:`merge_duplicates` to build a
        ``StepCdf`` from raw, possibly unsorted atoms.
    """

    __slots__ = ("locations", "masses", "cumulative")

    def __init__(self, locations, masses):
        loc = np.asarray(locations, dtype=float)
        mass = np.asarray(masses, dtype=float)
        if loc.shape != mass.shape or loc.ndim != 1:
            raise DomainError("locations and masses must be 1-D arrays of equal length")
        if loc.size == 0:
            raise DomainError("a distribution needs at least one atom")
        if np.isnan(loc).any() or (loc == -np.inf).any():
            raise DomainError("atom locations must be finite or +inf")
        if (mass < 0).any() or not np.isfinite(mass).all():
            raise DomainError("atom masses must be finite and nonnegative")
        if loc.size > 1 and not (np.diff(loc) > 0).all():
            raise DomainError("atom locations must be strictly increasing")
        total = math.fsum(mass)
        if abs(total - 1.0) > MASS_TOL:
            raise DomainError(f"atom masses sum to {total!r}, expected 1")
        keep = mass > 0
        self.locations = loc[keep]
        self.masses = mass[keep]
        self.cumulative = np.cumsum(self.masses)
        for arr in (self.locations, self.masses, self.cumulative):
            arr.flags.writeable = False

    def __len__(self):
        return self.locations.size

    def __repr__(self):
        atoms = ", ".join(f"({l:g}, {m:g})" for l, m in zip(self.locations, self.masses))
        return f"StepCdf([{atoms}])"

    @property
    def atoms(self):
        return list(zip(self.locations.tolist(), self.masses.tolist()))

    def __call__(self, r):
        """``F(r)``: total mass at locations ``<= r``."""
        k = np.searchsorted(self.locations, r, side="right")
        return 0.0 if k == 0 else float(self.cumulative[k - 1])

    def mass_below(self, r):
        """Total mass at locations strictly smaller than ``r``."""
        k = np.searchsorted(self.locations, r, side="left")
        return 0.0 if k == 0 else float(self.cumulative[k - 1])

    def quantile(self, beta):
        return weighted_quantile(beta, self)


def merge_duplicates(locations, masses):
    """Sort raw atoms and merge equal locations into a :class:`StepCdf`."""
    loc = np.asarray(locations, dtype=float).ravel()
    mass = np.asarray(masses, dtype=float).ravel()
    if loc.shape != mass.shape:
        raise DomainError("locations and masses must have equal length")
    if loc.size == 0:
        raise DomainError("cannot build a distribution from zero atoms")
    if (mass < 0).any():
        raise DomainError("atom masses must be nonnegative")
    order = np.argsort(loc, kind="stable")
    loc, mass = loc[order], mass[order]
    starts = np.flatnonzero(np.r_[True, loc[1:] != loc[:-1]])
    if starts.size == loc.size:
        return StepCdf(loc, mass)
    ends = np.r_[starts[1:], loc.size]
    merged = np.array([math.fsum(mass[s:e]) for s, e in zip(starts, ends)])
    return StepCdf(loc[starts], merged)


def weighted_quantile(beta, cdf):
    """Smallest atom location whose cumulative mass reaches ``beta``.

    ``beta = 0`` returns the smallest (positive-mass) location.  Returns
    ``+inf`` when only the ``+inf`` atom reaches ``beta``.
    """
    beta = float(beta)
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"quantile level must lie in [0, 1], got {beta!r}")
    k = int(np.searchsorted(cdf.cumulative, beta - LEVEL_TOL, side="left"))
    # total mass may fall short of 1 by up to MASS_TOL
    return float(cdf.locations[min(k, len(cdf) - 1)])


def empirical_split_cdf(residuals):
    """Uniform masses ``1/(n+1)`` on the residuals plus one on ``+inf``."""
    v = np.asarray(residuals, dtype=float).ravel()
    if v.size == 0:
        raise DomainError("need at least one residual")
    if not np.isfinite(v).all():
        raise DomainError("residuals must be finite")
    n = v.size
    return merge_duplicates(np.r_[v, np.inf], np.full(n + 1, 1.0 / (n + 1)))


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    center: float
    radius: float = math.nan

    def __post_init__(self):
        if self.lower > self.upper and not (self.is_empty()):
            raise DomainError(f"interval lower {self.lower} exceeds upper {self.upper}")

    def is_empty(self):
        return math.isnan(self.lower) and math.isnan(self.upper)

    def __contains__(self, y):
        return (not self.is_empty()) and self.lower <= y <= self.upper

    @property
    def length(self):
        return 0.0 if self.is_empty() else self.upper - self.lower


EMPTY = float("nan")
