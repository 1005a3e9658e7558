"""Nonconformity scores, their inversion into intervals, and base predictors."""

from dataclasses import dataclass

import numpy as np

from .core import DomainError, Interval


@dataclass(frozen=True)
class MeanAbsolute:
    """``|y - mu(x)|``."""

    name = "mean"


@dataclass(frozen=True)
class QuantilePair:
    """``max(q_lo(x) - y, y - q_hi(x))``, the conformalized-quantile score."""

    beta_lo: float
    beta_hi: float
    name = "quantile"

    def __post_init__(self):
        if not 0.0 < self.beta_lo < self.beta_hi < 1.0:
            raise DomainError(f"need 0 < beta_lo < beta_hi < 1, got {self.beta_lo}, {self.beta_hi}")

    @classmethod
    def for_alpha(cls, alpha):
        return cls(alpha / 2.0, 1.0 - alpha / 2.0)


class ForestMean:
    """Mean predictor backed by a fitted forest (or anything with ``predict``)."""

    def __init__(self, model):
        self.model = model

    def bounds(self, X):
        mu = np.asarray(self.model.predict(X), dtype=float)
        return mu, mu


class ForestQuantiles:
    """Lower and upper quantile predictions from one quantile regression forest."""

    def __init__(self, model, beta_lo, beta_hi):
        self.model = model
        self.beta_lo = beta_lo
        self.beta_hi = beta_hi

    def bounds(self, X):
        return (self.model.predict_quantile(X, self.beta_lo),
                self.model.predict_quantile(X, self.beta_hi))


class ExternalQuantiles:
    """Quantile predictions read from two columns of the feature table.

    Lets any outside model (e.g. linear quantile regression) supply
    ``q_lo`` and ``q_hi`` through the input file.
    """

    def __init__(self, lo_column, hi_column):
        self.lo_column = int(lo_column)
        self.hi_column = int(hi_column)

    def bounds(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X[:, self.lo_column], X[:, self.hi_column]


def _bounds(predictor, X):
    if predictor is None:
        raise DomainError("base predictor is not fitted")
    lo, hi = predictor.bounds(np.atleast_2d(np.asarray(X, dtype=float)))
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def score(kind, predictor, X, y):
    """Nonconformity scores of the rows of ``X`` against targets ``y``."""
    lo, hi = _bounds(predictor, X)
    y = np.asarray(y, dtype=float).reshape(lo.shape)
    if isinstance(kind, MeanAbsolute):
        return np.abs(y - lo)
    if isinstance(kind, QuantilePair):
        return np.maximum(lo - y, y - hi)
    raise DomainError(f"unknown score kind {kind!r}")


def invert(kind, predictor, X, threshold):
    """Bounds ``(lower, upper)`` of ``{y : score(x, y) <= threshold}`` per row.

    An infinite threshold yields the whole line.  A negative threshold under
    the mean score yields the empty set, encoded as ``nan`` bounds.
    """
    lo, hi = _bounds(predictor, X)
    t = np.broadcast_to(np.asarray(threshold, dtype=float), lo.shape)
    lower, upper = lo - t, hi + t
    if isinstance(kind, MeanAbsolute):
        empty = t < 0
        lower = np.where(empty, np.nan, lower)
        upper = np.where(empty, np.nan, upper)
    elif isinstance(kind, QuantilePair):
        # shrinking past the midpoint leaves no y
        empty = lower > upper
        lower = np.where(empty, np.nan, lower)
        upper = np.where(empty, np.nan, upper)
    else:
        raise DomainError(f"unknown score kind {kind!r}")
    return lower, upper


def interval(kind, predictor, x, threshold):
    """Single-point version of :func:`invert` returning an :class:`Interval`."""
    lower, upper = invert(kind, predictor, np.atleast_2d(x), threshold)
    lo, hi = _bounds(predictor, np.atleast_2d(x))
    center = 0.5 * (lo[0] + hi[0])
    radius = float(threshold) if isinstance(kind, MeanAbsolute) and threshold >= 0 else float("nan")
    return Interval(float(lower[0]), float(upper[0]), float(center), radius)


def make_kind(spec, alpha):
    """Score kind from a config value: ``"mean"``, ``"quantile"`` or a dict."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    name = spec.get("kind", "mean")
    if name == "mean":
        return MeanAbsolute()
    if name == "quantile":
        return QuantilePair(spec.get("beta_lo", alpha / 2.0), spec.get("beta_hi", 1.0 - alpha / 2.0))
    raise DomainError(f"unknown score kind {name!r}")
