"""Scikit-learn style front end: fit a base model, calibrate, predict intervals."""

import json
import logging
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import stream, stream_seed
from .calibration import (
    LcpModel,
    SplitModel,
    TcModel,
    alpha_tilde,
    lcp_thresholds,
    tc_fit,
    tc_grid,
)
from .core import DataError, DomainError, check_alpha
from .forest import RandomForest
from .graph import (
    ClusterAssignment,
    build_graph,
    connected_components,
    groupwise_thresholds,
    louvain,
    split_group_thresholds,
)
from .scores import ExternalQuantiles, ForestMean, ForestQuantiles, MeanAbsolute, invert, make_kind, score

log = logging.getLogger(__name__)

METHODS = ("split", "lcp-rf", "lcp-rf-g", "qrf-tc", "lcp-rf-tc", "split-g")
GROUP_METHODS = ("lcp-rf-g", "split-g")
TC_METHODS = ("qrf-tc", "lcp-rf-tc")

MODEL_FORMAT = "lcprf-model"
MODEL_VERSION = 1


class ConformalForestRegressor(BaseEstimator):
    """Prediction intervals from a forest base model and a conformal calibration.

    Parameters
    ----------
    method : str
        One of ``split``, ``lcp-rf``, ``lcp-rf-g``, ``qrf-tc``, ``lcp-rf-tc``
        or ``split-g``.
    alpha : float
        Target miscoverage.
    score : str or dict
        ``"mean"`` (absolute residual) or ``"quantile"`` (CQR score).
    base_params, localizer_params : dict, optional
        Keyword arguments for the base and localizer :class:`RandomForest`.
    prediction_columns : tuple of int, optional
        Feature columns holding external lower/upper quantile predictions.
        When given, no base forest is fitted.
    clustering : str
        ``"components"`` or ``"louvain"`` (group methods only).
    resolution : float
        Louvain resolution.
    grid_size : int
        Number of steps in the correction grid (TC methods).
    tc_fraction : float
        Share of the calibration set used to fit the inner model (TC methods).
    localizer_split : float or None
        When set, this share of the calibration set only grows the localizer
        splits and the rest fills its leaves and is calibrated on (honest
        localizer).  ``None`` grows and fills with the whole set.
    random_state : int
        Root seed; each stage draws from its own named stream.

    Examples
    --------
    >>> from lcprf.bench import gen_sim
    >>> d = gen_sim(400, seed=0)
    >>> est = ConformalForestRegressor(method="split", base_params={"n_estimators": 10})
    >>> est = est.fit(d.features[:200], d.targets[:200]).calibrate(d.features[200:], d.targets[200:])
    >>> lo, hi = est.predict_interval(d.features[:3])
    """

    def __init__(self, method="lcp-rf", alpha=0.1, score="mean", base_params=None,
                 localizer_params=None, prediction_columns=None, clustering="components",
                 resolution=1.0, grid_size=100, tc_fraction=0.5, localizer_split=None,
                 random_state=0):
        self.method = method
        self.alpha = alpha
        self.score = score
        self.base_params = base_params
        self.localizer_params = localizer_params
        self.prediction_columns = prediction_columns
        self.clustering = clustering
        self.resolution = resolution
        self.grid_size = grid_size
        self.tc_fraction = tc_fraction
        self.localizer_split = localizer_split
        self.random_state = random_state

    # -- fitting -----------------------------------------------------------

    def _validate(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown method {self.method!r}; choose from {METHODS}")
        check_alpha(self.alpha)
        if self.clustering not in ("components", "louvain"):
            raise DomainError(f"unknown clustering {self.clustering!r}")
        if not 0.0 < self.tc_fraction < 1.0:
            raise DomainError(f"tc_fraction must lie in (0, 1), got {self.tc_fraction}")
        if self.localizer_split is not None and not 0.0 < self.localizer_split < 1.0:
            raise DomainError(f"localizer_split must lie in (0, 1), got {self.localizer_split}")
        return make_kind(self.score, self.alpha)

    def _predictor(self):
        kind = self.kind_
        if self.prediction_columns is not None:
            return ExternalQuantiles(*self.prediction_columns)
        if isinstance(kind, MeanAbsolute):
            return ForestMean(self.base_)
        return ForestQuantiles(self.base_, kind.beta_lo, kind.beta_hi)

    def fit(self, X, y):
        """Fit the base model on training data."""
        self.kind_ = self._validate()
        X, y = check_X_y(X, y, dtype=float)
        self.n_features_in_ = X.shape[1]
        if self.prediction_columns is not None:
            if len(self.prediction_columns) != 2 or max(self.prediction_columns) >= X.shape[1]:
                raise DataError(f"prediction columns {self.prediction_columns} do not fit {X.shape[1]} features")
            self.base_ = None
        else:
            params = dict(self.base_params or {})
            params.setdefault("random_state", stream_seed(self.random_state, "base"))
            self.base_ = RandomForest(**params).fit(X, y)
        self.predictor_ = self._predictor()
        return self

    def _check_X(self, X):
        X = check_array(X, dtype=float, ensure_2d=False)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def scores(self, X, y):
        check_is_fitted(self, "predictor_")
        return score(self.kind_, self.predictor_, self._check_X(X), y)

    def _localizer(self, X, V, tag):
        params = dict(self.localizer_params or {})
        params.setdefault("random_state", stream_seed(self.random_state, "localizer", tag))
        if self.localizer_split is None:
            return LcpModel.fit(X, V, self.alpha, **params)
        n = V.size
        g = math.floor(self.localizer_split * n)
        if g < 1 or n - g < 1:
            raise DataError(f"calibration set of {n} points is too small to split")
        perm = stream(self.random_state, "split", 2, tag).permutation(n)
        grow, fill = perm[:g], perm[g:]
        return LcpModel.fit_honest(X[grow], V[grow], X[fill], V[fill], self.alpha, **params)

    def calibrate(self, X, y):
        """Compute calibration scores and fit the chosen calibration."""
        check_is_fitted(self, "predictor_")
        self.kind_ = self._validate()
        X, y = check_X_y(X, y, dtype=float)
        V = self.scores(X, y)
        self.clusters_ = None
        self.state_ = None
        m = self.method
        if m == "split":
            self.state_ = SplitModel(V, self.alpha)
        elif m == "lcp-rf":
            self.state_ = self._localizer(X, V, 0)
        elif m in GROUP_METHODS:
            self.state_ = self._localizer(X, V, 0)
            self.clusters_ = self._cluster(self.state_)
        else:
            n = V.size
            n1 = math.floor(self.tc_fraction * n)
            if n1 < 1 or n - n1 < 1:
                raise DataError(f"calibration set of {n} points is too small to split")
            perm = stream(self.random_state, "split", 1).permutation(n)
            d1, d2 = perm[:n1], perm[n1:]
            inner = self._localizer(X[d1], V[d1], 1)
            self.state_ = tc_fit(inner, X[d2], V[d2], self.grid_size, adaptive=(m == "lcp-rf-tc"))
        return self

    def _cluster(self, model):
        g = build_graph(model.calibration_weights)
        if self.clustering == "components":
            return connected_components(g)
        return louvain(g, self.resolution, stream_seed(self.random_state, "clustering") % 2**32)

    # -- prediction --------------------------------------------------------

    def predict(self, X):
        """Center of the base prediction (mean, or midpoint of the quantile pair)."""
        check_is_fitted(self, "predictor_")
        lo, hi = self.predictor_.bounds(self._check_X(X))
        return 0.5 * (np.asarray(lo) + np.asarray(hi))

    def predict_details(self, X, diagnostics=True):
        """Thresholds, bounds and per-row diagnostics.

        Returns a dict with ``lower``, ``upper``, ``radius``, ``alpha_tilde``
        and ``region`` arrays.  ``alpha_tilde`` is left as ``nan`` when
        ``diagnostics`` is false or the method has no adapted level.
        """
        check_is_fitted(self, "state_")
        X = self._check_X(X)
        m, s = self.method, self.state_
        k = X.shape[0]
        at = np.full(k, np.nan)
        region = np.full(k, -1)
        if m == "split":
            radius = np.full(k, s.radius)
        elif m == "lcp-rf":
            radius = lcp_thresholds(s, X)
            if diagnostics:
                at = np.array([alpha_tilde(s, None, loc=loc) for loc in s.localize_many(X)])
        elif m in GROUP_METHODS:
            if m == "lcp-rf-g":
                res = groupwise_thresholds(s, self.clusters_, X, with_alpha=diagnostics)
            else:
                res = split_group_thresholds(s, self.clusters_, X)
            radius = np.array([r.threshold for r in res])
            at = np.array([r.alpha_tilde for r in res])
            region = np.array([r.region for r in res])
        else:
            radius = s.thresholds(X)
            if diagnostics and s.adaptive:
                at = np.array([alpha_tilde(s.inner, None, loc=loc) for loc in s.inner.localize_many(X)])
        lower, upper = invert(self.kind_, self.predictor_, X, radius)
        return {"lower": lower, "upper": upper, "radius": radius, "alpha_tilde": at, "region": region}

    def predict_interval(self, X):
        d = self.predict_details(X, diagnostics=False)
        return d["lower"], d["upper"]

    # -- persistence -------------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "state_")
        s = self.state_
        out = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "params": self.get_params(),
            "n_features": self.n_features_in_,
            "base": None if self.base_ is None else self.base_.to_dict(),
        }
        if self.method == "split":
            out["state"] = {"residuals": s.residuals.tolist()}
        elif self.method in TC_METHODS:
            out["state"] = {
                "localizer": s.inner.localizer.to_dict(),
                "alpha_hat": s.alpha_hat,
                "coverage": s.coverage.tolist(),
                "saturated": s.saturated,
                "n2": s.n2,
            }
        else:
            out["state"] = {"localizer": s.localizer.to_dict()}
        if self.clusters_ is not None:
            out["clusters"] = {"labels": self.clusters_.labels.tolist(), "kind": self.clusters_.kind,
                               "modularity": self.clusters_.modularity}
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
            raise DataError("not a saved lcprf model")
        if d.get("version") != MODEL_VERSION:
            raise DataError(f"model file version {d.get('version')!r}, this build reads {MODEL_VERSION}")
        try:
            est = cls(**d["params"])
            est.kind_ = est._validate()
            est.n_features_in_ = int(d["n_features"])
            est.base_ = None if d["base"] is None else RandomForest.from_dict(d["base"])
            est.predictor_ = est._predictor()
            st = d["state"]
            if est.method == "split":
                est.state_ = SplitModel(np.asarray(st["residuals"], dtype=float), est.alpha)
            elif est.method in TC_METHODS:
                inner = LcpModel(RandomForest.from_dict(st["localizer"]), est.alpha)
                est.state_ = TcModel(inner, float(st["alpha_hat"]), tc_grid(est.alpha, est.grid_size),
                                     np.asarray(st["coverage"]), est.method == "lcp-rf-tc",
                                     bool(st["saturated"]), int(st["n2"]))
            else:
                est.state_ = LcpModel(RandomForest.from_dict(st["localizer"]), est.alpha)
            est.clusters_ = None
            if "clusters" in d:
                c = d["clusters"]
                est.clusters_ = ClusterAssignment(np.asarray(c["labels"], dtype=np.intp), c["kind"],
                                                  float(c.get("modularity", math.nan)))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"corrupted model file: {type(exc).__name__}: {exc}") from None
        return est

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot open {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupted model file {path}: {exc.msg} at line {exc.lineno}") from None
        return cls.from_dict(d)
