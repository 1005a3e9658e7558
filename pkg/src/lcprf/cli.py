"""Command-line runner: ``run``, ``fit``, ``predict`` and ``compare``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 unusable data
or model file, 4 numeric failure.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .bench import (
    SplitSpec,
    evaluate,
    fmt,
    get_generator,
    load_csv,
    oracle_radii,
    split_indices,
    write_json,
    write_rows_csv,
)
from .core import DataError, DomainError
from .estimators import GROUP_METHODS, METHODS, ConformalForestRegressor
from .forest import RandomForest
from .scores import MeanAbsolute, make_kind

log = logging.getLogger("lcprf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMPARE_COLUMNS = ("method", "coverage", "mean_length", "median_length", "median_err", "median_errhat")
PREDICT_COLUMNS = ("index", "lower", "upper", "radius", "alpha_tilde", "region")


class ConfigError(ValueError):
    """A run configuration is malformed; the message names the field."""


@dataclass
class RunConfig:
    """Parsed experiment configuration (see README for the JSON layout)."""

    data: dict
    methods: list
    alpha: float = 0.1
    score: object = "mean"
    base_model: dict = field(default_factory=dict)
    localizer: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=lambda: {"kind": "components"})
    tc: dict = field(default_factory=lambda: {"grid_size": 100, "fraction": 0.5})
    split: dict = field(default_factory=lambda: {"fractions": [0.4, 0.4, 0.2]})
    seed: int = 0
    output_dir: str = "out"
    oracle: dict = field(default_factory=lambda: {"mc_draws": 100_000})
    diagnostics: bool = True

    @property
    def method(self):
        return self.methods[0]

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        known = {f for f in cls.__dataclass_fields__} | {"method"}
        for key in raw:
            if key not in known:
                raise ConfigError(f"config: unknown field {key!r}")
        raw = dict(raw)
        if "method" in raw and "methods" in raw:
            raise ConfigError("config: give either 'method' or 'methods', not both")
        if "method" in raw:
            raw["methods"] = [raw.pop("method")]
        if "methods" not in raw:
            raise ConfigError("config: missing field 'method'")
        if "data" not in raw:
            raise ConfigError("config: missing field 'data'")
        defaults = cls(data={}, methods=[])
        cfg = cls(**{k: raw.get(k, getattr(defaults, k)) for k in cls.__dataclass_fields__})
        cfg._check(base_dir)
        return cfg

    def _check(self, base_dir):
        methods = self.methods
        if not isinstance(methods, list) or not methods:
            raise ConfigError("config: 'methods' must be a non-empty list")
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"config: field 'method' has unknown value {m!r}; choose from {list(METHODS)}")
        if isinstance(self.alpha, bool) or not isinstance(self.alpha, (int, float)) or not 0 < self.alpha < 1:
            raise ConfigError(f"config: field 'alpha' must lie in (0, 1), got {self.alpha!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"config: field 'seed' must be a nonnegative integer, got {self.seed!r}")
        d = self.data
        if not isinstance(d, dict):
            raise ConfigError("config: field 'data' must be an object")
        if ("generator" in d) == ("csv" in d):
            raise ConfigError("config: field 'data' needs exactly one of 'generator' or 'csv'")
        if "generator" in d:
            try:
                get_generator(d["generator"])
            except DomainError as exc:
                raise ConfigError(f"config: field 'data.generator': {exc}") from None
            n = d.get("n")
            if isinstance(n, bool) or not isinstance(n, int) or n < 3:
                raise ConfigError(f"config: field 'data.n' must be an integer >= 3, got {n!r}")
        else:
            if not isinstance(d.get("target"), str):
                raise ConfigError("config: field 'data.target' must name the target column")
            if not os.path.isabs(d["csv"]):
                d["csv"] = os.path.join(base_dir, d["csv"])
            pc = d.get("prediction_columns")
            if pc is not None and (not isinstance(pc, list) or len(pc) != 2):
                raise ConfigError("config: field 'data.prediction_columns' must list two column names")
        for name in ("base_model", "localizer", "clustering", "tc", "split", "oracle"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"config: field {name!r} must be an object")
        kind = self.clustering.get("kind", "components")
        if kind not in ("components", "louvain"):
            raise ConfigError(f"config: field 'clustering.kind' has unknown value {kind!r}")
        res = self.clustering.get("resolution", 1.0)
        if not isinstance(res, (int, float)) or res <= 0:
            raise ConfigError(f"config: field 'clustering.resolution' must be positive, got {res!r}")
        if any(m in GROUP_METHODS for m in methods) and "kind" not in self.clustering:
            log.info("no clustering kind given; using connected components")
        k = self.tc.get("grid_size", 100)
        if isinstance(k, bool) or not isinstance(k, int) or k < 1:
            raise ConfigError(f"config: field 'tc.grid_size' must be a positive integer, got {k!r}")
        frac = self.tc.get("fraction", 0.5)
        if not isinstance(frac, (int, float)) or not 0 < frac < 1:
            raise ConfigError(f"config: field 'tc.fraction' must lie in (0, 1), got {frac!r}")
        try:
            self.split_spec()
        except DomainError as exc:
            raise ConfigError(f"config: field 'split.fractions': {exc}") from None
        try:
            make_kind(self.score, self.alpha)
        except (DomainError, AttributeError) as exc:
            raise ConfigError(f"config: field 'score': {exc}") from None
        draws = self.oracle.get("mc_draws", 100_000)
        if isinstance(draws, bool) or not isinstance(draws, int) or draws < 1:
            raise ConfigError(f"config: field 'oracle.mc_draws' must be a positive integer, got {draws!r}")
        for name in ("base_model", "localizer"):
            try:
                RandomForest(**getattr(self, name))
            except TypeError as exc:
                raise ConfigError(f"config: field {name!r}: {exc}") from None

    def split_spec(self):
        return SplitSpec(tuple(self.split.get("fractions", (0.4, 0.4, 0.2))), self.seed)

    def estimator(self, method, prediction_columns=None):
        return ConformalForestRegressor(
            method=method,
            alpha=float(self.alpha),
            score=self.score,
            base_params=dict(self.base_model),
            localizer_params=dict(self.localizer),
            prediction_columns=prediction_columns,
            clustering=self.clustering.get("kind", "components"),
            resolution=float(self.clustering.get("resolution", 1.0)),
            grid_size=int(self.tc.get("grid_size", 100)),
            tc_fraction=float(self.tc.get("fraction", 0.5)),
            random_state=self.seed,
        )


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return RunConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


# -- pipeline ---------------------------------------------------------------

@dataclass
class Prepared:
    X_train: np.ndarray
    y_train: np.ndarray
    X_cal: np.ndarray
    y_cal: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    feature_names: tuple
    prediction_columns: tuple = None
    generator: object = None


def prepare(cfg):
    d = cfg.data
    generator = None
    pcols = None
    if "generator" in d:
        generator = get_generator(d["generator"])
        data = generator.sample(d["n"], cfg.seed)
    else:
        data = load_csv(d["csv"], d["target"])
        if d.get("prediction_columns"):
            names = list(data.feature_names)
            for c in d["prediction_columns"]:
                if c not in names:
                    raise DataError(f"{d['csv']}: prediction column {c!r} not found")
            pcols = tuple(names.index(c) for c in d["prediction_columns"])
    tr, ca, te = split_indices(data.n, cfg.split_spec())
    X, y = data.features, data.targets
    return Prepared(X[tr], y[tr], X[ca], y[ca], X[te], y[te], data.feature_names, pcols, generator)


def run_methods(cfg, methods):
    """Fit the base model once, then calibrate and evaluate each method."""
    prep = prepare(cfg)
    base = cfg.estimator(methods[0], prep.prediction_columns).fit(prep.X_train, prep.y_train)
    test_scores = base.scores(prep.X_test, prep.y_test)
    oracle = None
    if prep.generator is not None and isinstance(base.kind_, MeanAbsolute):
        oracle = oracle_radii(prep.X_test, base.predict(prep.X_test), cfg.alpha, prep.generator,
                              cfg.oracle.get("mc_draws", 100_000), cfg.seed)
    results = {}
    for m in methods:
        base.set_params(method=m)
        est = base.calibrate(prep.X_cal, prep.y_cal)
        det = est.predict_details(prep.X_test, diagnostics=cfg.diagnostics)
        report = evaluate(det["lower"], det["upper"], prep.y_test, det["radius"], test_scores,
                          oracle, det["alpha_tilde"], det["region"])
        extra = {}
        st = est.state_
        if hasattr(st, "alpha_hat"):
            extra = {"alpha_hat": st.alpha_hat, "saturated": st.saturated, "grid_points": int(st.grid.size)}
        if est.clusters_ is not None:
            extra["n_groups"] = est.clusters_.L
            extra["modularity"] = est.clusters_.modularity
        results[m] = (report, extra)
        log.info("%s: coverage %.4f, median length %.4f", m, report.coverage, report.median_length)
    return prep, base, results


def _outdir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def cmd_run(cfg):
    if len(cfg.methods) != 1:
        raise ConfigError("config: 'run' takes a single method; use 'compare' for several")
    _, _, results = run_methods(cfg, cfg.methods)
    report, extra = results[cfg.method]
    out = _outdir(cfg)
    write_json(os.path.join(out, "report.json"),
               {"method": cfg.method, "alpha": cfg.alpha, "seed": cfg.seed, **report.summary(), **extra})
    write_rows_csv(os.path.join(out, "intervals.csv"), report.rows)
    return EXIT_OK


def cmd_compare(cfg):
    _, _, results = run_methods(cfg, cfg.methods)
    out = _outdir(cfg)
    rows = []
    for m, (report, extra) in results.items():
        s = report.summary()
        rows.append({"method": m, **{c: s[c] for c in COMPARE_COLUMNS[1:]}})
        write_rows_csv(os.path.join(out, f"intervals_{m}.csv"), report.rows)
    write_rows_csv(os.path.join(out, "compare.csv"), rows, COMPARE_COLUMNS)
    return EXIT_OK


def cmd_fit(cfg, model_path=None):
    if len(cfg.methods) != 1:
        raise ConfigError("config: 'fit' takes a single method")
    prep = prepare(cfg)
    est = cfg.estimator(cfg.method, prep.prediction_columns)
    est.fit(prep.X_train, prep.y_train).calibrate(prep.X_cal, prep.y_cal)
    out = _outdir(cfg)
    est.save(model_path or os.path.join(out, "model.json"))
    # the held-out rows, so ``predict`` can reproduce ``run``
    with open(os.path.join(out, "test.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(prep.feature_names))
        w.writerows([[fmt(v) for v in row] for row in prep.X_test])
    return EXIT_OK


def _read_features(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}: row {r} has a non-numeric cell") from None
            if len(vals) != len(header) or not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: row {r} is malformed or has a missing value")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows)


def cmd_predict(model_path, data_path, out_path, diagnostics=True):
    est = ConformalForestRegressor.load(model_path)
    X = _read_features(data_path)
    det = est.predict_details(X, diagnostics=diagnostics)
    rows = [{"index": i, **{c: det[c][i] for c in PREDICT_COLUMNS[1:]}} for i in range(X.shape[0])]
    write_rows_csv(out_path, rows, PREDICT_COLUMNS)
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lcprf", description="Localized conformal prediction with random forests.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", nargs="?", help="JSON run configuration")
        s.add_argument("--config", dest="config_opt", help="JSON run configuration")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--output-dir", help="override the config output directory")
        return s

    with_config("run", "fit, calibrate and evaluate one method")
    with_config("compare", "evaluate several methods on the same splits")
    f = with_config("fit", "fit and save a model")
    f.add_argument("--model", help="where to write the model (default: <output_dir>/model.json)")
    pr = sub.add_parser("predict", help="intervals for a feature CSV from a saved model")
    pr.add_argument("model", help="saved model JSON")
    pr.add_argument("data", help="CSV with the training feature columns")
    pr.add_argument("out", help="output CSV")
    pr.add_argument("--no-diagnostics", action="store_true", help="skip the adapted-level column")
    return p


def _dispatch(args):
    if args.command == "predict":
        return cmd_predict(args.model, args.data, args.out, not args.no_diagnostics)
    path = args.config_opt or args.config
    if not path:
        raise ConfigError(f"{args.command}: a config path is required")
    cfg = load_config(path, args.seed)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.command == "run":
        return cmd_run(cfg)
    if args.command == "compare":
        return cmd_compare(cfg)
    return cmd_fit(cfg, args.model)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
