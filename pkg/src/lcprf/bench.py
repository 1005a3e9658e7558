"""Synthetic generators, CSV ingestion, splitting, oracle radii and metrics."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .core import DataError, Dataset, DomainError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Generator:
    """``Y = mean(X) + scale(X) * eps`` with standard normal ``eps``.

    Features are drawn i.i.d. from ``sample_x``; ``mean`` and ``scale``
    receive the full feature matrix.
    """

    name: str
    d: int
    sample_x: object
    mean: object
    scale: object

    def sample(self, n, seed):
        if n < 1:
            raise DomainError(f"need n >= 1, got {n}")
        rng = stream(seed, "data")
        X = self.sample_x(rng, n)
        eps = rng.standard_normal(n)
        y = self.mean(X) + self.scale(X) * eps
        return Dataset(X, y)


SIM = Generator(
    "sim", 50,
    lambda rng, n: rng.uniform(0.0, 1.0, size=(n, 50)),
    lambda X: X[:, 0].copy(),
    lambda X: X[:, 0] / (1.0 + X[:, 0]),
)

TOY = Generator(
    "toy", 21,
    lambda rng, n: rng.uniform(0.0, 7.0, size=(n, 21)),
    lambda X: np.sin(X[:, 0]) ** 2 + 0.1,
    lambda X: 0.6 * np.sin(2.0 * X[:, 0]),
)


def _blocks_x(rng, n):
    X = rng.uniform(0.0, 1.0, size=(n, 5))
    X[:, 0] = rng.integers(0, 2, size=n)
    return X


BLOCKS = Generator(
    "blocks", 5,
    _blocks_x,
    lambda X: X[:, 1].copy(),
    lambda X: np.where(X[:, 0] > 0.5, 1.0, 0.1),
)
"""Two blocks told apart by the binary first feature, noise 0.1 versus 1.0."""

GENERATORS = {g.name: g for g in (SIM, TOY, BLOCKS)}


def gen_sim(n, seed):
    return SIM.sample(n, seed)


def gen_toy(n, seed):
    return TOY.sample(n, seed)


def gen_blocks(n, seed):
    return BLOCKS.sample(n, seed)


def get_generator(name):
    try:
        return GENERATORS[name]
    except KeyError:
        raise DomainError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None


def empirical_quantile(values, beta, axis=-1):
    """Left-continuous empirical quantile: the ``ceil(beta * M)``-th smallest value."""
    values = np.asarray(values, dtype=float)
    M = values.shape[axis]
    k = min(M, max(1, math.ceil(beta * M - 1e-9))) - 1
    return np.take(np.partition(values, k, axis=axis), k, axis=axis)


def oracle_radii(X, mu_hat, alpha, generator, mc_draws=100_000, seed=0, chunk=64):
    """Monte-Carlo ``(1 - alpha)``-quantile of ``|Y - mu_hat(x)|`` given ``x``.

    One set of noise draws is shared by every row, so radii of different
    rows differ only through ``x``.
    """
    if isinstance(generator, str):
        generator = get_generator(generator)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu_hat = np.broadcast_to(np.asarray(mu_hat, dtype=float), (X.shape[0],))
    eps = stream(seed, "oracle").standard_normal(int(mc_draws))
    mean, scale = generator.mean(X), generator.scale(X)
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], chunk):
        sl = slice(s, s + chunk)
        R = np.abs((mean[sl] - mu_hat[sl])[:, None] + scale[sl, None] * eps[None, :])
        out[sl] = empirical_quantile(R, 1.0 - alpha, axis=1)
    return out


def oracle_radius(x, mu_hat, alpha, generator, mc_draws=100_000, seed=0):
    return float(oracle_radii(np.atleast_2d(x), [mu_hat], alpha, generator, mc_draws, seed)[0])


def load_csv(path, target, drop=()):
    """Read a numeric CSV with a header row.

    Features are all columns other than ``target`` (and ``drop``), in file
    order.  Data rows are numbered from 1 in error messages.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if target not in header:
            raise DataError(f"{path}: target column {target!r} not found")
        for name in drop:
            if name not in header:
                raise DataError(f"{path}: column {name!r} not found")
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise DataError(f"{path}: row {r} has non-numeric cell {bad!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: row {r} has a missing or non-finite value")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows)
    t = header.index(target)
    keep = [j for j, h in enumerate(header) if j != t and h not in drop]
    if not keep:
        raise DataError(f"{path}: no feature columns besides {target!r}")
    return Dataset(table[:, keep], table[:, t], tuple(header[j] for j in keep))


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.4, 0.4, 0.2)
    seed: int = 0

    def __post_init__(self):
        f = tuple(float(v) for v in self.fractions)
        if len(f) != 3 or min(f) <= 0 or abs(sum(f) - 1.0) > 1e-9:
            raise DomainError(f"split fractions must be three positive numbers summing to 1, got {self.fractions}")
        object.__setattr__(self, "fractions", f)

    def sizes(self, n):
        a = math.floor(self.fractions[0] * n + 1e-9)
        b = math.floor(self.fractions[1] * n + 1e-9)
        return a, b, n - a - b


def split_indices(n, spec):
    a, b, c = spec.sizes(n)
    if min(a, b, c) < 1:
        raise DataError(f"split of n={n} by {spec.fractions} leaves an empty part ({a}, {b}, {c})")
    perm = stream(spec.seed, "split").permutation(n)
    return perm[:a], perm[a:a + b], perm[a + b:]


def split_dataset(data, spec=SplitSpec()):
    """Seeded shuffle, then contiguous train/calibration/test slices."""
    return tuple(data.subset(idx) for idx in split_indices(data.n, spec))


@dataclass
class EvalReport:
    """Coverage, lengths and radius errors over a test set.

    ``err`` compares each radius with the oracle radius and ``errhat`` with
    the realized test score; both skip infinite radii and rows with a zero
    denominator (counted in ``err_skipped`` / ``errhat_skipped``).
    """

    coverage: float
    mean_length: float
    median_length: float
    n_test: int
    n_infinite: int
    lengths: np.ndarray
    err: np.ndarray = field(default_factory=lambda: np.empty(0))
    errhat: np.ndarray = field(default_factory=lambda: np.empty(0))
    err_skipped: int = 0
    errhat_skipped: int = 0
    rows: list = field(default_factory=list)

    @property
    def median_err(self):
        return float(np.median(self.err)) if self.err.size else math.nan

    @property
    def median_errhat(self):
        return float(np.median(self.errhat)) if self.errhat.size else math.nan

    def summary(self):
        return {
            "coverage": self.coverage,
            "mean_length": self.mean_length,
            "median_length": self.median_length,
            "median_err": self.median_err,
            "median_errhat": self.median_errhat,
            "n_test": self.n_test,
            "n_infinite": self.n_infinite,
            "err_skipped": self.err_skipped,
            "errhat_skipped": self.errhat_skipped,
        }


ROW_COLUMNS = ("index", "lower", "upper", "covered", "radius", "alpha_tilde", "region", "err", "errhat")


def _relative(num, den):
    ok = np.isfinite(num) & (den != 0)
    return np.abs(num[ok] - den[ok]) / den[ok], int((~ok & np.isfinite(num)).sum()), ok


def evaluate(lower, upper, y, radii, test_scores, oracle=None, alpha_tilde=None, region=None):
    """Score intervals against test targets.

    Parameters
    ----------
    lower, upper : array-like
        Interval bounds, ``nan`` for empty sets.
    y : array-like
        Test targets.
    radii : array-like
        Score thresholds ``q^m(x)``.
    test_scores : array-like
        Realized test scores ``V_{n+1}``.
    oracle : array-like, optional
        Oracle thresholds ``q*(x)``.
    """
    lower, upper, y, radii, test_scores = (np.asarray(a, dtype=float).ravel()
                                           for a in (lower, upper, y, radii, test_scores))
    m = y.size
    for name, a in (("lower", lower), ("upper", upper), ("radii", radii), ("test_scores", test_scores)):
        if a.size != m:
            raise DomainError(f"{name} has {a.size} entries for {m} targets")
    if oracle is not None:
        oracle = np.asarray(oracle, dtype=float).ravel()
        if oracle.size != m:
            raise DomainError(f"oracle has {oracle.size} entries for {m} targets")
    empty = np.isnan(lower)
    covered = ~empty & (lower <= y) & (y <= upper)
    length = np.where(empty, 0.0, upper - lower)
    finite = np.isfinite(length)
    lengths = length[finite]
    errhat, errhat_skipped, _ = _relative(radii, test_scores)
    if oracle is not None:
        err, err_skipped, _ = _relative(radii, oracle)
    else:
        err, err_skipped = np.empty(0), 0

    def per_row(i, num, den):
        if den is None or not math.isfinite(num[i]) or den[i] == 0:
            return math.nan
        return abs(num[i] - den[i]) / den[i]

    at = np.full(m, math.nan) if alpha_tilde is None else np.asarray(alpha_tilde, dtype=float)
    reg = np.full(m, -1) if region is None else np.asarray(region, dtype=int)
    rows = [
        {
            "index": i,
            "lower": float(lower[i]),
            "upper": float(upper[i]),
            "covered": int(covered[i]),
            "radius": float(radii[i]),
            "alpha_tilde": float(at[i]),
            "region": int(reg[i]),
            "err": per_row(i, radii, oracle),
            "errhat": per_row(i, radii, test_scores),
        }
        for i in range(m)
    ]
    if not finite.all():
        log.info("%d of %d intervals are unbounded", int((~finite).sum()), m)
    return EvalReport(
        coverage=float(covered.mean()),
        mean_length=float(length.mean()),
        median_length=float(np.median(length)),
        n_test=m,
        n_infinite=int((~finite).sum()),
        lengths=lengths,
        err=err,
        errhat=errhat,
        err_skipped=err_skipped,
        errhat_skipped=errhat_skipped,
        rows=rows,
    )


def fmt(v):
    """Shortest round-tripping text for a number; stable across runs."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_rows_csv(path, rows, columns=ROW_COLUMNS):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for row in rows:
            out.writerow([fmt(row[c]) if not isinstance(row[c], str) else row[c] for c in columns])


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else fmt(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
