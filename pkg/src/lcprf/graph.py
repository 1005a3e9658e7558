"""Calibration-point graphs, clusterings and groupwise calibration.

Calibration points are linked when the localizer gives either one weight
in the other's row.  Clusters of that graph (connected components or
Louvain communities) define regions; a test point belongs to the region
collecting most of its localizer mass and is calibrated against that
region's points only.
"""

import csv
import logging
import math
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .calibration import alpha_tilde, lcp_threshold, split_threshold
from .core import DomainError

log = logging.getLogger(__name__)

#: Region id for test points whose top two group masses tie.
UNDECIDED = -1

COMPONENTS = "components"
COMMUNITIES = "communities"


@dataclass(frozen=True)
class WeightedGraph:
    """Symmetric weighted graph stored as a sorted upper-triangle edge list.

    Attributes
    ----------
    n : int
        Number of nodes.
    edges : ndarray of shape (m, 2)
        Pairs ``i < j`` in lexicographic order.
    weights : ndarray of shape (m,)
        ``(w_ij + w_ji) / 2``, all strictly positive.
    """

    n: int
    edges: np.ndarray
    weights: np.ndarray

    def adjacency(self):
        i, j = self.edges.T
        A = csr_matrix((self.weights, (i, j)), shape=(self.n, self.n))
        return (A + A.T).tocsr()

    def to_networkx(self):
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_weighted_edges_from((int(i), int(j), float(w)) for (i, j), w in zip(self.edges, self.weights))
        return g


def build_graph(W, prune=0.0):
    """Symmetrized graph of a square calibration weight matrix.

    Parameters
    ----------
    W : array-like of shape (n, n)
        ``W[i, j] = w(X_i, X_j)`` with the test slot dropped.
    prune : float
        Drop edges with weight ``<= prune``.  The default keeps every
        strictly positive weight; pruning changes which points share a
        region and so is off unless asked for.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DomainError(f"weight matrix must be square, got shape {W.shape}")
    A = 0.5 * (W + W.T)
    i, j = np.nonzero(np.triu(A, k=1) > max(prune, 0.0))
    return WeightedGraph(W.shape[0], np.column_stack([i, j]).astype(np.intp), A[i, j])


@dataclass(frozen=True)
class ClusterAssignment:
    """Labels ``0..L-1`` per calibration point.

    Labels are numbered by each group's smallest node index.
    """

    labels: np.ndarray
    kind: str = COMPONENTS
    modularity: float = math.nan

    @property
    def L(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def members(self, label):
        return np.flatnonzero(self.labels == label)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["node", "label"])
            out.writerows(enumerate(self.labels.tolist()))


def _canonical(labels):
    """Renumber so groups appear in order of their smallest node."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse].astype(np.intp)


def connected_components(g):
    _, labels = csgraph.connected_components(g.adjacency(), directed=False)
    return ClusterAssignment(_canonical(labels), COMPONENTS)


def modularity(g, labels, resolution=1.0):
    """Newman modularity of a partition of ``g``."""
    A = g.adjacency()
    two_m = A.sum()
    if two_m == 0:
        return 0.0
    labels = np.asarray(labels)
    deg = np.asarray(A.sum(axis=1)).ravel()
    A = A.tocoo()
    inside = A.data[labels[A.row] == labels[A.col]].sum()
    tot = np.bincount(labels, weights=deg)
    return float(inside / two_m - resolution * np.sum(tot ** 2) / two_m ** 2)


def louvain(g, resolution=1.0, seed=0):
    """Louvain modularity maximization, deterministic for a given seed.

    Each aggregation level must not lower modularity; the final value is
    attached to the result.
    """
    if resolution <= 0:
        raise DomainError(f"resolution must be positive, got {resolution}")
    if g.edges.shape[0] == 0:
        return ClusterAssignment(np.arange(g.n), COMMUNITIES, 0.0)
    labels = np.arange(g.n)
    q = modularity(g, labels, resolution)
    levels = nx.community.louvain_partitions(g.to_networkx(), weight="weight",
                                             resolution=resolution, seed=seed)
    for partition in levels:
        for c, nodes in enumerate(partition):
            labels[list(nodes)] = c
        q_new = modularity(g, labels, resolution)
        if q_new < q - 1e-12:
            raise AssertionError(f"modularity dropped from {q} to {q_new}")
        q = q_new
    return ClusterAssignment(_canonical(labels), COMMUNITIES, q)


def region_masses(test_weights, clusters):
    """Localizer mass the test row puts on each group."""
    return np.bincount(clusters.labels, weights=np.asarray(test_weights, dtype=float),
                       minlength=clusters.L)


def assign_region(test_weights, clusters, tol=1e-9):
    """Group with the largest mass, or :data:`UNDECIDED` if the top two are within ``tol``."""
    m = region_masses(test_weights, clusters)
    if m.size == 1:
        return 0
    top2 = np.partition(m, -2)[-2:]
    if top2[1] - top2[0] <= tol:
        return UNDECIDED
    return int(np.argmax(m))


@dataclass
class GroupResult:
    threshold: float
    region: int
    fallback: bool = False
    alpha_tilde: float = math.nan


def _region_members(clusters, region):
    if region == UNDECIDED:
        return None, False
    members = clusters.members(region)
    if members.size == 0:
        log.warning("region %d has no calibration points; using all of them", region)
        return None, True
    return members, False


def groupwise_threshold(model, clusters, x, loc=None, tol=1e-9, with_alpha=False):
    """Localized threshold calibrated on the test point's region only.

    Undecided points are calibrated against every calibration point.
    """
    if loc is None:
        loc = model.localize(x)
    region = assign_region(loc.test_row, clusters, tol)
    members, fallback = _region_members(clusters, region)
    t = lcp_threshold(model, None, members, loc)
    a = alpha_tilde(model, None, math.inf, members, loc) if with_alpha else math.nan
    return GroupResult(t, region, fallback, a)


def groupwise_thresholds(model, clusters, X, tol=1e-9, with_alpha=False):
    return [groupwise_threshold(model, clusters, None, loc, tol, with_alpha)
            for loc in model.localize_many(X)]


def split_group_thresholds(model, clusters, X, tol=1e-9):
    """Split-conformal radius per region, regions assigned by localizer mass."""
    radii = {}
    out = []
    for loc in model.localize_many(X):
        region = assign_region(loc.test_row, clusters, tol)
        members, fallback = _region_members(clusters, region)
        key = -1 if members is None else region
        if key not in radii:
            V = model.residuals if members is None else model.residuals[members]
            radii[key] = split_threshold(V, model.alpha)
        out.append(GroupResult(radii[key], region, fallback))
    return out
