"""Weighted graph Laplacians and the minimum-norm solves behind every update.

A measurement batch induces a weighted graph; each connected component gets
its own Laplacian. All coordinate updates reduce to solving ``L y = rhs``
where ``rhs`` has zero column sums, and the minimum-norm (pseudo-inverse)
solution is the one with zero column sums as well.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cs_components
from scipy.sparse.linalg import cg as _cg

from .observations import ObservationBatch, clamp_weights

__all__ = [
    "ComponentLaplacian",
    "ClusterPartition",
    "build_laplacian",
    "connected_components",
    "solve_min_norm",
    "project_centering",
    "algebraic_connectivity",
    "DENSE_SOLVER_MAX",
]

# components at most this large use the dense factorization path; larger ones
# fall back to deflated conjugate gradients on the sparse Laplacian
DENSE_SOLVER_MAX = 512


@dataclass
class ComponentLaplacian:
    """Laplacian of one connected component of the measurement graph.

    Edges are stored once per unordered pair (``rows[k] < cols[k]`` in local
    indices); the diagonal is implied as the weighted degree, so row sums of
    the full matrix are exactly zero by construction.
    """

    node_ids: np.ndarray  # global node indices, ascending
    rows: np.ndarray      # local edge endpoints, rows[k] < cols[k]
    cols: np.ndarray
    weights: np.ndarray   # strictly positive edge weights
    degree: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.degree is None:
            p = len(self.node_ids)
            self.degree = (
                np.bincount(self.rows, weights=self.weights, minlength=p)
                + np.bincount(self.cols, weights=self.weights, minlength=p)
            )

    @property
    def size(self) -> int:
        return len(self.node_ids)

    @property
    def nnz(self) -> int:
        """Number of stored off-diagonal entries (one per unordered pair)."""
        return len(self.weights)

    def to_dense(self) -> np.ndarray:
        L = np.zeros((self.size, self.size))
        L[self.rows, self.cols] = -self.weights
        L[self.cols, self.rows] = -self.weights
        L[np.diag_indices(self.size)] = self.degree
        return L

    def to_sparse(self) -> sp.csr_matrix:
        p = self.size
        i = np.concatenate([self.rows, self.cols, np.arange(p)])
        j = np.concatenate([self.cols, self.rows, np.arange(p)])
        v = np.concatenate([-self.weights, -self.weights, self.degree])
        return sp.csr_matrix((v, (i, j)), shape=(p, p))

    def check(self) -> "ComponentLaplacian":
        """Validate the structural invariants (used by tests)."""
        if np.any(self.weights <= 0):
            raise ValueError("stored weights must be strictly positive")
        if np.any(self.rows >= self.cols):
            raise ValueError("edges must be stored with rows < cols")
        # the diagonal is by definition the negated off-diagonal row sum
        d = (np.bincount(self.rows, weights=self.weights, minlength=self.size)
             + np.bincount(self.cols, weights=self.weights, minlength=self.size))
        if not np.array_equal(d, self.degree):
            raise ValueError("degree must equal the off-diagonal row sums")
        if self.size:
            sums = np.abs(self.to_dense().sum(axis=1))
            if sums.max() > 1e-12 * max(float(self.degree.max()), 1.0):
                raise ValueError("row sums must vanish")
        return self


@dataclass
class ClusterPartition:
    """Disjoint node subsets with per-cluster selected edge sets."""

    clusters: list  # list of int arrays
    edge_sets: list  # list of (k, 2) int arrays, global indices
    slot: int = 0

    def validate(self, node_count: int | None = None) -> "ClusterPartition":
        seen = np.concatenate([np.asarray(c) for c in self.clusters]) \
            if self.clusters else np.zeros(0, dtype=np.int64)
        if np.unique(seen).size != seen.size:
            raise ValueError("clusters must be pairwise disjoint")
        if node_count is not None and seen.size and (
            seen.min() < 0 or seen.max() >= node_count
        ):
            raise ValueError("cluster node index out of range")
        for c, edges in zip(self.clusters, self.edge_sets):
            members = set(np.asarray(c).tolist())
            e = np.asarray(edges).reshape(-1, 2)
            for a, b in e.tolist():
                if a not in members or b not in members:
                    raise ValueError("edge endpoint outside its cluster")
        return self

    def membership(self, node_count: int) -> np.ndarray:
        """Cluster index per node; -1 for nodes outside every cluster."""
        out = np.full(node_count, -1, dtype=np.int64)
        for j, c in enumerate(self.clusters):
            out[np.asarray(c)] = j
        return out


def _component_labels(m, n, node_count):
    """Connected-component label per node under positive-weight adjacency.

    Labels are consecutive integers ordered by each component's smallest
    member. Uses min-label propagation with pointer jumping (linear work per
    pass, logarithmic passes); falls back to the csgraph routine if an
    adversarial edge pattern stalls convergence.
    """
    if len(m) == 0:
        return np.arange(node_count), node_count
    labels = np.arange(node_count)
    max_passes = 4 + 2 * int(np.ceil(np.log2(node_count + 1)))
    for _ in range(max_passes):
        before = labels.copy()
        low = np.minimum(labels[m], labels[n])
        np.minimum.at(labels, m, low)
        np.minimum.at(labels, n, low)
        labels = labels[labels]
        labels = labels[labels]
        if not labels.any():  # one component swallowing node 0: connected
            return labels, 1
        if np.array_equal(labels, before):
            break
    else:
        ones = np.ones(len(m))
        adj = sp.csr_matrix(
            (np.concatenate([ones, ones]),
             (np.concatenate([m, n]), np.concatenate([n, m]))),
            shape=(node_count, node_count),
        )
        _, raw = _cs_components(adj, directed=False)
        # canonicalize to min-member labels
        mins = np.full(raw.max() + 1, node_count, dtype=np.int64)
        np.minimum.at(mins, raw, np.arange(node_count))
        labels = mins[raw]
    uniq, inverse = np.unique(labels, return_inverse=True)
    return inverse, len(uniq)


def _validate_batch_indices(batch: ObservationBatch, node_count: int):
    if len(batch) == 0:
        return
    if batch.m.min() < 0 or batch.n.min() < 0 \
            or batch.m.max() >= node_count or batch.n.max() >= node_count:
        raise ValueError("node index out of range")
    if np.any(batch.weight < 0):
        raise ValueError("negative weight")


def build_laplacian(
    batch: ObservationBatch,
    node_count: int,
    eps_w: float | None = None,
    include_singletons: bool = True,
) -> list:
    """Build one ``ComponentLaplacian`` per connected component.

    Components are ordered by their smallest member. Isolated nodes appear as
    singleton components with empty edge sets (skipped by all solvers) unless
    ``include_singletons`` is False. When ``eps_w`` is given, nonzero weights
    below it are clamped up with a warning.
    """
    _validate_batch_indices(batch, node_count)
    live = batch.nonzero()
    w = live.weight if eps_w is None else clamp_weights(live.weight, eps_w)
    labels, n_comp = _component_labels(live.m, live.n, node_count)

    order = np.argsort(labels, kind="stable")
    nodes_sorted = order  # node ids grouped by label (node id == position)
    counts = np.bincount(labels, minlength=n_comp)
    bounds = np.concatenate([[0], np.cumsum(counts)])

    # map each component to ascending node lists; relabel so that components
    # come out sorted by smallest member
    comp_nodes = [np.sort(nodes_sorted[bounds[k]:bounds[k + 1]]) for k in range(n_comp)]
    comp_order = np.argsort([c[0] for c in comp_nodes])

    # local index of every node inside its component
    local = np.zeros(node_count, dtype=np.int64)
    for c in comp_nodes:
        local[c] = np.arange(len(c))

    edge_label = labels[live.m] if len(live) else np.zeros(0, dtype=np.int64)
    out = []
    for k in comp_order:
        c = comp_nodes[k]
        if len(c) == 1 and not include_singletons:
            continue
        mask = edge_label == k
        i = local[live.m[mask]]
        j = local[live.n[mask]]
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        out.append(ComponentLaplacian(c, lo, hi, w[mask]))
    return out


def connected_components(batch: ObservationBatch, node_count: int) -> ClusterPartition:
    """Partition {0..N-1} into maximal components of the positive-weight graph."""
    _validate_batch_indices(batch, node_count)
    live = batch.nonzero()
    labels, n_comp = _component_labels(live.m, live.n, node_count)
    clusters, edge_sets = [], []
    edge_label = labels[live.m] if len(live) else np.zeros(0, dtype=np.int64)
    for k in range(n_comp):
        clusters.append(np.flatnonzero(labels == k))
    order = np.argsort([c[0] for c in clusters])
    clusters = [clusters[k] for k in order]
    for rank, k in enumerate(order):
        mask = edge_label == k
        edge_sets.append(np.column_stack([live.m[mask], live.n[mask]]))
    return ClusterPartition(clusters, edge_sets, slot=batch.slot)


def _solve_dense(lap: ComponentLaplacian, rhs: np.ndarray) -> np.ndarray:
    p = lap.size
    L = lap.to_dense()
    # shift along the all-ones direction makes L nonsingular without touching
    # the solution on the zero-column-sum subspace
    shift = max(float(lap.degree.mean()), 1.0)
    L += shift / p
    y = np.linalg.solve(L, rhs)
    y -= y.mean(axis=0)
    return y


def _solve_cg(lap: ComponentLaplacian, rhs: np.ndarray, tol: float) -> np.ndarray:
    p = lap.size
    L = lap.to_sparse()
    shift = max(float(lap.degree.mean()), 1.0) / p
    # L + shift*11^T is SPD and agrees with L on the zero-column-sum subspace
    A = sp.linalg.LinearOperator(
        (p, p), matvec=lambda v: L @ v + shift * v.sum(), dtype=np.float64
    )
    M = sp.diags(1.0 / (lap.degree + shift))
    y = np.empty_like(rhs)
    for col in range(rhs.shape[1]):
        b = rhs[:, col]
        sol, info = _cg(A, b, rtol=tol, atol=0.0, maxiter=50 * p, M=M)
        if info != 0:
            return _solve_dense(lap, rhs)
        y[:, col] = sol
    y -= y.mean(axis=0)
    resid = np.linalg.norm(L @ y - rhs)
    if resid > 1e-9 * max(np.linalg.norm(rhs), 1e-300):
        return _solve_dense(lap, rhs)
    return y


def solve_min_norm(
    lap: ComponentLaplacian,
    rhs: np.ndarray,
    rhs_tol: float = 1e-9,
    dense_threshold: int = DENSE_SOLVER_MAX,
    cg_tol: float = 1e-12,
    eps_w: float | None = None,
) -> np.ndarray:
    """Minimum-norm solution of ``L y = rhs`` for a connected component.

    Requires each column of ``rhs`` to sum to zero (relative to its magnitude)
    so the system is consistent; the returned solution has zero column sums.
    The solver choice (dense factorization vs deflated CG) is internal and
    does not affect the output contract.
    """
    rhs = np.atleast_2d(np.asarray(rhs, dtype=np.float64))
    squeeze = False
    if rhs.shape[0] == 1 and lap.size != 1:
        rhs = rhs.T
        squeeze = True
    if rhs.shape[0] != lap.size:
        raise ValueError("rhs row count does not match component size")

    col_sums = rhs.sum(axis=0)
    scale = np.abs(rhs).sum(axis=0)
    bad = np.abs(col_sums) > rhs_tol * np.maximum(scale, 1e-300)
    if np.any(bad):
        raise ValueError(
            "rhs not in the range space of L (column sums "
            f"{col_sums[bad]} exceed tolerance)"
        )
    if eps_w is not None and lap.nnz and float(lap.weights.min()) < eps_w:
        warnings.warn(
            "edge weight below eps_w: Laplacian conditioning bound not guaranteed",
            stacklevel=2,
        )
    if lap.size <= dense_threshold:
        y = _solve_dense(lap, rhs)
    else:
        y = _solve_cg(lap, rhs, cg_tol)
    return y[:, 0] if squeeze else y


def project_centering(lap: ComponentLaplacian, X: np.ndarray) -> np.ndarray:
    """Apply the component's centering projector: remove per-column means."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != lap.size:
        raise ValueError("row count does not match component size")
    return X - X.mean(axis=0)


def algebraic_connectivity(lap: ComponentLaplacian) -> float:
    """Second-smallest Laplacian eigenvalue (reciprocal of the pseudo-inverse
    spectral norm) of a connected component."""
    if lap.size < 2:
        raise ValueError("algebraic connectivity is undefined for singletons")
    vals = np.linalg.eigvalsh(lap.to_dense())
    return float(vals[1])
