"""Random cluster partitioning, edge subsampling, and weight schemes.

Each time slot partitions the nodes into random disjoint clusters of size p
and selects a subset of intra-cluster pairs whose dissimilarities get
measured. Batch-size calibration rules translate a measurement budget per
slot into (p, q).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .graph_linalg import ClusterPartition

__all__ = [
    "SamplerConfig",
    "partition_nodes",
    "sample_cluster_edges",
    "assign_weights",
    "calibrate_p_q",
]

WEIGHT_SCHEMES = ("unity", "sammon", "provided")


@dataclass
class SamplerConfig:
    """Per-slot sampling parameters.

    Exactly one of ``q`` (edges per cluster) or ``fraction`` (fraction of
    intra-cluster pairs) must be set.
    """

    p: int
    q: int | None = None
    fraction: float | None = None
    scheme: str = "unity"
    seed: int = 0
    ensure_connected: bool = False

    def __post_init__(self):
        if self.p < 2:
            raise ValueError(f"cluster size p must be >= 2, got {self.p}")
        if (self.q is None) == (self.fraction is None):
            raise ValueError("exactly one of q or fraction must be given")
        if self.q is not None and self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"unknown weight scheme {self.scheme!r}")


def partition_nodes(node_count: int, p: int,
                    rng: np.random.Generator, slot: int = 0) -> ClusterPartition:
    """Partition nodes into random disjoint clusters of size p.

    A remainder of size >= 2 forms a final smaller cluster; a remainder of
    one node idles for the slot.
    """
    if p < 2:
        raise ValueError(f"cluster size p must be >= 2, got {p}")
    if p > node_count:
        raise ValueError(f"cluster size p={p} exceeds node count {node_count}")
    perm = rng.permutation(node_count)
    full = node_count // p
    rem = node_count - full * p
    clusters = [perm[k * p:(k + 1) * p] for k in range(full)]
    if rem >= 2:
        clusters.append(perm[full * p:])
    return ClusterPartition(clusters, [np.zeros((0, 2), dtype=np.int64)
                                       for _ in clusters], slot=slot)


# pair tables for small cluster sizes, built once per size
_PAIR_TABLE_MAX = 200_000
_pair_tables: dict = {}


def _pair_from_index(k: np.ndarray, s: int):
    """Decode linear pair indices into (a, b), a < b, over s items.

    Pairs are enumerated row-major: (0,1), (0,2), ..., (0,s-1), (1,2), ...
    Small sizes use a cached lookup table; larger ones are decoded
    arithmetically so only the requested pairs are materialized.
    """
    total = s * (s - 1) // 2
    if total <= _PAIR_TABLE_MAX:
        table = _pair_tables.get(s)
        if table is None:
            table = np.triu_indices(s, k=1)
            _pair_tables[s] = table
        return table[0][k], table[1][k]
    # row a satisfies T(a) <= k < T(a+1) with T(a) = a*s - a*(a+1)/2
    kf = k.astype(np.float64)
    a = np.floor((2 * s - 1 - np.sqrt((2 * s - 1) ** 2 - 8 * kf)) / 2).astype(np.int64)
    # guard against floating-point rounding on the cell boundaries
    start = a * s - a * (a + 1) // 2
    over = k < start
    a[over] -= 1
    start = a * s - a * (a + 1) // 2
    under = k >= start + (s - 1 - a)
    a[under] += 1
    start = a * s - a * (a + 1) // 2
    b = k - start + a + 1
    return a, b


def _sample_local_pairs(
    size: int,
    rng: np.random.Generator,
    q: int | None = None,
    fraction: float | None = None,
    ensure_connected: bool = False,
    max_resample: int = 50,
):
    """Uniform random subset of pairs over ``size`` items, local indices."""
    if size < 2:
        raise ValueError("cluster must have at least 2 nodes")
    total = size * (size - 1) // 2
    if q is None:
        if fraction is None:
            raise ValueError("one of q or fraction is required")
        q = max(1, round(fraction * total))
    if q > total:
        warnings.warn(f"requested q={q} clamped to {total} available pairs",
                      stacklevel=2)
        q = total
    for _ in range(max_resample):
        k = rng.permutation(total)[:q]
        a, b = _pair_from_index(k, size)
        if not ensure_connected or _connects(a, b, size):
            return a, b
    warnings.warn("could not draw a connecting edge set; returning last draw",
                  stacklevel=2)
    return a, b


def sample_cluster_edges(
    cluster: np.ndarray,
    rng: np.random.Generator,
    q: int | None = None,
    fraction: float | None = None,
    ensure_connected: bool = False,
    max_resample: int = 50,
) -> np.ndarray:
    """Uniform random subset of intra-cluster pairs, as a (k, 2) array.

    Requests beyond the number of available pairs are clamped with a warning.
    With ``ensure_connected`` the draw is repeated until the selected edges
    connect the cluster (callers that leave it off split disconnected
    clusters into their induced components instead).
    """
    cluster = np.asarray(cluster)
    a, b = _sample_local_pairs(len(cluster), rng, q=q, fraction=fraction,
                               ensure_connected=ensure_connected,
                               max_resample=max_resample)
    return np.column_stack([cluster[a], cluster[b]])


def _connects(a, b, s) -> bool:
    parent = list(range(s))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merged = 0
    for i, j in zip(a.tolist(), b.tolist()):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            merged += 1
    return merged == s - 1


def assign_weights(delta: np.ndarray, scheme: str = "unity",
                   eps_w: float = 1e-3,
                   provided: np.ndarray | None = None,
                   clamp: bool = True) -> np.ndarray:
    """Weights for measured dissimilarities.

    unity: w = 1; sammon: w = 1/delta clamped to [eps_w, 1]; provided:
    pass-through. Invalid measurements (delta <= 0, e.g. negative noisy
    ranges, or missing values) get weight 0 under every scheme.
    ``clamp=False`` leaves sammon weights unbounded; the plain-gradient
    baseline uses this since its characteristic divergence stems from
    unbounded inverse-distance weights.
    """
    delta = np.asarray(delta, dtype=np.float64)
    valid = np.isfinite(delta) & (delta > 0)
    if scheme == "unity":
        w = np.where(valid, 1.0, 0.0)
    elif scheme == "sammon":
        w = np.zeros_like(delta)
        np.divide(1.0, delta, out=w, where=valid)
        if clamp:
            w = np.clip(w, eps_w, 1.0, out=w)
        w[~valid] = 0.0
    elif scheme == "provided":
        if provided is None:
            raise ValueError("scheme 'provided' requires a weight array")
        w = np.where(valid, np.asarray(provided, dtype=np.float64), 0.0)
    else:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    return w


def calibrate_p_q(node_count: int, target_per_slot: float,
                  sparse_mode: bool = False, beta: float = 3.0):
    """Choose (p, q) for a measurement budget of ``target_per_slot`` per slot.

    Sparse mode keeps each cluster's Laplacian sparse: p ~ r^beta and
    q ~ r^(beta+1) with r = target/N. Dense mode selects all intra-cluster
    pairs: p ~ r, q = p(p-1)/2. Infeasible targets are clamped to the nearest
    feasible choice with a warning.
    """
    if target_per_slot < node_count:
        raise ValueError("target measurements per slot must be at least N")
    r = target_per_slot / node_count
    if sparse_mode:
        p = round(r**beta)
        q = round(r ** (beta + 1))
    else:
        p = round(r)
        q = None  # all pairs, fixed after p is clamped

    clamped = False
    if p < 2:
        p, clamped = 2, True
    if p > node_count:
        p, clamped = node_count, True
    total = p * (p - 1) // 2
    if q is None:
        q = total
    if q < 1:
        q, clamped = 1, True
    if q > total:
        q, clamped = total, True
    if clamped:
        warnings.warn(
            f"target {target_per_slot} infeasible for N={node_count}; "
            f"using nearest feasible p={p}, q={q}",
            stacklevel=2,
        )
    return p, q
