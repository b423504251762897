"""Stress evaluation and the four coordinate update rules.

All updates share one structure: per connected component of the measurement
graph, solve a Laplacian system against the majorization matrix of the
current configuration. The incremental rule blends that solution with the
previous coordinates through the step size ``mu``; the per-component
coordinate center is preserved exactly.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .graph_linalg import (
    ComponentLaplacian,
    ClusterPartition,
    DENSE_SOLVER_MAX,
    _component_labels,
    _solve_cg,
    _solve_dense,
    solve_min_norm,
)
from .observations import ObservationBatch, StepConfig, clamp_weights

__all__ = [
    "stress",
    "normalized_stress",
    "b_epsilon_matrix",
    "smacof_iterate",
    "stochastic_step",
    "spe_step",
    "sgd_step",
    "averaged_step",
    "closed_form_b_average",
    "upsilon",
]


def stress(X: np.ndarray, batch: ObservationBatch) -> float:
    """Weighted stress: sum of w * (delta - ||x_m - x_n||)^2."""
    if len(batch) == 0:
        return 0.0
    d = np.linalg.norm(X[batch.m] - X[batch.n], axis=1)
    return float(np.sum(batch.weight * (batch.delta - d) ** 2))


def normalized_stress(X: np.ndarray, batch: ObservationBatch) -> float:
    """Stress divided by sum of w * delta^2 (0 when the batch carries nothing)."""
    denom = batch.total_weighted_delta_sq()
    if denom == 0.0:
        return 0.0
    return stress(X, batch) / denom


def _regularized_coeffs(X, m, n, w, delta, eps_x):
    """Edge coefficients w*delta / sqrt(||x_m - x_n||^2 + eps_x).

    At eps_x == 0 coincident endpoints get coefficient 0 (the classical
    majorization matrix guard).
    """
    diff = X[m] - X[n]
    d2 = np.einsum("ij,ij->i", diff, diff)
    if eps_x > 0:
        return w * delta / np.sqrt(d2 + eps_x), diff
    coef = np.zeros_like(d2)
    pos = d2 > 0
    coef[pos] = (w[pos] * delta[pos]) / np.sqrt(d2[pos])
    return coef, diff


def _component_edge_groups(batch: ObservationBatch, node_count: int,
                           eps_w: float | None = None):
    """Group positive-weight observations by connected component.

    Returns (nodes, i, j, w, delta) tuples with local endpoint indices and
    ascending global node ids, only for components with at least two nodes.
    Nodes outside every returned component have no usable measurements.
    """
    live = batch.nonzero()
    if len(live) == 0:
        return []
    w = live.weight if eps_w is None else clamp_weights(live.weight, eps_w)
    labels, n_comp = _component_labels(live.m, live.n, node_count)
    if n_comp == 1:
        return [(np.arange(node_count), live.m, live.n, w, live.delta)]
    sizes = np.bincount(labels, minlength=n_comp)

    order = np.argsort(labels, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    local = np.empty(node_count, dtype=np.int64)
    groups = []
    edge_label = labels[live.m]
    edge_order = np.argsort(edge_label, kind="stable")
    edge_counts = np.bincount(edge_label, minlength=n_comp)
    edge_bounds = np.concatenate([[0], np.cumsum(edge_counts)])
    for k in range(n_comp):
        if sizes[k] < 2:
            continue
        # stable argsort groups nodes by label in ascending id order already
        nodes = order[bounds[k]:bounds[k + 1]]
        local[nodes] = np.arange(len(nodes))
        sel = edge_order[edge_bounds[k]:edge_bounds[k + 1]]
        groups.append((nodes, local[live.m[sel]], local[live.n[sel]],
                       w[sel], live.delta[sel]))
    return groups


def _laplacian_from_group(nodes, i, j, w) -> ComponentLaplacian:
    lo = np.minimum(i, j)
    hi = np.maximum(i, j)
    return ComponentLaplacian(nodes, lo, hi, w)


def _solve_component(nodes, i, j, w, rhs):
    """Min-norm solve on one component; the rhs is zero-column-sum by
    construction, so the public contract check is skipped."""
    lap = _laplacian_from_group(nodes, i, j, w)
    if lap.size <= DENSE_SOLVER_MAX:
        return _solve_dense(lap, rhs)
    return _solve_cg(lap, rhs, 1e-12)


def _b_times_x(Xc, i, j, w, delta, eps_x):
    """Rows of B^eps(Xc) @ Xc accumulated from the edge list."""
    coef, diff = _regularized_coeffs(Xc, i, j, w, delta, eps_x)
    contrib = coef[:, None] * diff
    p, dim = Xc.shape
    out = np.empty_like(Xc)
    for col in range(dim):
        out[:, col] = (np.bincount(i, weights=contrib[:, col], minlength=p)
                       - np.bincount(j, weights=contrib[:, col], minlength=p))
    return out


def b_epsilon_matrix(X: np.ndarray, batch: ObservationBatch, eps_x: float):
    """Regularized majorization matrix per connected component.

    Returns a list of (node_ids, B) pairs, one per component with >= 2 nodes,
    where B is a sparse CSR matrix over local indices with exact zero row
    sums (diagonal entries negate the off-diagonal row sums).
    """
    node_count = X.shape[0]
    out = []
    for nodes, i, j, w, delta in _component_edge_groups(batch, node_count):
        Xc = X[nodes]
        coef, _ = _regularized_coeffs(Xc, i, j, w, delta, eps_x)
        p = len(nodes)
        diag = np.zeros(p)
        np.add.at(diag, i, coef)
        np.add.at(diag, j, coef)
        rows = np.concatenate([i, j, np.arange(p)])
        cols = np.concatenate([j, i, np.arange(p)])
        vals = np.concatenate([-coef, -coef, diag])
        out.append((nodes, sp.csr_matrix((vals, (rows, cols)), shape=(p, p))))
    return out


def smacof_iterate(X: np.ndarray, batch: ObservationBatch,
                   threads: int = 1) -> np.ndarray:
    """One majorization iterate per component: X' = pinv(L) B(X) X.

    Components are recentered at the origin (the minimum-norm solution);
    nodes without usable measurements are left unchanged. Stress never
    increases.
    """
    Xn = np.array(X, dtype=np.float64, copy=True)
    groups = _component_edge_groups(batch, X.shape[0])

    def solve_one(group):
        nodes, i, j, w, delta = group
        Xc = Xn[nodes]
        rhs = _b_times_x(Xc, i, j, w, delta, eps_x=0.0)
        return nodes, _solve_component(nodes, i, j, w, rhs)

    for nodes, y in _map_groups(solve_one, groups, threads):
        Xn[nodes] = y
    return Xn


def _map_groups(fn, groups, threads):
    """Apply fn to disjoint component groups, optionally on a thread pool.

    Results are collected and applied in group order, so the outcome is
    bit-identical for any worker count.
    """
    if threads <= 1 or len(groups) <= 1:
        return [fn(g) for g in groups]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, groups))


def stochastic_step(
    X: np.ndarray,
    batch: ObservationBatch,
    cfg: StepConfig,
    partition: ClusterPartition | None = None,
    threads: int = 1,
) -> np.ndarray:
    """One incremental update of the embedding from a measurement batch.

    Per connected component C of the positive-weight graph:

        X_C' = (I - mu * J_C) X_C + mu * pinv(L_C) B^eps(X_C) X_C

    with J_C the centering projector on C, so the coordinate center of each
    component is preserved. Nodes outside every component are unchanged;
    clusters whose measurements all have zero weight are skipped. ``partition``
    is validated against the batch when given (every positive-weight edge
    must stay inside one cluster) but does not change the result.
    """
    node_count = X.shape[0]
    if partition is not None:
        member = partition.membership(node_count)
        live = batch.nonzero()
        if len(live) and (
            np.any(member[live.m] < 0) or np.any(member[live.m] != member[live.n])
        ):
            raise ValueError("positive-weight edge crosses cluster boundaries")

    mu = cfg.mu
    Xn = np.array(X, dtype=np.float64, copy=True)
    if mu == 0.0:
        return Xn
    groups = _component_edge_groups(batch, node_count, eps_w=cfg.eps_w)

    # components of equal size go through one stacked dense solve; the rest
    # take the generic per-component path
    by_size = {}
    for g in groups:
        by_size.setdefault(len(g[0]), []).append(g)

    leftovers = []
    for size, gs in sorted(by_size.items()):
        if len(gs) > 1 and size <= DENSE_SOLVER_MAX:
            _stacked_step(Xn, gs, size, mu, cfg.eps_x)
        else:
            leftovers.extend(gs)

    def step_one(group):
        nodes, i, j, w, delta = group
        Xc = Xn[nodes]
        rhs = _b_times_x(Xc, i, j, w, delta, cfg.eps_x)
        y = _solve_component(nodes, i, j, w, rhs)
        center = Xc.mean(axis=0)
        return nodes, (1.0 - mu) * Xc + mu * center + mu * y

    for nodes, val in _map_groups(step_one, leftovers, threads):
        Xn[nodes] = val
    return Xn


def _stacked_step(Xn, groups, size, mu, eps_x):
    """Apply the incremental update to same-size components in one batched
    dense solve. Per-component arithmetic matches the generic path."""
    g = len(groups)
    dim = Xn.shape[1]
    L = np.zeros((g, size, size))
    rhs = np.empty((g, size, dim))
    Xcs = np.empty((g, size, dim))
    for k, (nodes, i, j, w, delta) in enumerate(groups):
        Xc = Xn[nodes]
        Xcs[k] = Xc
        rhs[k] = _b_times_x(Xc, i, j, w, delta, eps_x)
        L[k, i, j] = -w
        L[k, j, i] = -w
        deg = (np.bincount(i, weights=w, minlength=size)
               + np.bincount(j, weights=w, minlength=size))
        idx = np.arange(size)
        L[k, idx, idx] = deg
        L[k] += max(float(deg.mean()), 1.0) / size
    y = np.linalg.solve(L, rhs)
    y -= y.mean(axis=1, keepdims=True)
    out = (1.0 - mu) * Xcs + mu * Xcs.mean(axis=1, keepdims=True) + mu * y
    for k, (nodes, *_rest) in enumerate(groups):
        Xn[nodes] = out[k]


def spe_step(xi: np.ndarray, xj: np.ndarray, delta: float, mu: float):
    """Closed-form two-node update (the p = 2 special case).

    Each endpoint moves half of mu times the proportional misfit along the
    connecting segment, exactly matching the general component update on a
    two-node cluster:

        xi' = xi + (mu/2) * (delta/d - 1) * (xi - xj)

    and symmetrically for xj. Coincident points are rejected; callers must
    take the regularized path instead.
    """
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    diff = xi - xj
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        raise ValueError("coincident points: use the eps_x-regularized update")
    shift = 0.5 * mu * (delta / d - 1.0) * diff
    return xi + shift, xj - shift


def sgd_step(X: np.ndarray, batch: ObservationBatch, mu: float):
    """Plain stochastic-gradient step X + mu * (B(X) X - L X).

    Comparison baseline only; divergence is expected behavior under noise.
    Returns (X', diverged) where ``diverged`` flags non-finite output.
    """
    live = batch.nonzero()
    Xn = np.array(X, dtype=np.float64, copy=True)
    if len(live) == 0:
        return Xn, False
    coef, diff = _regularized_coeffs(X, live.m, live.n, live.weight,
                                     live.delta, eps_x=0.0)
    # rows of (B - L) X: sum over edges of (w*delta/d - w) * (x_m - x_n)
    contrib = (coef - live.weight)[:, None] * diff
    np.add.at(Xn, live.m, mu * contrib)
    np.add.at(Xn, live.n, -mu * contrib)
    diverged = not bool(np.all(np.isfinite(Xn)))
    return Xn, diverged


def upsilon(N: int, p: int) -> float:
    """Effective averaging rate N(p-1) / (p(N-1)) of the size-p cluster scheme."""
    return N * (p - 1) / (p * (N - 1))


def closed_form_b_average(
    X: np.ndarray,
    expected_deltas: np.ndarray,
    eps_x: float,
    p: int,
) -> np.ndarray:
    """Expected update matrix under the i.i.d.-weight, size-p cluster scheme.

    Off-diagonal entries are -(upsilon/N) * E[delta_mn] / sqrt(d_mn^2 + eps_x)
    and the diagonal negates the off-diagonal row sums. Requires p to divide
    the node count. The weights themselves cancel and do not appear.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if not 2 <= p <= N:
        raise ValueError(f"cluster size p={p} out of range for N={N}")
    if N % p != 0:
        raise ValueError(f"p={p} must divide N={N}")
    expected_deltas = np.asarray(expected_deltas, dtype=np.float64)
    if expected_deltas.shape != (N, N):
        raise ValueError("expected_deltas must be an N x N matrix")

    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, 1.0)  # diagonal never used
    norm = np.sqrt(d2 + eps_x)
    scaled = expected_deltas / norm
    np.fill_diagonal(scaled, 0.0)

    B = -(upsilon(N, p) / N) * scaled
    np.fill_diagonal(B, -B.sum(axis=1))
    return B


def averaged_step(X: np.ndarray, b_average: np.ndarray, mu: float,
                  ups: float) -> np.ndarray:
    """One step of the deterministic companion recursion.

        X' = (1 - mu * upsilon) X + mu * B_avg X

    ``b_average`` is the expected update matrix evaluated at X (closed form
    or an empirical estimate). X is assumed origin-centered; the iteration
    preserves that.
    """
    return (1.0 - mu * ups) * X + mu * (b_average @ X)
