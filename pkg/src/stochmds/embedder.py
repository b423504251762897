"""Run drivers: batch majorization, the incremental slot loop, the averaged
companion recursion, step-size schedules, and steady-state metrics.

A run produces a ``RunTrace``: one record per slot with stress evaluated on a
fixed subsample of pairs (full stress is quadratic in N and is never computed
per slot for large runs), plus the final embedding and optionally the whole
embedding sequence.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .observations import ObservationBatch, StepConfig
from .rng import substream
from .sampling import SamplerConfig, assign_weights, partition_nodes, \
    sample_cluster_edges, _pair_from_index, _sample_local_pairs
from .stress_core import (
    averaged_step,
    closed_form_b_average,
    sgd_step,
    smacof_iterate,
    stochastic_step,
    stress,
    upsilon,
)

__all__ = [
    "MuSchedule",
    "RunTrace",
    "run_batch_smacof",
    "run_stochastic",
    "run_averaged_oracle",
    "hovering_deviation",
    "steady_state_stats",
    "random_init",
    "estimate_scale",
]


@dataclass
class MuSchedule:
    """Step-size schedule over slots.

    kinds: ``constant`` (fixed value), ``piecewise`` (value changes at given
    slot boundaries), ``reciprocal`` (mu_t = min(1, c / (1 + t)), the
    long-memory decay). Every emitted value lies in (0, 1].
    """

    kind: str
    value: float = 0.0
    breakpoints: tuple = ()
    values: tuple = ()

    @classmethod
    def constant(cls, value: float) -> "MuSchedule":
        if not 0.0 < value <= 1.0:
            raise ValueError(f"mu must lie in (0, 1], got {value}")
        return cls("constant", value=value)

    @classmethod
    def piecewise(cls, breakpoints, values) -> "MuSchedule":
        """``values[k]`` applies from slot ``breakpoints[k]`` (0-based) on."""
        breakpoints = tuple(int(b) for b in breakpoints)
        values = tuple(float(v) for v in values)
        if len(breakpoints) != len(values) or not values:
            raise ValueError("breakpoints and values must align and be nonempty")
        if breakpoints[0] != 0 or list(breakpoints) != sorted(set(breakpoints)):
            raise ValueError("breakpoints must start at 0 and increase")
        if any(not 0.0 < v <= 1.0 for v in values):
            raise ValueError("all schedule values must lie in (0, 1]")
        return cls("piecewise", breakpoints=breakpoints, values=values)

    @classmethod
    def reciprocal(cls, c: float) -> "MuSchedule":
        if c <= 0:
            raise ValueError(f"decay constant must be positive, got {c}")
        return cls("reciprocal", value=float(c))

    def mu_at(self, t: int) -> float:
        """Step size for the 0-based update index t."""
        if self.kind == "constant":
            return self.value
        if self.kind == "piecewise":
            k = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
            return self.values[k]
        if self.kind == "reciprocal":
            return min(1.0, self.value / (1.0 + t))
        raise ValueError(f"unknown schedule kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "piecewise":
            return {"kind": "piecewise", "breakpoints": list(self.breakpoints),
                    "values": list(self.values)}
        return {"kind": "reciprocal", "c": self.value}


@dataclass
class RunTrace:
    """Per-slot records plus the final embedding of one run."""

    records: list
    final: np.ndarray
    seed: int
    status: str = "ok"
    config: dict | None = None
    embeddings: np.ndarray | None = None  # (slots+1, N, P) when recorded

    def stresses(self) -> np.ndarray:
        return np.array([r["stress"] for r in self.records], dtype=np.float64)

    def slot_index(self) -> np.ndarray:
        return np.array([r["t"] for r in self.records], dtype=np.int64)

    def write_jsonl(self, path) -> None:
        """One header line with the effective config, then one line per slot."""
        header = {"config": self.config or {}, "seed": self.seed,
                  "status": self.status}
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def random_init(node_count: int, dim: int, rng: np.random.Generator,
                scale: float = 1.0) -> np.ndarray:
    """Uniform random configuration in a centered cube of side ``scale``."""
    X = (rng.random((node_count, dim)) - 0.5) * scale
    return X - X.mean(axis=0)


def estimate_scale(provider, seed: int, samples: int = 512) -> float:
    """Largest dissimilarity over a random pair sample, used to size inits."""
    n = provider.node_count
    total = n * (n - 1) // 2
    rng = substream(seed, "init")
    k = rng.choice(total, size=min(samples, total), replace=False)
    a, b = _pair_from_index(np.sort(k), n)
    d = provider.pairs(a, b)
    d = d[np.isfinite(d)]
    return float(d.max()) if d.size else 1.0


def _record(t, s, s_norm, mu, wall_ms, pairs):
    return {"t": int(t), "stress": float(s), "stress_norm": float(s_norm),
            "mu": float(mu), "wall_ms": float(wall_ms), "pairs": int(pairs)}


class _EvalSet:
    """Fixed pair subsample on which per-slot stress is evaluated."""

    def __init__(self, provider, seed: int, max_pairs: int):
        n = provider.node_count
        total = n * (n - 1) // 2
        if total <= max_pairs:
            iu, ju = np.triu_indices(n, k=1)
        else:
            rng = substream(seed, "eval")
            k = rng.choice(total, size=max_pairs, replace=False)
            iu, ju = _pair_from_index(np.sort(k), n)
        delta = provider.pairs(iu, ju)
        keep = np.isfinite(delta) & (delta > 0)
        self.iu, self.ju, self.delta = iu[keep], ju[keep], delta[keep]
        self.denom = float(np.sum(self.delta**2))

    def __len__(self):
        return len(self.delta)

    def stress(self, X: np.ndarray):
        diff = X[self.iu] - X[self.ju]
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        s = float(np.sum((self.delta - d) ** 2))
        return s, (s / self.denom if self.denom > 0 else 0.0)


class _BatchEval:
    """Stream-mode fallback: evaluate stress on the slot's own batch."""

    def __init__(self):
        self.batch = ObservationBatch.empty()

    def stress(self, X):
        s = stress(X, self.batch)
        denom = self.batch.total_weighted_delta_sq()
        return s, (s / denom if denom > 0 else 0.0)


def run_batch_smacof(batch: ObservationBatch, init: np.ndarray,
                     tol: float = 1e-6, max_iters: int = 500,
                     threads: int = 1, config_echo: dict | None = None,
                     seed: int = 0) -> RunTrace:
    """Iterate the batch majorization update until the relative stress
    decrease drops below ``tol`` or ``max_iters`` is reached.

    The recorded stress sequence is non-increasing up to solver round-off.
    """
    X = np.array(init, dtype=np.float64, copy=True)
    denom = batch.total_weighted_delta_sq()
    prev = stress(X, batch)
    records = [_record(0, prev, prev / denom if denom else 0.0, 1.0, 0.0,
                       len(batch))]
    status = "max_iters"
    for it in range(1, max_iters + 1):
        t0 = time.perf_counter()
        X = smacof_iterate(X, batch, threads=threads)
        cur = stress(X, batch)
        wall = (time.perf_counter() - t0) * 1e3
        records.append(_record(it, cur, cur / denom if denom else 0.0, 1.0,
                               wall, len(batch)))
        if (prev - cur) < tol * max(prev, 1e-300):
            status = "converged"
            prev = cur
            break
        prev = cur
    return RunTrace(records, X, seed, status=status, config=config_echo)


def _apply_slot(Xn, provider, partition, sampler: SamplerConfig,
                rng: np.random.Generator, noise_sigma: float,
                step: StepConfig, mu: float, mode: str, threads: int) -> int:
    """Sample and apply one slot cluster-by-cluster, updating Xn in place.

    Clusters touch disjoint rows and each update reads only the slot-start
    values of its own rows, so the result equals the simultaneous whole-slot
    update while holding only one cluster's measurements at a time.
    """
    pairs = 0
    cfg = replace(step, mu=mu)
    for cluster in partition.clusters:
        a, b = _sample_local_pairs(
            len(cluster), rng, q=sampler.q, fraction=sampler.fraction,
            ensure_connected=sampler.ensure_connected)
        delta = provider.pairs(cluster[a], cluster[b])
        if noise_sigma > 0:
            delta = delta + noise_sigma * rng.standard_normal(len(delta))
        w = assign_weights(delta, sampler.scheme, eps_w=step.eps_w,
                           clamp=(mode != "sgd"))
        mini = ObservationBatch(a, b, delta, w, slot=partition.slot)
        if mode == "sgd":
            upd, _ = sgd_step(Xn[cluster], mini, mu)
        else:
            upd = stochastic_step(Xn[cluster], mini, cfg, threads=threads)
        Xn[cluster] = upd
        pairs += len(mini)
    return pairs


def _slot_batch(provider, partition, sampler: SamplerConfig,
                rng: np.random.Generator, t: int, noise_sigma: float,
                eps_w: float, clamp_weights: bool = True):
    """Sample one slot's measurements over the given partition.

    All draws come from the slot's stream in cluster-index order, so the
    batch depends only on (seed, slot) and never on worker scheduling.
    """
    ms, ns, ds, ws = [], [], [], []
    edge_sets = []
    for cluster in partition.clusters:
        edges = sample_cluster_edges(
            cluster, rng,
            q=sampler.q, fraction=sampler.fraction,
            ensure_connected=sampler.ensure_connected,
        )
        edge_sets.append(edges)
        m, n = edges[:, 0], edges[:, 1]
        delta = provider.pairs(m, n)
        if noise_sigma > 0:
            delta = delta + noise_sigma * rng.standard_normal(len(delta))
        w = assign_weights(delta, sampler.scheme, eps_w=eps_w,
                           clamp=clamp_weights)
        ms.append(m)
        ns.append(n)
        ds.append(delta)
        ws.append(w)
    partition.edge_sets = edge_sets
    if not ms:
        return ObservationBatch.empty(slot=t)
    return ObservationBatch(np.concatenate(ms), np.concatenate(ns),
                            np.concatenate(ds), np.concatenate(ws), slot=t)


def run_stochastic(
    source,
    init: np.ndarray,
    schedule: MuSchedule,
    sampler: SamplerConfig | None,
    slots: int,
    *,
    step: StepConfig | None = None,
    noise_sigma: float = 0.0,
    mode: str = "stochastic",
    eval_pairs: int = 100_000,
    record_embeddings: bool = False,
    threads: int = 1,
    config_echo: dict | None = None,
) -> RunTrace:
    """Incremental embedding loop over random clusters.

    ``source`` is either a dissimilarity provider (sampled through
    ``sampler``; clean values, with optional measurement noise added per
    slot) or an iterable of pre-built ``ObservationBatch`` objects, in which
    case the sampler is unused and stress is evaluated on each slot's own
    batch. ``mode`` selects the update rule: ``stochastic`` (default),
    ``spe`` (requires p = 2 clusters) or ``sgd`` (the divergence-prone
    baseline). The first record (t = 0) holds the evaluation of the initial
    configuration.

    Sampler-driven slots process one cluster at a time: sample its pairs,
    fetch their dissimilarities, update the cluster rows, and move on.
    Working memory therefore stays at a small constant multiple of the
    embedding regardless of the measurement budget, and distinct clusters
    touch disjoint rows so the result is independent of worker count.
    """
    step = step or StepConfig()
    if mode not in ("stochastic", "spe", "sgd"):
        raise ValueError(f"unknown mode {mode!r}")
    streaming = sampler is None
    if streaming:
        stream = iter(source)
        seed = 0
        evaluator = _BatchEval()
    else:
        if mode == "spe" and sampler.p != 2:
            raise ValueError("mode 'spe' requires cluster size p = 2")
        seed = sampler.seed
        evaluator = _EvalSet(source, seed, eval_pairs)

    X = np.array(init, dtype=np.float64, copy=True)
    n = X.shape[0]
    s0, sn0 = evaluator.stress(X)
    records = [_record(0, s0, sn0, 0.0, 0.0, 0)]
    embeds = [X.copy()] if record_embeddings else None
    status = "ok"
    center0 = np.linalg.norm(X - X.mean(axis=0))

    for t in range(1, slots + 1):
        t0 = time.perf_counter()
        mu = schedule.mu_at(t - 1)
        if streaming:
            try:
                batch = next(stream)
            except StopIteration:
                status = "truncated"
                break
            evaluator.batch = batch
            if mode == "sgd":
                Xn, diverged = sgd_step(X, batch, mu)
            else:
                Xn = stochastic_step(X, batch, replace(step, mu=mu),
                                     threads=threads)
                diverged = False
            pairs = len(batch)
        else:
            slot_rng = substream(seed, "partition", t)
            partition = partition_nodes(n, sampler.p, slot_rng, slot=t)
            Xn = np.array(X, copy=True)
            pairs = _apply_slot(Xn, source, partition, sampler, slot_rng,
                                noise_sigma, step, mu, mode, threads)
            diverged = mode == "sgd" and not bool(np.all(np.isfinite(Xn)))

        if mode == "sgd" and not diverged:
            jn = np.linalg.norm(Xn - Xn.mean(axis=0))
            diverged = jn > 1e6 * max(center0, 1.0)
        if diverged:
            status = "diverged"
            break
        X = Xn

        s, sn = evaluator.stress(X)
        wall = (time.perf_counter() - t0) * 1e3
        records.append(_record(t, s, sn, mu, wall, pairs))
        if record_embeddings:
            embeds.append(X.copy())

    return RunTrace(records, X, seed, status=status, config=config_echo,
                    embeddings=np.array(embeds) if embeds is not None else None)


def run_averaged_oracle(
    source,
    init: np.ndarray,
    mu: float,
    slots: int,
    sampler: SamplerConfig | None = None,
    *,
    mode: str = "empirical",
    averaging_samples: int = 100,
    expected_deltas: np.ndarray | None = None,
    cluster_size: int | None = None,
    step: StepConfig | None = None,
    noise_sigma: float = 0.0,
    eval_pairs: int = 100_000,
    record_embeddings: bool = False,
    seed: int | None = None,
    config_echo: dict | None = None,
) -> RunTrace:
    """Deterministic companion recursion driven by expected update directions.

    ``empirical`` mode estimates the expected one-step map at the current
    configuration by averaging the incremental update over
    ``averaging_samples`` fresh measurement draws (sampled exactly like
    ``run_stochastic`` would). ``closed_form`` mode requires
    ``expected_deltas`` (an N x N matrix of mean dissimilarities) and a
    cluster size that divides N, and applies the i.i.d.-weight expected
    update matrix directly; its recorded mean stress is non-increasing.

    The caller supplies an origin-centered ``init``; the recursion preserves
    the center.
    """
    step = step or StepConfig()
    if mode not in ("empirical", "closed_form"):
        raise ValueError(f"unknown mode {mode!r}")
    X = np.array(init, dtype=np.float64, copy=True)
    n = X.shape[0]

    if mode == "closed_form":
        if expected_deltas is None:
            raise ValueError("closed_form mode requires expected_deltas")
        p = cluster_size if cluster_size is not None else (
            sampler.p if sampler is not None else None)
        if p is None:
            raise ValueError("closed_form mode requires a cluster size")
        ups = upsilon(n, p)

        class _MeanProvider:
            node_count = n

            @staticmethod
            def pairs(m, nn):
                return expected_deltas[m, nn]

        eval_seed = seed if seed is not None else 0
        evaluator = _EvalSet(_MeanProvider, eval_seed, eval_pairs)
    else:
        if sampler is None:
            raise ValueError("empirical mode requires a sampler")
        if seed is None:
            seed = sampler.seed
        evaluator = _EvalSet(source, seed, eval_pairs)

    s0, sn0 = evaluator.stress(X)
    records = [_record(0, s0, sn0, 0.0, 0.0, 0)]
    embeds = [X.copy()] if record_embeddings else None

    for t in range(1, slots + 1):
        t0 = time.perf_counter()
        if mode == "closed_form":
            B = closed_form_b_average(X, expected_deltas, step.eps_x, p)
            X = averaged_step(X, B, mu, ups)
            pairs = 0
        else:
            cfg = replace(step, mu=mu)
            acc = np.zeros_like(X)
            pairs = 0
            for s_ix in range(averaging_samples):
                draw_rng = substream(seed, "oracle", t, s_ix)
                partition = partition_nodes(n, sampler.p, draw_rng, slot=t)
                batch = _slot_batch(source, partition, sampler, draw_rng, t,
                                    noise_sigma, step.eps_w)
                acc += stochastic_step(X, batch, cfg, partition)
                pairs += len(batch)
            X = acc / averaging_samples
        s, sn = evaluator.stress(X)
        wall = (time.perf_counter() - t0) * 1e3
        records.append(_record(t, s, sn, mu, wall, pairs))
        if record_embeddings:
            embeds.append(X.copy())

    return RunTrace(records, X, seed if seed is not None else 0,
                    config=config_echo,
                    embeddings=np.array(embeds) if embeds is not None else None)


def hovering_deviation(embeds_a: np.ndarray, embeds_b: np.ndarray,
                       horizon: int) -> float:
    """Largest Frobenius deviation between two embedding sequences over
    slots 1..horizon. Both sequences must share shape and initial slot."""
    a = np.asarray(embeds_a)
    b = np.asarray(embeds_b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ValueError("trajectories have mismatched shapes")
    if not np.array_equal(a[0], b[0]):
        raise ValueError("trajectories do not share the initial configuration")
    if horizon < 1 or horizon > min(len(a), len(b)) - 1:
        raise ValueError("horizon exceeds trajectory length")
    devs = np.linalg.norm(
        (a[1:horizon + 1] - b[1:horizon + 1]).reshape(horizon, -1), axis=1)
    return float(devs.max())


def steady_state_stats(trace, window) -> tuple:
    """(min, mean, max) of stress over records with t inside ``window``.

    ``window`` is an inclusive (lo, hi) range of slot indices. ``trace`` may
    be a RunTrace or a list of record dicts.
    """
    records = trace.records if hasattr(trace, "records") else trace
    lo, hi = int(window[0]), int(window[1])
    vals = [r["stress"] for r in records if lo <= r["t"] <= hi]
    if not vals:
        raise ValueError(f"window [{lo}, {hi}] selects no trace records")
    arr = np.array(vals)
    return float(arr.min()), float(arr.mean()), float(arr.max())
