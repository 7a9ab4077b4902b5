"""Turning two independent batches into weighted training pairs.

Four strategies share one output type, :class:`WeightedPairBatch`:

* independent pairing, all weights 1 (I-CFM);
* independent pairing weighted by the Gibbs kernel ``exp(-c(x, y)/eps)`` (W-CFM);
* exact minibatch OT via a minimum-cost assignment (OT-CFM);
* entropic minibatch OT via log-domain Sinkhorn (OT-CFM, Sinkhorn mode).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import ConfigError, ContractError, ConvergenceError, NumericalError
from .toydata import as_points

COST_KINDS = ("euclidean", "squared_euclidean")
MAX_ASSIGNMENT_SIZE = 4096


@dataclass(frozen=True)
class CostSpec:
    kind: str = "euclidean"
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ConfigError(f"unknown cost {self.kind!r}; expected one of {COST_KINDS}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")

    def require_epsilon(self):
        if self.epsilon is None:
            raise ConfigError("this operation needs an epsilon")
        return self.epsilon


def pair_cost(x, y, kind="euclidean"):
    """Row-wise cost between matched rows of ``x`` and ``y``."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    sq = np.sum(diff * diff, axis=-1)
    return np.sqrt(sq) if kind == "euclidean" else sq


def cost_matrix(xs, ys, kind="euclidean"):
    """Dense ``(n, m)`` cost matrix ``c(xs[i], ys[j])``."""
    xs, ys = as_points(xs), as_points(ys)
    if xs.shape[1] != ys.shape[1]:
        raise ContractError("batches have different dimensions")
    diff = xs[:, None, :] - ys[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    return np.sqrt(sq) if kind == "euclidean" else sq


def gibbs_weight(x, y, cost):
    """``exp(-c(x, y) / eps)``; works row-wise on batches."""
    eps = cost.require_epsilon()
    return np.exp(-pair_cost(x, y, cost.kind) / eps)


@dataclass
class WeightedPairBatch:
    """Training tuples ``(t_i, x_i, y_i, w_i)``; ``src``/``dst`` index the input batches."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    src: np.ndarray | None = None
    dst: np.ndarray | None = None
    normalization: str = "per-pair-raw"

    def __len__(self):
        return len(self.t)


@dataclass
class CouplingPlan:
    """A discrete coupling, dense or as an ``(i, j, weight)`` pair list."""

    matrix: np.ndarray | None = None
    pairs: list | None = None
    normalization: str = "probability"
    stats: dict = field(default_factory=dict)

    def to_pairs(self, threshold=0.0):
        if self.pairs is not None:
            return list(self.pairs)
        idx = np.argwhere(self.matrix > threshold)
        return [(int(i), int(j), float(self.matrix[i, j])) for i, j in idx]

    def to_csv(self, path, threshold=0.0):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "j", "weight"])
            for i, j, w in self.to_pairs(threshold):
                writer.writerow([i, j, repr(w)])
        return path


def _check_pair(xs, ys):
    xs, ys = as_points(xs), as_points(ys)
    if xs.shape != ys.shape:
        raise ContractError(f"batch shapes differ: {xs.shape} vs {ys.shape}")
    return xs, ys


def pair_independent(xs, ys, rng):
    """Pair ``xs[i]`` with ``ys[i]``; unit weights, fresh ``t ~ U(0, 1)`` per pair."""
    xs, ys = _check_pair(xs, ys)
    t = rng.random(xs.shape[0])
    return WeightedPairBatch(t, xs, ys, np.ones(xs.shape[0]))


def pair_gibbs(xs, ys, cost, rng):
    """Independent pairing with Gibbs-kernel weights; no resampling."""
    xs, ys = _check_pair(xs, ys)
    cost.require_epsilon()
    t = rng.random(xs.shape[0])
    return WeightedPairBatch(t, xs, ys, gibbs_weight(xs, ys, cost))


# --- exact assignment -------------------------------------------------------

def linear_assignment(cost):
    """Exact minimum-cost permutation for a square cost matrix.

    Among optimal permutations the lexicographically smallest ``sigma`` is
    returned. Returns ``(sigma, total_cost)``.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ContractError("assignment needs a square cost matrix")
    if n > MAX_ASSIGNMENT_SIZE:
        raise ContractError(f"assignment size {n} exceeds {MAX_ASSIGNMENT_SIZE}")
    if not np.all(np.isfinite(cost)):
        raise NumericalError("cost matrix has non-finite entries")
    sigma, u, v = _backend.kernels().lap_solve(cost)
    sigma = np.asarray(sigma, dtype=np.intp)
    # Optimal permutations are exactly the perfect matchings on zero-reduced-cost
    # edges; the tolerance absorbs rounding in the accumulated potentials.
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    # A smaller optimal sigma needs some row with a tight column left of its match.
    if np.any(tight & (np.arange(n)[None, :] < sigma[:, None])):
        sigma = np.asarray(_backend.kernels().lex_min_matching(tight.view(np.uint8), sigma),
                           dtype=np.intp)
    total = float(cost[np.arange(n), sigma].sum())
    return sigma, total


def solve_assignment(xs, ys, cost):
    """Monge permutation between two equal-size batches under ``cost.kind``."""
    xs, ys = _check_pair(xs, ys)
    return linear_assignment(cost_matrix(xs, ys, cost.kind))


# --- Sinkhorn ---------------------------------------------------------------

def _logsumexp(a, axis):
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def sinkhorn_from_cost(cost, epsilon, tol=1e-6, max_iters=10_000):
    """Log-domain Sinkhorn for uniform marginals on a given cost matrix.

    Convergence is the L1 row-marginal violation after each column update
    (columns are then exact). Returns a probability-normalised
    :class:`CouplingPlan` whose ``stats`` hold ``iterations`` and
    ``violation``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    scaled = -cost / epsilon
    f = np.zeros(n)
    g = np.zeros(m)
    violation = np.inf
    for it in range(1, max_iters + 1):
        f = -_logsumexp(scaled + g[None, :] + log_b[None, :], axis=1)
        g = -_logsumexp(scaled + f[:, None] + log_a[:, None], axis=0)
        log_plan = scaled + f[:, None] + g[None, :] + log_a[:, None] + log_b[None, :]
        plan = np.exp(log_plan)
        violation = float(np.abs(plan.sum(axis=1) - 1.0 / n).sum())
        if violation <= tol:
            return CouplingPlan(plan, normalization="probability",
                                stats={"iterations": it, "violation": violation,
                                       "potentials": (epsilon * f, epsilon * g)})
    raise ConvergenceError(
        f"Sinkhorn did not reach tol={tol} in {max_iters} iterations (violation {violation:.3e})",
        violation=violation, iterations=max_iters)


def sinkhorn(xs, ys, cost, tol=1e-6, max_iters=10_000):
    """Entropic OT plan between the uniform empirical measures on ``xs`` and ``ys``."""
    xs, ys = as_points(xs), as_points(ys)
    return sinkhorn_from_cost(cost_matrix(xs, ys, cost.kind), cost.require_epsilon(), tol, max_iters)


def pair_minibatch_ot(xs, ys, mode, cost, rng, sinkhorn_pairs="sample", tol=1e-6, max_iters=10_000):
    """OT-CFM pairing.

    ``mode="exact"`` pairs ``x_i`` with ``y_sigma(i)`` (unit weights).
    ``mode="sinkhorn"`` with ``sinkhorn_pairs="sample"`` draws ``n`` index
    pairs from the plan; ``"dense"`` returns all ``n^2`` pairs weighted by
    ``n^2 * plan`` so the batch mean equals the plan expectation, with one
    ``t`` per source row.
    """
    xs, ys = _check_pair(xs, ys)
    n = xs.shape[0]
    if mode == "exact":
        sigma, _ = solve_assignment(xs, ys, cost)
        t = rng.random(n)
        return WeightedPairBatch(t, xs, ys[sigma], np.ones(n), np.arange(n), sigma)
    if mode != "sinkhorn":
        raise ConfigError(f"unknown OT mode {mode!r}")
    plan = sinkhorn(xs, ys, cost, tol, max_iters).matrix
    if sinkhorn_pairs == "sample":
        p = plan.ravel() / plan.sum()
        flat = rng.choice(n * n, size=n, p=p)
        src, dst = np.divmod(flat, n)
        t = rng.random(n)
        return WeightedPairBatch(t, xs[src], ys[dst], np.ones(n), src, dst)
    if sinkhorn_pairs != "dense":
        raise ConfigError(f"unknown sinkhorn pairing {sinkhorn_pairs!r}")
    src, dst = np.divmod(np.arange(n * n), n)
    t = np.repeat(rng.random(n), n)
    return WeightedPairBatch(t, xs[src], ys[dst], (n * n) * plan.ravel(), src, dst,
                             normalization="probability")
