"""Choosing epsilon and checking the weighted objective numerically.

The Gibbs weight ``exp(-c(x, y)/eps)`` tilts the marginals by the factors

    f(x) ∝ E_{Y~nu}[exp(-c(x, Y)/eps)],    g(y) ∝ E_{X~mu}[exp(-c(X, y)/eps)].

Near-constant ``f`` and ``g`` mean little tilt. Their relative variance
``Var/Mean^2`` over the marginal drives the epsilon scan; the other helpers
check the large-batch limit and the flow's pushforward.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import coupling, flow_ode, toydata
from .coupling import CostSpec, cost_matrix, pair_cost
from .errors import ConfigError, ContractError, UnderflowError
from .metrics import w2_squared_empirical
from .toydata import Distribution2DSpec
from .trainer import batch_eot_cfm_loss, interpolate

UNDERFLOW = 1e-300


def _draw_fn(dist):
    if isinstance(dist, Distribution2DSpec):
        return toydata.sampler(dist)
    if callable(dist):
        return dist
    raise ContractError("expected a Distribution2DSpec or a (n, rng) -> array sampler")


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def relative_variance(values):
    """Population ``Var(v) / Mean(v)^2``; scale invariant, 0 for constant values."""
    v = np.asarray(values, dtype=np.float64)
    m = v.mean()
    if m == 0:
        return 0.0 if np.all(v == 0) else math.inf
    return float(np.mean((v / m - 1.0) ** 2))


@dataclass
class TiltDensityEstimate:
    side: str
    eval_points: np.ndarray
    values: np.ndarray
    n_mc: int
    epsilon: float
    rel_variance: float
    log_values: np.ndarray = field(repr=False, default=None)


def _log_kernel_means(points, others, cost_kind, epsilon, chunk=512):
    """``log mean_m exp(-c(z, s_m)/eps)`` per row of ``points``, chunked."""
    out = np.empty(len(points))
    log_n = math.log(len(others))
    for start in range(0, len(points), chunk):
        a = -cost_matrix(points[start:start + chunk], others, cost_kind) / epsilon
        amax = a.max(axis=1, keepdims=True)
        out[start:start + chunk] = (np.log(np.exp(a - amax).sum(axis=1)) + amax[:, 0]) - log_n
    return out


def estimate_tilt(side, eval_points, opposite, epsilon, n_mc=10_000, rng=None, cost_kind="euclidean"):
    """Monte Carlo tilt factor at each evaluation point.

    ``side`` is ``"source_f"`` (points from the source, ``opposite`` the
    target) or ``"target_g"``. One set of ``n_mc`` opposite samples is shared
    by all evaluation points. Relative variance is computed in log space, so
    it stays valid when the raw values are tiny; :class:`UnderflowError` is
    raised only if every value is below ``1e-300``.
    """
    if side not in ("source_f", "target_g"):
        raise ConfigError(f"side must be source_f or target_g, not {side!r}")
    if n_mc < 100:
        raise ConfigError("n_mc must be >= 100")
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    pts = toydata.as_points(eval_points)
    others = toydata.as_points(_draw_fn(opposite)(n_mc, _rng(rng)))
    logv = _log_kernel_means(pts, others, cost_kind, epsilon)
    if logv.max() < math.log(UNDERFLOW):
        raise UnderflowError(
            f"all tilt values underflow at epsilon={epsilon:g}; use a larger epsilon")
    rel = relative_variance(np.exp(logv - logv.max()))
    return TiltDensityEstimate(side, pts, np.exp(logv), n_mc, float(epsilon), rel, logv)


# --- epsilon selection ----------------------------------------------------------

def smooth3(curve):
    """Running median over a 3-point window (2 points at the ends)."""
    c = np.asarray(curve, dtype=np.float64)
    out = np.empty_like(c)
    for k in range(len(c)):
        out[k] = np.median(c[max(0, k - 1):k + 2])
    return out


def elbow_index(curve, rho=0.15, level=0.15, floor=1e-12):
    """Index where the smoothed curve has dropped and flattened; returns ``(index, found)``.

    With ``s`` the smoothed curve and ``m`` its peak: the first ``k`` with
    ``s[k] <= floor``, or with ``k >= 1``, ``s[k] <= level`` and
    ``s[k-1] - s[k] < rho * m``. ``level`` is absolute; relative variance
    is scale free, so one value serves every dataset. Without such a point
    the last index is returned with ``found=False``.
    """
    s = smooth3(curve)
    peak = float(s.max()) if len(s) else 0.0
    for k in range(len(s)):
        if s[k] <= floor:
            return k, True
        if k >= 1 and s[k] <= level and s[k - 1] - s[k] < rho * peak:
            return k, True
    return len(s) - 1, False


@dataclass
class EpsilonScan:
    kappa_grid: np.ndarray
    d: int
    rel_variance_f: np.ndarray
    rel_variance_g: np.ndarray
    selected_index: int
    warning: str | None = None
    rho: float = 0.15
    n_mc: int = 0

    @property
    def curve(self):
        return self.rel_variance_f + self.rel_variance_g

    @property
    def selected_kappa(self):
        return float(self.kappa_grid[self.selected_index])

    @property
    def selected_epsilon(self):
        return self.selected_kappa * math.sqrt(self.d)

    def to_dict(self):
        return {
            "kappa_grid": self.kappa_grid.tolist(),
            "d": self.d,
            "rel_variance_f": self.rel_variance_f.tolist(),
            "rel_variance_g": self.rel_variance_g.tolist(),
            "curve": self.curve.tolist(),
            "selected_kappa": self.selected_kappa,
            "selected_epsilon": self.selected_epsilon,
            "rho": self.rho,
            "n_mc": self.n_mc,
            "warning": self.warning,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        return path

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kappa", "epsilon", "rel_variance_f", "rel_variance_g", "sum"])
            for k, f, g in zip(self.kappa_grid, self.rel_variance_f, self.rel_variance_g):
                w.writerow([repr(float(k)), repr(float(k) * math.sqrt(self.d)),
                            repr(float(f)), repr(float(g)), repr(float(f + g))])
        return path


def default_kappa_grid(lo=1e-2, hi=1e1, num=16):
    return np.geomspace(lo, hi, num)


def select_epsilon(source, target, d=None, kappa_grid=None, n_mc=2048, n_eval=512, rng=None,
                   rho=0.15, level=0.15, cost_kind="euclidean"):
    """Scan ``eps = kappa * sqrt(d)`` and pick the elbow of ``relvar(f) + relvar(g)``.

    Evaluation points and Monte Carlo samples are drawn once and reused for
    every grid value, so the curve is smooth in ``kappa``.
    """
    grid = default_kappa_grid() if kappa_grid is None else np.asarray(kappa_grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 4:
        raise ConfigError("kappa grid needs at least 4 values")
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0:
        raise ConfigError("kappa grid must be positive and strictly increasing")
    rng = _rng(rng)
    draw_s, draw_t = _draw_fn(source), _draw_fn(target)
    xs_eval = toydata.as_points(draw_s(n_eval, rng))
    ys_eval = toydata.as_points(draw_t(n_eval, rng))
    xs_mc = toydata.as_points(draw_s(n_mc, rng))
    ys_mc = toydata.as_points(draw_t(n_mc, rng))
    if d is None:
        d = xs_eval.shape[1]
    rv_f, rv_g = [], []
    for kappa in grid:
        eps = kappa * math.sqrt(d)
        rv_f.append(relative_variance(_tilt_values(xs_eval, ys_mc, cost_kind, eps)))
        rv_g.append(relative_variance(_tilt_values(ys_eval, xs_mc, cost_kind, eps)))
    rv_f, rv_g = np.array(rv_f), np.array(rv_g)
    idx, found = elbow_index(rv_f + rv_g, rho, level)
    warning = None if found else "no elbow found; returning the largest kappa"
    return EpsilonScan(grid, int(d), rv_f, rv_g, idx, warning, rho, n_mc)


def _tilt_values(points, others, cost_kind, eps):
    logv = _log_kernel_means(points, others, cost_kind, eps)
    return np.exp(logv - logv.max())


# --- normalising constant ---------------------------------------------------------

def estimate_partition(source, target, cost, n_pairs=1_000_000, rng=None, chunk=65_536):
    """Streaming Monte Carlo for ``Z = E[exp(-c(X, Y)/eps)]`` over independent pairs.

    Returns ``(mean, standard_error)``.
    """
    eps = cost.require_epsilon()
    rng = _rng(rng)
    draw_s, draw_t = _draw_fn(source), _draw_fn(target)
    total = total_sq = 0.0
    done = 0
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        w = np.exp(-pair_cost(draw_s(m, rng), draw_t(m, rng), cost.kind) / eps)
        total += float(w.sum())
        total_sq += float((w * w).sum())
        done += m
    mean = total / done
    var = max(total_sq / done - mean * mean, 0.0) * done / max(done - 1, 1)
    return mean, math.sqrt(var / done)


def weighted_cfm_ratio(net, source, target, cost, n_pairs=1_000_000, rng=None, chunk=65_536):
    """Monte Carlo ``L_W / Z = E[w L] / E[w]`` for the network's CFM residual ``L``.

    Returns ``(value, standard_error)``; the error uses the delta method.
    """
    eps = cost.require_epsilon()
    rng = _rng(rng)
    draw_s, draw_t = _draw_fn(source), _draw_fn(target)
    s_w = s_wl = s_ww = s_wlwl = s_wwl = 0.0
    done = 0
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        x, y = draw_s(m, rng), draw_t(m, rng)
        t = rng.random(m)
        xt, target_v = interpolate(x, y, t)
        resid = net(t, xt) - target_v
        loss = np.sum(resid * resid, axis=1)
        w = np.exp(-pair_cost(x, y, cost.kind) / eps)
        wl = w * loss
        s_w += float(w.sum())
        s_wl += float(wl.sum())
        s_ww += float((w * w).sum())
        s_wlwl += float((wl * wl).sum())
        s_wwl += float((w * wl).sum())
        done += m
    mw, mwl = s_w / done, s_wl / done
    ratio = mwl / mw
    var_w = s_ww / done - mw * mw
    var_wl = s_wlwl / done - mwl * mwl
    cov = s_wwl / done - mw * mwl
    var_ratio = (var_wl - 2 * ratio * cov + ratio * ratio * var_w) / (mw * mw * done)
    return ratio, math.sqrt(max(var_ratio, 0.0))


# --- large-batch limit ------------------------------------------------------------

@dataclass
class Prop3Row:
    n: int
    mean_loss: float
    stderr: float
    ratio: float
    ratio_stderr: float
    exact_ratio: float | None = None


@dataclass
class ConvergenceTable:
    rows: list
    reference: float
    reference_stderr: float
    epsilon: float
    reps: int

    def deviations(self):
        return np.array([abs(r.ratio - 1.0) for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "mean_ratio", "stderr", "mean_loss", "exact_ratio"])
            for r in self.rows:
                w.writerow([r.n, repr(r.ratio), repr(r.ratio_stderr), repr(r.mean_loss),
                            "" if r.exact_ratio is None else repr(r.exact_ratio)])
        return path


def concentric_circles(r_source=1.0, r_target=2.0):
    return (Distribution2DSpec("circle_uniform", {"radius": r_source}),
            Distribution2DSpec("circle_uniform", {"radius": r_target}))


def _exact_plan_loss(net, xs, ys, ts, cost):
    sigma, _ = coupling.solve_assignment(xs, ys, cost)
    xt, target = interpolate(xs, ys[sigma], ts)
    resid = net(ts, xt) - target
    return float(np.mean(np.sum(resid * resid, axis=1)))


def verify_prop3(net, cost, batch_sizes=(8, 32, 128, 512), reps=32, rng=None, source=None,
                 target=None, n_pairs=1_000_000, with_exact=True, tol=1e-6, max_iters=10_000):
    """Mean batch entropic-OT loss against its large-sample limit, per batch size.

    The limit ``E[w L] / E[w]`` holds when neither marginal is tilted; the
    default concentric circles guarantee that by rotation symmetry. Each row
    reports ``ratio = mean batch loss / limit``; ``exact_ratio`` uses the
    exact assignment plan on the same batches instead.
    """
    if source is None or target is None:
        source, target = concentric_circles()
    rng = _rng(rng)
    reference, ref_se = weighted_cfm_ratio(net, source, target, cost, n_pairs, rng)
    draw_s, draw_t = _draw_fn(source), _draw_fn(target)
    rows = []
    for n in batch_sizes:
        losses, exact = [], []
        for _ in range(reps):
            xs, ys = draw_s(n, rng), draw_t(n, rng)
            ts = rng.random(n)
            losses.append(batch_eot_cfm_loss(net, xs, ys, ts, cost, tol, max_iters))
            if with_exact:
                exact.append(_exact_plan_loss(net, xs, ys, ts, cost))
        losses = np.array(losses)
        mean = float(losses.mean())
        se = float(losses.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        if reference > 0:
            ratio, ratio_se = mean / reference, se / reference
        else:
            ratio, ratio_se = math.nan, math.nan
        exact_ratio = float(np.mean(exact)) / reference if (with_exact and reference > 0) else None
        rows.append(Prop3Row(int(n), mean, se, ratio, ratio_se, exact_ratio))
    return ConvergenceTable(rows, reference, ref_se, cost.require_epsilon(), reps)


def is_converging(deviations, stderrs=None):
    """Non-increasing up to at most one inversion within two standard errors."""
    dev = np.asarray(deviations, dtype=np.float64)
    se = np.zeros_like(dev) if stderrs is None else np.asarray(stderrs, dtype=np.float64)
    inversions = 0
    for k in range(1, len(dev)):
        if dev[k] > dev[k - 1]:
            if dev[k] - dev[k - 1] > 2.0 * math.hypot(se[k], se[k - 1]):
                return False
            inversions += 1
    return inversions <= 1


# --- pushforward ------------------------------------------------------------------

def verify_pushforward(field_fn, source, target, n=2048, solver="euler", steps=100, rtol=1e-5,
                       atol=1e-5, rng=None):
    """Empirical W2^2 between the flow of ``n`` source samples and ``n`` target samples."""
    rng = _rng(rng)
    x0 = toydata.as_points(_draw_fn(source)(n, rng))
    traj = flow_ode.integrate(field_fn, x0, solver, steps, rtol, atol, record=False)
    return w2_squared_empirical(traj.endpoint, _draw_fn(target)(n, rng))


@dataclass
class DiagnosticsReport:
    scan: EpsilonScan | None = None
    tilt: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "scan": self.scan.to_dict() if self.scan is not None else None,
            "tilt": [{"side": t.side, "epsilon": t.epsilon, "n_mc": t.n_mc,
                      "rel_variance": t.rel_variance} for t in self.tilt],
            "notes": self.notes,
        }


__all__ = ["CostSpec", "TiltDensityEstimate", "EpsilonScan", "ConvergenceTable", "Prop3Row",
           "DiagnosticsReport", "relative_variance", "estimate_tilt", "smooth3", "elbow_index",
           "select_epsilon", "default_kappa_grid", "estimate_partition", "weighted_cfm_ratio",
           "verify_prop3", "is_converging", "concentric_circles", "verify_pushforward"]
