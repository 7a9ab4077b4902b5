"""Sample-quality metrics: empirical W2^2, normalised path energy, PRDC and KDE grids."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flow_ode, toydata
from .coupling import cost_matrix, linear_assignment
from .errors import ConfigError, ContractError, IllConditionedReferenceError

REFERENCE_GUARD = 1e-9


def _equalize(a, b, rng):
    """Subsample the larger cloud (without replacement) to the smaller size."""
    n = min(len(a), len(b))
    if n == 0:
        raise ContractError("empty sample")
    rng = np.random.default_rng(rng if rng is not None else 0) if not isinstance(
        rng, np.random.Generator) else rng
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    return a, b


def w2_squared_empirical(a, b, rng=None):
    """Squared 2-Wasserstein distance between two uniform point clouds.

    Solved exactly as an assignment problem on squared Euclidean costs; if
    sizes differ the larger set is subsampled with ``rng`` (seed 0 when
    omitted).
    """
    a, b = toydata.as_points(a), toydata.as_points(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("empty sample")
    if a.shape[1] != b.shape[1]:
        raise ContractError("dimension mismatch")
    a, b = _equalize(a, b, rng)
    _, total = linear_assignment(cost_matrix(a, b, "squared_euclidean"))
    return total / a.shape[0]


# --- normalised path energy --------------------------------------------------

def path_energy_mc(field_fn, source, n_mc, rng, solver="euler", steps=100, rtol=1e-5, atol=1e-5):
    """Mean and standard error of ``int |v|^2 dt`` over ``n_mc`` source draws.

    Returns ``(mean, stderr, endpoints)``; endpoints are the generated samples.
    """
    x0 = toydata.sampler(source)(n_mc, rng)
    traj = flow_ode.integrate(field_fn, x0, solver, steps, rtol, atol, record=False)
    e = np.atleast_1d(flow_ode.path_energy(traj))
    stderr = float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else 0.0
    return float(e.mean()), stderr, traj.endpoint


def reference_w2(source, target, rng, n_ref=2048, reps=3):
    """Averaged empirical W2^2 between fresh source and target draws."""
    draw_s, draw_t = toydata.sampler(source), toydata.sampler(target)
    vals = [w2_squared_empirical(draw_s(n_ref, rng), draw_t(n_ref, rng)) for _ in range(reps)]
    return float(np.mean(vals))


def npe_value(energy, reference, guard=True):
    """``|energy - reference| / reference``.

    Raises :class:`IllConditionedReferenceError` if the reference is below
    ``1e-9``. With ``guard=False`` a tiny reference is replaced by 1 so the
    degenerate same-point task reports the absolute deviation.
    """
    if reference < REFERENCE_GUARD:
        if guard:
            raise IllConditionedReferenceError(
                f"reference W2^2 = {reference:.3e} is below {REFERENCE_GUARD}")
        return abs(energy - reference)
    return abs(energy - reference) / reference


def npe(field_fn, source, target, n_mc=2048, solver="euler", steps=100, rtol=1e-5, atol=1e-5,
        rng=None, reference=None, n_ref=2048, ref_reps=3, guard=True):
    """Normalised path energy of the flow of ``field_fn`` from ``source``.

    ``reference`` (W2^2 between source and target) is estimated with
    :func:`reference_w2` when not given.
    """
    if n_mc < 100:
        raise ConfigError("n_mc must be >= 100")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    energy, _, _ = path_energy_mc(field_fn, source, n_mc, rng, solver, steps, rtol, atol)
    if reference is None:
        reference = reference_w2(source, target, rng, n_ref, ref_reps)
    return npe_value(energy, reference, guard)


# --- PRDC ---------------------------------------------------------------------

def _pairwise(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def knn_radii(points, k):
    """Distance from each point to its k-th nearest other point."""
    d = _pairwise(points, points)
    return np.sort(d, axis=1)[:, k]


def prdc(real, fake, k=5):
    """Precision, recall, density and coverage on k-NN balls.

    Balls are closed, so a zero radius (duplicated points) still contains
    exact matches. Returns a dict with the four values.
    """
    real, fake = toydata.as_points(real), toydata.as_points(fake)
    if k < 1 or k >= min(len(real), len(fake)):
        raise ContractError("need 1 <= k < min(n_real, n_fake)")
    r_real = knn_radii(real, k)
    r_fake = knn_radii(fake, k)
    d = _pairwise(real, fake)  # (n_real, n_fake)
    inside = d <= r_real[:, None]
    return {
        "precision": float(inside.any(axis=0).mean()),
        "recall": float((d <= r_fake[None, :]).any(axis=1).mean()),
        "density": float(inside.sum() / (k * len(fake))),
        "coverage": float((d.min(axis=1) <= r_real).mean()),
    }


def f1_score(precision, recall):
    if precision <= 0 or recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# --- KDE ----------------------------------------------------------------------

@dataclass
class KDEGrid:
    """Gaussian KDE values at the centres of a regular 2D grid; ``density[ix, iy]``."""

    x: np.ndarray
    y: np.ndarray
    density: np.ndarray
    bandwidth: float

    @property
    def cell_area(self):
        return float((self.x[1] - self.x[0]) * (self.y[1] - self.y[0]))

    def mass(self):
        return float(self.density.sum() * self.cell_area)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("x,y,density\n")
            for i, xv in enumerate(self.x):
                for j, yv in enumerate(self.y):
                    fh.write(f"{xv!r},{yv!r},{float(self.density[i, j])!r}\n")
        return path


def kde_grid(batch, bandwidth, bounds=((-6.0, 6.0), (-6.0, 6.0)), resolution=(100, 100)):
    """Isotropic Gaussian KDE evaluated at grid-cell centres.

    Values are the true density, not renormalised, so the grid mass is the
    KDE mass inside ``bounds`` (close to 1 when the bounds enclose the data).
    """
    pts = toydata.as_points(batch)
    if pts.shape[0] == 0:
        raise ContractError("empty batch")
    if pts.shape[1] != 2:
        raise ContractError("kde_grid is two-dimensional")
    if not bandwidth > 0:
        raise ConfigError("bandwidth must be > 0")
    (x0, x1), (y0, y1) = bounds
    nx, ny = resolution
    if not (x1 > x0 and y1 > y0 and nx >= 2 and ny >= 2):
        raise ConfigError("grid bounds must be increasing with resolution >= 2")
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    h2 = bandwidth * bandwidth
    # Separable kernel: sum_p kx[p, i] * ky[p, j].
    kx = np.exp(-0.5 * (xs[None, :] - pts[:, :1]) ** 2 / h2)
    ky = np.exp(-0.5 * (ys[None, :] - pts[:, 1:]) ** 2 / h2)
    dens = kx.T @ ky / (len(pts) * 2.0 * np.pi * h2)
    return KDEGrid(xs, ys, dens, float(bandwidth))


# --- report -------------------------------------------------------------------

@dataclass
class MetricsReport:
    w2_squared: float
    npe: float | None
    precision: float
    recall: float
    density: float
    coverage: float
    n_generated: int
    n_real: int
    k: int = 5
    config: dict = field(default_factory=dict)

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)

    def to_dict(self):
        d = asdict(self)
        d["prdc"] = {name: d.pop(name) for name in ("precision", "recall", "density", "coverage")}
        d["prdc"]["f1"] = self.f1
        return d

    def to_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def evaluate(real, fake, k=5, npe_value=None, rng=None, config=None):
    """W2^2 and PRDC between two clouds, bundled with an optional NPE."""
    real, fake = toydata.as_points(real), toydata.as_points(fake)
    scores = prdc(real, fake, k)
    return MetricsReport(w2_squared_empirical(real, fake, rng), npe_value, n_generated=len(fake),
                         n_real=len(real), k=k, config=dict(config or {}), **scores)
