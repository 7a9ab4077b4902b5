"""Source/target distributions for the 2D transport benchmarks.

All samplers take an explicit ``numpy.random.Generator`` (or an integer
seed) and are pure: equal ``(spec, n, seed)`` gives bit-identical output.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DegenerateDataError

KINDS = (
    "circular_mog",
    "gaussians_k",
    "moons",
    "annulus_uniform",
    "circle_uniform",
    "point_mass",
    "isotropic_gaussian",
)

_DEFAULTS = {
    "circular_mog": {"n_components": 16, "radius": 4.0, "std": 0.2, "phase": 0.0},
    "gaussians_k": {"n_components": 8, "radius": 8.0, "std": 0.5, "phase": 0.0, "centers": None},
    # Centred unit construction: the standard moons are shifted by -(0.5, 0.25).
    "moons": {"noise_std": 0.1, "scale": 1.0, "offset": [-0.5, -0.25]},
    "annulus_uniform": {"r_inner": 3.0, "r_outer": 5.0},
    "circle_uniform": {"radius": 1.0, "dim": 2},
    "point_mass": {"location": [0.0, 0.0]},
    "isotropic_gaussian": {"std": 1.0, "mean": None, "dim": 2},
}


@dataclass(frozen=True)
class Distribution2DSpec:
    """A named distribution plus its parameters.

    Missing parameters take the defaults in ``_DEFAULTS``; unknown ones are
    rejected.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged = {**_DEFAULTS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        self.validate()

    def validate(self):
        p = self.params
        if self.kind in ("circular_mog", "gaussians_k"):
            if int(p["n_components"]) < 1:
                raise ConfigError("component count must be >= 1")
            if not p["std"] > 0:
                raise ConfigError("component std must be > 0")
            if p.get("centers") is None and not p["radius"] > 0:
                raise ConfigError("radius must be > 0")
            if p.get("centers") is not None:
                c = np.asarray(p["centers"], dtype=float)
                if c.ndim != 2 or c.shape[0] != int(p["n_components"]):
                    raise ConfigError("centers must be an (n_components, d) array")
        elif self.kind == "moons":
            if p["noise_std"] < 0 or not p["scale"] > 0:
                raise ConfigError("moons need noise_std >= 0 and scale > 0")
        elif self.kind == "annulus_uniform":
            if not 0 <= p["r_inner"] < p["r_outer"]:
                raise ConfigError("annulus needs 0 <= r_inner < r_outer")
        elif self.kind == "circle_uniform":
            if not p["radius"] > 0 or int(p["dim"]) < 2:
                raise ConfigError("circle needs radius > 0 and dim >= 2")
        elif self.kind == "isotropic_gaussian":
            if not p["std"] > 0:
                raise ConfigError("std must be > 0")
        if not np.all(np.isfinite(np.asarray(_flat_numbers(p), dtype=float))):
            raise ConfigError(f"{self.kind}: non-finite parameter")

    @property
    def dim(self):
        p = self.params
        if self.kind == "point_mass":
            return len(p["location"])
        if self.kind == "circle_uniform":
            return int(p["dim"])
        if self.kind == "isotropic_gaussian":
            return len(p["mean"]) if p["mean"] is not None else int(p["dim"])
        if self.kind == "gaussians_k" and p["centers"] is not None:
            return np.asarray(p["centers"]).shape[1]
        return 2

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], dict(d.get("params", {})))


def _flat_numbers(params):
    out = []
    for v in params.values():
        if v is None:
            continue
        out.extend(np.ravel(np.asarray(v, dtype=float)).tolist())
    return out


@dataclass
class SampleBatch:
    """An ``(n, d)`` array of points with the seed of the stream it came from."""

    points: np.ndarray
    seed_tag: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ContractError(f"sample batch must be (n >= 1, d >= 1); got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("sample batch contains non-finite coordinates")
        self.points = pts

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __len__(self):
        return self.n


def as_points(batch):
    """Coerce a SampleBatch or array-like to a float64 ``(n, d)`` array."""
    if isinstance(batch, SampleBatch):
        return batch.points
    pts = np.asarray(batch, dtype=np.float64)
    return pts[:, None] if pts.ndim == 1 else pts


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), int(rng)


def circle_centers(n_components, radius, phase=0.0):
    angles = phase + 2.0 * np.pi * np.arange(n_components) / n_components
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def mixture_centers(spec):
    p = spec.params
    if p.get("centers") is not None:
        return np.asarray(p["centers"], dtype=float)
    return circle_centers(int(p["n_components"]), p["radius"], p.get("phase", 0.0))


def sample_with_labels(spec, n, rng):
    """Mixture draw that also returns the component label of every point."""
    if spec.kind not in ("circular_mog", "gaussians_k"):
        raise ConfigError(f"{spec.kind} is not a mixture")
    rng, _ = _rng(rng)
    centers = mixture_centers(spec)
    labels = rng.integers(len(centers), size=n)
    pts = centers[labels] + spec.params["std"] * rng.standard_normal((n, centers.shape[1]))
    return pts, labels


def two_moons(n, noise_std, rng):
    """i.i.d. draws from the standard interleaved half circles.

    Upper moon: ``(cos a, sin a)``; lower moon: ``(1 - cos a, 0.5 - sin a)``
    for ``a ~ U(0, pi)``, plus isotropic Gaussian noise.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    rng, seed = _rng(rng)
    lower = rng.integers(2, size=n).astype(bool)
    a = rng.uniform(0.0, np.pi, size=n)
    x = np.where(lower, 1.0 - np.cos(a), np.cos(a))
    y = np.where(lower, 0.5 - np.sin(a), np.sin(a))
    pts = np.stack([x, y], axis=1) + noise_std * rng.standard_normal((n, 2))
    return SampleBatch(pts, seed)


def sample(spec, n, rng):
    """Draw ``n`` i.i.d. points from ``spec``."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rng, seed = _rng(rng)
    p = spec.params
    kind = spec.kind
    if kind in ("circular_mog", "gaussians_k"):
        pts, _ = sample_with_labels(spec, n, rng)
    elif kind == "moons":
        pts = two_moons(n, p["noise_std"], rng).points * p["scale"] + np.asarray(p["offset"])
    elif kind == "annulus_uniform":
        r2 = rng.uniform(p["r_inner"] ** 2, p["r_outer"] ** 2, size=n)
        a = rng.uniform(0.0, 2.0 * np.pi, size=n)
        pts = np.sqrt(r2)[:, None] * np.stack([np.cos(a), np.sin(a)], axis=1)
    elif kind == "circle_uniform":
        dim = int(p["dim"])
        if dim == 2:
            a = rng.uniform(0.0, 2.0 * np.pi, size=n)
            pts = p["radius"] * np.stack([np.cos(a), np.sin(a)], axis=1)
        else:
            g = rng.standard_normal((n, dim))
            pts = p["radius"] * g / np.linalg.norm(g, axis=1, keepdims=True)
    elif kind == "point_mass":
        pts = np.tile(np.asarray(p["location"], dtype=float), (n, 1))
    else:  # isotropic_gaussian
        dim = spec.dim
        mean = np.zeros(dim) if p["mean"] is None else np.asarray(p["mean"], dtype=float)
        pts = mean + p["std"] * rng.standard_normal((n, dim))
    return SampleBatch(pts, seed)


def sampler(spec):
    """Bind ``spec`` into a ``(n, rng) -> ndarray`` callable.

    Draws are identical to :func:`sample`; mixture centres are precomputed.
    """
    if spec.kind in ("circular_mog", "gaussians_k"):
        centers = mixture_centers(spec)
        std = spec.params["std"]

        def draw(n, rng):
            rng, _ = _rng(rng)
            labels = rng.integers(len(centers), size=n)
            return centers[labels] + std * rng.standard_normal((n, centers.shape[1]))

        return draw

    def draw(n, rng):
        return sample(spec, n, rng).points

    return draw


def standardize(batch):
    """Centre and scale each coordinate with the population (1/n) std.

    Returns ``(standardized, mean, std)``; invert with :func:`unstandardize`.
    """
    pts = as_points(batch)
    if pts.shape[0] < 2:
        raise ContractError("standardize needs n >= 2")
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    if np.any(std <= 0):
        raise DegenerateDataError(f"zero-variance coordinate(s): {np.flatnonzero(std <= 0).tolist()}")
    return SampleBatch((pts - mean) / std), mean, std


def unstandardize(batch, mean, std):
    return SampleBatch(as_points(batch) * std + mean)


# Benchmark instantiations. All constants are defaults that can be
# overridden from config.
def circular_mog_source():
    """64 narrow components on a radius-0.6 ring, close to a uniform annulus."""
    return Distribution2DSpec("circular_mog", {"n_components": 64, "radius": 0.6, "std": 0.03})


def five_gaussians_target():
    return Distribution2DSpec("circular_mog", {"n_components": 5, "radius": 0.6, "std": 0.045})


def eight_gaussians_source():
    """Eight components on a radius-5 circle with covariance sqrt(0.1) I."""
    return Distribution2DSpec("gaussians_k", {"n_components": 8, "radius": 5.0, "std": 0.1 ** 0.25})


def moons_target():
    """Moons with noise 0.2, scaled by 3 and shifted by (-1, -1)."""
    return Distribution2DSpec("moons", {"noise_std": 0.2, "scale": 3.0, "offset": [-1.0, -1.0]})
