"""Conditional flow matching training loop along the linear interpolation path."""

import csv
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import coupling, seeding, toydata
from .coupling import CostSpec
from .errors import ConfigError, NumericalError, TrainingAborted
from .fieldnet import AdamState, VectorFieldNet, adam_step, load_checkpoint, save_checkpoint
from .toydata import Distribution2DSpec

STRATEGIES = ("icfm", "wcfm", "otcfm_exact", "otcfm_sinkhorn")


@dataclass
class TrainConfig:
    strategy: str = "icfm"
    cost: CostSpec = field(default_factory=CostSpec)
    batch_size: int = 48
    iterations: int = 60_000
    lr: float = 1e-3
    seed: int = 0
    source: Distribution2DSpec = field(default_factory=toydata.circular_mog_source)
    target: Distribution2DSpec = field(default_factory=toydata.five_gaussians_target)
    checkpoint_every: int = 0
    hidden_dims: tuple = (64, 64)
    log_every: int = 100
    normalize_weights: bool = False
    sinkhorn_pairs: str = "sample"
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iters: int = 10_000
    zero_final: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.strategy in ("wcfm", "otcfm_sinkhorn") and self.cost.epsilon is None:
            raise ConfigError(f"strategy {self.strategy} requires epsilon")
        if self.source.dim != self.target.dim:
            raise ConfigError("source and target dimensions differ")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("checkpoint_every must be >= 0 and log_every >= 1")

    def to_dict(self):
        d = asdict(self)
        d["cost"] = {"kind": self.cost.kind, "epsilon": self.cost.epsilon}
        d["source"] = self.source.to_dict()
        d["target"] = self.target.to_dict()
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("cost"), dict):
            d["cost"] = CostSpec(**d["cost"])
        for side in ("source", "target"):
            if isinstance(d.get(side), dict):
                d[side] = Distribution2DSpec.from_dict(d[side])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, mean loss over window, wallclock_ms)
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self):
        return np.array([r[1] for r in self.rows])

    def to_csv(self, path, deterministic=True):
        """``step,loss,wallclock_ms``; timings are written as 0 in deterministic mode."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "wallclock_ms"])
            for step, loss, ms in self.rows:
                w.writerow([step, repr(float(loss)), 0 if deterministic else round(ms, 3)])
        return path


def interpolate(x, y, t):
    """Linear path: ``x_t = (1 - t) x + t y`` with conditional velocity ``y - x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = t[..., None] if (t.ndim and x.ndim > 1) else t
    d = y - x
    # x + t d is exact at t = 0 and for x = y; pin t = 1 to y.
    return np.where(tt == 1.0, y, x + tt * d), d


def make_pairs(config, xs, ys, rng):
    s = config.strategy
    if s == "icfm":
        return coupling.pair_independent(xs, ys, rng)
    if s == "wcfm":
        return coupling.pair_gibbs(xs, ys, config.cost, rng)
    if s == "otcfm_exact":
        return coupling.pair_minibatch_ot(xs, ys, "exact", config.cost, rng)
    return coupling.pair_minibatch_ot(xs, ys, "sinkhorn", config.cost, rng,
                                      sinkhorn_pairs=config.sinkhorn_pairs,
                                      tol=config.sinkhorn_tol,
                                      max_iters=config.sinkhorn_max_iters)


def _save(path, net, adam, config, step, data_rng, pair_rng):
    return save_checkpoint(
        path, net, adam, rng_seed=config.seed, training_config=config.to_dict(), step=step,
        rng_state={"data": data_rng.bit_generator.state, "pairing": pair_rng.bit_generator.state})


def train(config, checkpoint_dir=None, resume=None, callback=None):
    """Run the training loop; returns ``(net, log)``.

    ``resume`` is a checkpoint path written by a previous call with the same
    config; continuing from it is bit-identical to an uninterrupted run.
    Raises :class:`TrainingAborted` on a non-finite loss.
    """
    source_draw = toydata.sampler(config.source)
    target_draw = toydata.sampler(config.target)
    data_rng = seeding.stream(config.seed, "data")
    pair_rng = seeding.stream(config.seed, "pairing")
    if resume is not None:
        doc = load_checkpoint(resume)
        net, adam, start = doc["net"], doc["adam"], int(doc["step"])
        data_rng.bit_generator.state = doc["rng_state"]["data"]
        pair_rng.bit_generator.state = doc["rng_state"]["pairing"]
        last_ckpt = str(resume)
    else:
        net = VectorFieldNet.init(config.source.dim, config.hidden_dims,
                                  seeding.stream(config.seed, "init"), config.zero_final)
        adam = AdamState(net.n_params, lr=config.lr)
        start = 0
        last_ckpt = None
    log = TrainingLog()
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    t0 = time.perf_counter()
    window = 0.0
    count = 0
    for step in range(start, config.iterations):
        xs = source_draw(config.batch_size, data_rng)
        ys = target_draw(config.batch_size, data_rng)
        pairs = make_pairs(config, xs, ys, pair_rng)
        xt, target = interpolate(pairs.x, pairs.y, pairs.t)
        w = pairs.w
        if config.normalize_weights:
            w = w / w.mean()
        try:
            loss, grad = net.loss_and_grad(pairs.t, xt, target, w)
        except NumericalError as exc:
            raise TrainingAborted(f"non-finite loss at step {step}: {exc}", step, last_ckpt) from exc
        adam_step(net, grad, adam)
        window += loss
        count += 1
        done = step + 1
        if done % config.log_every == 0 or done == config.iterations:
            log.rows.append((done, window / count, 1e3 * (time.perf_counter() - t0)))
            window, count = 0.0, 0
            if callback is not None:
                callback(done, log.rows[-1][1])
        if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            last_ckpt = _save(os.path.join(checkpoint_dir, f"ckpt_{done:07d}.json"),
                              net, adam, config, done, data_rng, pair_rng)
            log.checkpoints.append(last_ckpt)
    return net, log


def batch_eot_cfm_loss(net, xs, ys, ts, cost, tol=1e-6, max_iters=10_000):
    """Full double sum of the CFM residual under the batch entropic OT plan.

    ``sum_ij pi_ij ||v(t_i, (1 - t_i) x_i + t_i y_j) - (y_j - x_i)||^2`` with
    ``pi`` probability-normalised (row sums ``1/n``), i.e. the ``1/n``-scaled
    sum over the row-stochastic plan ``n * pi``. Diagnostic only.
    """
    xs, ys = toydata.as_points(xs), toydata.as_points(ys)
    n = xs.shape[0]
    plan = coupling.sinkhorn(xs, ys, cost, tol, max_iters).matrix
    ts = np.asarray(ts, dtype=np.float64)
    t_rep = np.repeat(ts, n)
    x_rep = np.repeat(xs, n, axis=0)
    y_rep = np.tile(ys, (n, 1))
    xt, target = interpolate(x_rep, y_rep, t_rep)
    resid = net(t_rep, xt) - target
    sq = np.sum(resid * resid, axis=1).reshape(n, n)
    return float(np.sum(plan * sq))


def last_checkpoint(directory):
    """Most recent ``ckpt_*.json`` in ``directory`` or None."""
    if not os.path.isdir(directory):
        return None
    names = sorted(f for f in os.listdir(directory) if f.startswith("ckpt_") and f.endswith(".json"))
    return os.path.join(directory, names[-1]) if names else None


__all__ = ["TrainConfig", "TrainingLog", "STRATEGIES", "interpolate", "make_pairs", "train",
           "batch_eot_cfm_loss", "last_checkpoint", "AdamState", "VectorFieldNet"]
