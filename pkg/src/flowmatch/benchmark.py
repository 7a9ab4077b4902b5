"""Multi-seed comparison of the training strategies on the 2D benchmarks.

Every (method, seed) run trains a fresh network, generates samples with
Euler, and scores them by empirical W2^2 against fresh target draws and
by normalised path energy. The reference W2^2 between source and target
is estimated once per benchmark and shared by all runs.
"""

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, seeding, toydata
from .coupling import CostSpec
from .errors import ConfigError, UnknownBenchmarkError
from .trainer import TrainConfig, train

REFERENCE_SEED = 20_250_101


@dataclass(frozen=True)
class Benchmark:
    name: str
    source: toydata.Distribution2DSpec
    target: toydata.Distribution2DSpec
    eps_small: float
    eps_large: float


BENCHMARKS = {
    "circular-mog": Benchmark("circular-mog", toydata.circular_mog_source(),
                              toydata.five_gaussians_target(), 0.2, 0.4),
    "moons": Benchmark("moons", toydata.eight_gaussians_source(), toydata.moons_target(), 2.0, 10.0),
}


@dataclass(frozen=True)
class Method:
    label: str
    strategy: str
    batch_size: int = 48
    epsilon: float | None = None
    iteration_factor: int = 1


def get_benchmark(name):
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise UnknownBenchmarkError(
            f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}") from None


def standard_methods(bench, small_batch_factor=3):
    """The five rows of the comparison table.

    The small-batch OT run gets ``small_batch_factor`` times the iterations.
    """
    return [
        Method("icfm", "icfm"),
        Method("otcfm", "otcfm_exact"),
        Method("otcfm_b16", "otcfm_exact", batch_size=16, iteration_factor=small_batch_factor),
        Method(f"wcfm_eps{bench.eps_small:g}", "wcfm", epsilon=bench.eps_small),
        Method(f"wcfm_eps{bench.eps_large:g}", "wcfm", epsilon=bench.eps_large),
    ]


def parse_methods(bench, names, eps_list=None):
    """Resolve method names; ``wcfm`` expands to one run per epsilon in ``eps_list``."""
    table = {m.label: m for m in standard_methods(bench)}
    table["wcfm_small"] = table[f"wcfm_eps{bench.eps_small:g}"]
    table["wcfm_large"] = table[f"wcfm_eps{bench.eps_large:g}"]
    out = []
    for name in names:
        if name == "wcfm":
            for eps in (eps_list or [bench.eps_small, bench.eps_large]):
                out.append(Method(f"wcfm_eps{eps:g}", "wcfm", epsilon=float(eps)))
        elif name in table:
            out.append(table[name])
        else:
            raise ConfigError(f"unknown method {name!r}; expected wcfm or one of {sorted(table)}")
    return out


@dataclass
class EvalConfig:
    n_gen: int = 2048
    steps: int = 100
    n_ref: int = 2048
    ref_reps: int = 3


@dataclass
class RunResult:
    method: str
    seed: int
    w2: float
    npe: float
    energy: float
    final_loss: float


@dataclass
class BenchmarkResult:
    name: str
    runs: list
    reference_w2: float
    iterations: int
    eval_config: EvalConfig = field(default_factory=EvalConfig)

    def methods(self):
        seen = []
        for r in self.runs:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def values(self, method, metric):
        return np.array([getattr(r, metric) for r in self.runs if r.method == method])

    def summary(self, method, metric):
        """``(mean, std)`` over seeds; std uses ``ddof=1`` (0 for a single seed)."""
        v = self.values(method, metric)
        return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0

    def write_runs_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "seed", "w2", "npe", "path_energy", "final_loss"])
            for r in self.runs:
                w.writerow([r.method, r.seed, repr(r.w2), repr(r.npe), repr(r.energy),
                            repr(r.final_loss)])
        return path

    def write_summary_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "w2_mean", "w2_std", "npe_mean", "npe_std"])
            for m in self.methods():
                w2, npe = self.summary(m, "w2"), self.summary(m, "npe")
                w.writerow([m, repr(w2[0]), repr(w2[1]), repr(npe[0]), repr(npe[1])])
        return path

    def format_table(self):
        n_seeds = len({r.seed for r in self.runs})
        lines = [f"{self.name}: {n_seeds} seed(s), {self.iterations} iterations, "
                 f"reference W2^2 = {self.reference_w2:.4f}",
                 f"{'method':<16}{'W2^2':>20}{'NPE':>20}"]
        for m in self.methods():
            (a, sa), (b, sb) = self.summary(m, "w2"), self.summary(m, "npe")
            lines.append(f"{m:<16}{a:>11.3f} ± {sa:<6.3f}{b:>11.3f} ± {sb:<6.3f}")
        return "\n".join(lines) + "\n"


def reference_w2(bench, eval_config=None):
    ec = eval_config or EvalConfig()
    rng = seeding.stream(REFERENCE_SEED, "mc")
    return metrics.reference_w2(bench.source, bench.target, rng, ec.n_ref, ec.ref_reps)


def run_one(bench, method, seed, iterations, reference, eval_config=None, base_config=None):
    """Train one model and score it; returns a :class:`RunResult`."""
    ec = eval_config or EvalConfig()
    cfg = base_config or TrainConfig()
    cfg = replace(cfg, strategy=method.strategy, batch_size=method.batch_size,
                  iterations=iterations * method.iteration_factor, seed=int(seed),
                  source=bench.source, target=bench.target,
                  cost=CostSpec(cfg.cost.kind, method.epsilon),
                  log_every=max(1, min(cfg.log_every, iterations)))
    net, log = train(cfg)
    rng = seeding.stream(seed, "eval")
    energy, _, generated = metrics.path_energy_mc(net, bench.source, ec.n_gen, rng, "euler", ec.steps)
    w2 = metrics.w2_squared_empirical(generated, toydata.sampler(bench.target)(ec.n_gen, rng))
    npe = metrics.npe_value(energy, reference)
    return RunResult(method.label, int(seed), float(w2), float(npe), float(energy),
                     float(log.rows[-1][1]))


def _run_task(args):
    return run_one(*args)


def worker_count(requested=None):
    cap = os.environ.get("FLOWMATCH_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def run_benchmark(name, methods=None, seeds=(1, 2, 3, 4, 5), iterations=60_000, eval_config=None,
                  base_config=None, workers=None, progress=None):
    """Run ``methods x seeds`` and collect a :class:`BenchmarkResult`.

    Results are ordered by method then seed regardless of worker count.
    """
    bench = get_benchmark(name)
    methods = standard_methods(bench) if methods is None else methods
    ec = eval_config or EvalConfig()
    reference = reference_w2(bench, ec)
    tasks = [(bench, m, s, iterations, reference, ec, base_config) for m in methods for s in seeds]
    n_workers = min(worker_count(workers), len(tasks))
    if n_workers <= 1:
        runs = []
        for task in tasks:
            runs.append(_run_task(task))
            if progress is not None:
                progress(runs[-1])
    else:
        with ProcessPoolExecutor(n_workers) as pool:
            runs = list(pool.map(_run_task, tasks))
    return BenchmarkResult(name, runs, reference, iterations, ec)


def pooled_std(a, b):
    return math.sqrt(0.5 * (a * a + b * b))
