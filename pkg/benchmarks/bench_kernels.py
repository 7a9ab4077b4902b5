"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time per call for each
available backend and the speedup of the compiled one.
"""

import argparse
import timeit

import numpy as np

from flowmatch import _backend, coupling
from flowmatch.fieldnet import VectorFieldNet


def cases():
    rng = np.random.default_rng(0)
    net = VectorFieldNet.init(2, (64, 64), rng=1)
    t48, x48, y48, w48 = rng.random(48), rng.normal(size=(48, 2)), rng.normal(size=(48, 2)), rng.random(48)
    t2k, x2k = rng.random(2048), rng.normal(size=(2048, 2))
    c48, c256 = rng.random((48, 48)), rng.random((256, 256))
    tied = rng.integers(0, 3, size=(64, 64)).astype(np.float64)
    return [
        ("mlp loss+grad, batch 48", lambda: net.loss_and_grad(t48, x48, y48, w48)),
        ("mlp forward, 2048 points", lambda: net(t2k, x2k)),
        ("assignment 48x48", lambda: coupling.linear_assignment(c48)),
        ("assignment 256x256", lambda: coupling.linear_assignment(c256)),
        ("assignment 64x64, tied costs", lambda: coupling.linear_assignment(tied)),
    ]


def best_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = _backend.available()
    print(f"{'kernel':<32}" + "".join(f"{b + ' (us)':>16}" for b in backends) + f"{'speedup':>10}")
    for label, fn in cases():
        times = {}
        for b in backends:
            with _backend.use(b):
                times[b] = best_time(fn, args.repeat)
        row = f"{label:<32}" + "".join(f"{times[b] * 1e6:>16.1f}" for b in backends)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
