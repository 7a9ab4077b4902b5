"""Purpose-keyed random streams derived from one master seed.

Every consumer of randomness draws from its own stream,
``SeedSequence(seed, spawn_key=(PURPOSES[purpose],))``, so adding draws
in one place (say, extra Monte Carlo samples) never shifts another
(say, network initialisation).
"""

import numpy as np

PURPOSES = {
    "data": 1,
    "pairing": 2,
    "init": 3,
    "mc": 4,
    "eval": 5,
}


def stream(seed, purpose, *extra):
    """Return a ``numpy.random.Generator`` for ``purpose``.

    ``extra`` integers extend the spawn key, e.g. a replicate index.
    """
    if purpose not in PURPOSES:
        raise KeyError(f"unknown random stream purpose {purpose!r}")
    key = (PURPOSES[purpose],) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
