"""Forward integration of a velocity field ``v(t, x)`` over ``t in [0, 1]``.

A *field* is any callable ``field(t, x)`` returning an array shaped like
``x``; a :class:`~flowmatch.fieldnet.VectorFieldNet` qualifies. States may
be a scalar, one vector ``(d,)`` or a batch ``(m, d)``; a batch shares one
step-size sequence and speeds are reported per row.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, DivergenceError, StiffnessError

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th minus 4th order weights.
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                    -92097 / 339200, 187 / 2100, 1 / 40])

SAFETY = 0.9
FAC_MIN = 0.2
FAC_MAX = 10.0
PI_BETA = 0.04
PI_ALPHA = 0.2 - 0.75 * PI_BETA
MAX_STEPS = 100_000


@dataclass
class Trajectory:
    """States at ``times``; squared speeds at ``eval_times`` (one column per row of a batch).

    ``path_energy`` is the solver's own quadrature of ``int_0^1 |v|^2 dt``
    (per trajectory for a batch). ``steps`` logs ``(t, h, error_norm,
    accepted)`` for adaptive solvers.
    """

    times: np.ndarray
    states: np.ndarray
    eval_times: np.ndarray
    speed_sq: np.ndarray
    path_energy: np.ndarray | float
    nfe: int
    accepted: int = 0
    rejected: int = 0
    steps: list = dc_field(default_factory=list)

    @property
    def endpoint(self):
        return self.states[-1]


def _speed_sq(v):
    v = np.asarray(v, dtype=np.float64)
    return v * v if v.ndim == 0 else np.sum(v * v, axis=-1)


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state at step {step}", index=step)


def integrate_euler(field, x0, steps=100, record=True):
    """Fixed-step forward Euler from ``t = 0`` to ``1``.

    ``nfe == steps``; ``path_energy`` is the left-endpoint Riemann sum of the
    squared speed. With ``record=False`` only the two end states are kept.
    """
    steps = int(steps)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    _check_finite(x, 0)
    h = 1.0 / steps
    eval_times = np.arange(steps) * h
    states = [x.copy()]
    speeds = []
    for k in range(steps):
        v = np.asarray(field(eval_times[k], x), dtype=np.float64)
        speeds.append(_speed_sq(v))
        x = x + h * v
        _check_finite(x, k + 1)
        if record:
            states.append(x.copy())
    if not record:
        states.append(x)
        times = np.array([0.0, 1.0])
    else:
        times = np.linspace(0.0, 1.0, steps + 1)
    speed_sq = np.array(speeds)
    # Sequential sum so a batch row and a lone trajectory round identically.
    total = np.zeros_like(speed_sq[0])
    for s in speed_sq:
        total = total + s
    return Trajectory(times, np.array(states), eval_times, speed_sq,
                      h * total, nfe=steps, accepted=steps)


def _error_norm(err, x, x_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(field, x0, f0, rtol, atol):
    """Starting step of Hairer, Norsett and Wanner; costs one field evaluation."""
    scale = atol + rtol * np.abs(x0)
    d0 = float(np.sqrt(np.mean((x0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    f1 = np.asarray(field(h0, x0 + h0 * f0), dtype=np.float64)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    top = max(d1, d2)
    h1 = max(1e-6, h0 * 1e-3) if top <= 1e-15 else (0.01 / top) ** 0.2
    return min(100.0 * h0, h1, 1.0)


def integrate_dopri5(field, x0, rtol=1e-5, atol=1e-5, record=True):
    """Adaptive Dormand-Prince 5(4) from ``t = 0`` to ``1`` with a PI step controller.

    The last stage of an accepted step is the first stage of the next one,
    so each attempted step costs 6 evaluations; with the initial evaluation
    and the starting-step probe ``nfe = 6 * (accepted + rejected) + 2``.
    Squared speeds are recorded at every accepted step endpoint from those
    same evaluations and ``path_energy`` is their trapezoidal integral.
    Raises :class:`StiffnessError` if the step size underflows.
    """
    if not (rtol > 0 and atol > 0):
        raise ConfigError("rtol and atol must be > 0")
    x = np.array(x0, dtype=np.float64)
    _check_finite(x, 0)
    k1 = np.asarray(field(0.0, x), dtype=np.float64)
    nfe = 1
    h = _initial_step(field, x, k1, rtol, atol)
    nfe += 1
    t = 0.0
    times, states = [0.0], [x.copy()]
    speeds = [_speed_sq(k1)]
    log = []
    accepted = rejected = 0
    err_prev = 1e-4
    last_rejected = False
    while t < 1.0:
        if accepted + rejected >= MAX_STEPS:
            raise StiffnessError(f"no progress after {MAX_STEPS} steps at t={t:.6g}")
        if h < 1e-14 * max(1.0, t):
            raise StiffnessError(f"step size underflow ({h:.3e}) at t={t:.6g}")
        final = t + h >= 1.0
        if final:
            h = 1.0 - t
        k = [k1]
        for s in range(1, 7):
            xs = x + h * sum(a * kj for a, kj in zip(_A[s], k) if a != 0.0)
            k.append(np.asarray(field(t + _C[s] * h, xs), dtype=np.float64))
        nfe += 6
        x_new = x + h * sum(b * kj for b, kj in zip(_B, k) if b != 0.0)
        err_vec = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        err = _error_norm(err_vec, x, x_new, rtol, atol)
        if not np.isfinite(err):
            err = np.inf
        if err <= 1.0:
            fac = err ** PI_ALPHA / err_prev ** PI_BETA / SAFETY if err > 0 else 1.0 / FAC_MAX
            fac = min(1.0 / FAC_MIN, max(1.0 / FAC_MAX, fac))
            h_new = h / fac
            if last_rejected:
                h_new = min(h_new, h)
            log.append((t, h, err, True))
            t = 1.0 if final else t + h
            x = x_new
            _check_finite(x, accepted + 1)
            k1 = k[6]
            accepted += 1
            err_prev = max(err, 1e-4)
            last_rejected = False
            speeds.append(_speed_sq(k1))
            times.append(t)
            if record or t >= 1.0:
                states.append(x.copy())
            h = h_new
        else:
            log.append((t, h, err, False))
            rejected += 1
            last_rejected = True
            shrink = 1.0 / FAC_MIN if not np.isfinite(err) else min(1.0 / FAC_MIN, err ** PI_ALPHA / SAFETY)
            h = h / shrink
    times = np.array(times)
    speed_sq = np.array(speeds)
    dt = np.diff(times)
    mid = 0.5 * (speed_sq[1:] + speed_sq[:-1])
    energy = np.tensordot(dt, mid, axes=(0, 0))
    if not record:
        times_out = np.array([0.0, 1.0])
    else:
        times_out = times
    return Trajectory(times_out, np.array(states), times, speed_sq, energy, nfe=nfe,
                      accepted=accepted, rejected=rejected, steps=log)


def integrate(field, x0, solver="euler", steps=100, rtol=1e-5, atol=1e-5, record=True):
    """Dispatch to :func:`integrate_euler` or :func:`integrate_dopri5`."""
    if solver == "euler":
        return integrate_euler(field, x0, steps, record)
    if solver == "dopri5":
        return integrate_dopri5(field, x0, rtol, atol, record)
    raise ConfigError(f"unknown solver {solver!r}; expected euler or dopri5")


def path_energy(traj):
    """Trapezoidal estimate of ``int_0^1 |v|^2 dt`` over the recorded evaluation times.

    Where the evaluations do not reach an end of ``[0, 1]`` (Euler never
    evaluates at ``t = 1``) the nearest recorded value is held constant.
    """
    te = np.asarray(traj.eval_times, dtype=np.float64)
    s = np.asarray(traj.speed_sq, dtype=np.float64)
    if te.size == 0:
        raise ConfigError("trajectory has no recorded speeds")
    dt = np.diff(te)
    total = np.tensordot(dt, 0.5 * (s[1:] + s[:-1]), axes=(0, 0))
    return total + te[0] * s[0] + (1.0 - te[-1]) * s[-1]


def write_trajectories_csv(path, traj):
    """``traj_id,step,t,x0..`` rows for every recorded state (batch or single)."""
    states = np.asarray(traj.states)
    if states.ndim == 1:
        states = states[:, None, None]
    elif states.ndim == 2:
        states = states[:, None, :]
    n_steps, m, d = states.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["traj_id", "step", "t"] + [f"x{i}" for i in range(d)]) + "\n")
        for j in range(m):
            for k in range(n_steps):
                row = [str(j), str(k), repr(float(traj.times[k]))]
                row += [repr(float(v)) for v in states[k, j]]
                fh.write(",".join(row) + "\n")
    return path
