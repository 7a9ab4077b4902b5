"""Time-conditioned ELU MLP velocity field ``v(t, x)`` with exact gradients and Adam.

The network input is the state with time appended as one extra feature,
``[x_1 .. x_d, t]``. Parameters live in one flat float64 vector ``theta``;
per-layer weights ``(fan_out, fan_in)`` and biases are views into it, so the
optimizer works on a single array.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import CheckpointError, ContractError, NumericalError

FORMAT_VERSION = 1
# U(-a, a) with a = INIT_GAIN / sqrt(fan_in), weights and biases alike.
INIT_GAIN = 1.0


class VectorFieldNet:
    def __init__(self, dim, hidden_dims=(64, 64), theta=None, activation="elu"):
        if activation != "elu":
            raise ContractError(f"unsupported activation {activation!r}")
        self.dim = int(dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.activation = activation
        sizes = [self.dim + 1, *self.hidden_dims, self.dim]
        self.shapes = [(fan_out, fan_in) for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
        self.n_params = sum(o * i + o for o, i in self.shapes)
        if theta is None:
            theta = np.zeros(self.n_params)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ContractError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        self.theta = theta
        self.weights, self.biases = self.unflatten(self.theta)

    @property
    def input_dim(self):
        return self.dim + 1

    def unflatten(self, flat):
        """Per-layer ``(weights, biases)`` views into a flat parameter-shaped vector."""
        weights, biases, pos = [], [], 0
        for fan_out, fan_in in self.shapes:
            weights.append(flat[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in))
            pos += fan_out * fan_in
            biases.append(flat[pos:pos + fan_out])
            pos += fan_out
        return weights, biases

    @classmethod
    def init(cls, dim, hidden_dims=(64, 64), rng=None, zero_final=False):
        net = cls(dim, hidden_dims)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        for w, b in zip(net.weights, net.biases):
            bound = INIT_GAIN / math.sqrt(w.shape[1])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        if zero_final:
            net.weights[-1][...] = 0.0
            net.biases[-1][...] = 0.0
        return net

    def copy(self):
        return VectorFieldNet(self.dim, self.hidden_dims, self.theta.copy(), self.activation)

    def _inputs(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.dim:
            raise ContractError(f"state has shape {x.shape}, net expects dimension {self.dim}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))
        inp = np.empty((x2.shape[0], self.dim + 1))
        inp[:, :-1] = x2
        inp[:, -1] = t
        return inp, single

    def __call__(self, t, x):
        """Evaluate ``v(t, x)`` for one state ``(d,)`` or a batch ``(m, d)``.

        ``t`` is a scalar or one time per row.
        """
        inp, single = self._inputs(t, x)
        out = _backend.kernels().mlp_forward(self.weights, self.biases, inp)
        return out[0] if single else out

    def loss_and_grad(self, t, x, target, weight=None):
        """Weighted mean squared residual and its exact gradient.

        ``loss = (1/n) sum_i w_i ||v(t_i, x_i) - target_i||^2``; returns
        ``(loss, grad)`` with ``grad`` flat like ``theta``.
        """
        inp, _ = self._inputs(t, x)
        n = inp.shape[0]
        if n == 0:
            raise ContractError("empty batch")
        target = np.ascontiguousarray(target, dtype=np.float64).reshape(n, self.dim)
        weight = np.ones(n) if weight is None else np.ascontiguousarray(weight, dtype=np.float64)
        if weight.shape != (n,):
            raise ContractError("one weight per sample is required")
        if np.any(weight < 0):
            raise ContractError("weights must be nonnegative")
        grad = np.empty(self.n_params)
        gw, gb = self.unflatten(grad)
        loss, res_sq = _backend.kernels().mlp_loss_grad(
            self.weights, self.biases, inp, target, weight, gw, gb)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(np.asarray(res_sq) * weight))
            idx = int(bad[0]) if bad.size else None
            raise NumericalError(f"non-finite loss or gradient (sample index {idx})", index=idx)
        return loss, grad


def forward(net, t, x):
    return net(t, x)


def loss_and_grad(net, t, x, target, weight=None):
    return net.loss_and_grad(t, x, target, weight)


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)

    def to_dict(self):
        return {"step": self.step, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "m": self.m.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, d):
        m = np.asarray(d["m"], dtype=np.float64)
        return cls(len(m), d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"],
                   m, np.asarray(d["v"], dtype=np.float64))


def adam_step(net, grad, state):
    """Bias-corrected Adam update of ``net.theta`` in place; returns ``(net, state)``."""
    if grad.shape != net.theta.shape:
        raise ContractError("gradient is not parameter-shaped")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    net.theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net, state


def save_checkpoint(path, net, adam=None, rng_seed=None, training_config=None, **extra):
    """Write a JSON checkpoint; floats are stored with round-trip precision."""
    doc = {
        "format_version": FORMAT_VERSION,
        "arch": {"input_dim": net.input_dim, "hidden_dims": list(net.hidden_dims),
                 "activation": net.activation},
        "params": [{"weight": w.tolist(), "bias": b.tolist()}
                   for w, b in zip(net.weights, net.biases)],
        "adam_state": adam.to_dict() if adam is not None else None,
        "rng_seed": rng_seed,
        "training_config": training_config,
    }
    doc.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns the raw document with ``net`` and ``adam`` objects added."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {doc.get('format_version')!r} != supported {FORMAT_VERSION}")
    arch = doc["arch"]
    net = VectorFieldNet(arch["input_dim"] - 1, arch["hidden_dims"], activation=arch["activation"])
    for (w, b), layer in zip(zip(net.weights, net.biases), doc["params"]):
        w[...] = np.asarray(layer["weight"], dtype=np.float64)
        b[...] = np.asarray(layer["bias"], dtype=np.float64)
    doc["net"] = net
    doc["adam"] = AdamState.from_dict(doc["adam_state"]) if doc.get("adam_state") else None
    return doc
