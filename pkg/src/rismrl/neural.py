"""Dense networks with hand-written reverse mode, Adam and a tanh-Gaussian head.

Everything runs in float64 on ``(batch, features)`` arrays.  A network
records what it needs for :meth:`Mlp.backward` during :meth:`Mlp.forward`;
:meth:`Mlp.predict` evaluates without recording.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ParamTensor",
    "Linear",
    "Mlp",
    "Adam",
    "TanhGaussian",
    "gaussian_head_sample",
    "LOG_STD_MIN",
    "LOG_STD_MAX",
    "polyak_update",
    "params_checksum",
    "save_params",
    "load_params",
]

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ParamTensor:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = ""):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = ParamTensor(rng.uniform(-bound, bound, (n_in, n_out)), f"{name}.weight")
        self.bias = ParamTensor(rng.uniform(-bound, bound, n_out), f"{name}.bias")
        self._x = None

    def params(self) -> list[ParamTensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"expected {self.weight.shape[0]} input features, got {x.shape[-1]}")
        if record:
            self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, g: np.ndarray, accumulate: bool = True) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called without a recorded forward")
        if accumulate:
            self.weight.grad += self._x.T @ g
            self.bias.grad += g.sum(axis=0)
        return g @ self.weight.value.T


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (y > 0.0)
    return g * (1.0 - y * y)


class Mlp:
    """Affine layers with a shared hidden activation and a linear output.

    With ``head="gaussian"`` the output width is doubled and :meth:`forward`
    returns ``(mean, log_std)`` with ``log_std`` clamped to
    ``[LOG_STD_MIN, LOG_STD_MAX]``.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", head: str = "linear", name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if head not in ("linear", "gaussian"):
            raise ValueError(f"unknown head {head!r}")
        _act(activation, np.zeros(1))
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.head = head
        dims = list(self.sizes)
        if head == "gaussian":
            dims[-1] *= 2
        self.layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self._hidden: list[np.ndarray] | None = None
        self._clip_mask = None

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def _run(self, x: np.ndarray, record: bool):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        hidden = []
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, record)
            if i < len(self.layers) - 1:
                h = _act(self.activation, h)
                hidden.append(h)
        if record:
            self._hidden = hidden
        if self.head == "gaussian":
            d = self.out_dim
            mean, log_std = h[:, :d], h[:, d:]
            if record:
                self._clip_mask = (log_std >= LOG_STD_MIN) & (log_std <= LOG_STD_MAX)
            log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
            if squeeze:
                return mean[0], log_std[0]
            return mean, log_std
        return h[0] if squeeze else h

    def forward(self, x: np.ndarray):
        return self._run(x, record=True)

    def predict(self, x: np.ndarray):
        return self._run(x, record=False)

    def backward(self, g_out, accumulate: bool = True) -> np.ndarray:
        """Back-propagate ``d loss / d output``; returns ``d loss / d input``.

        For a Gaussian head pass ``(g_mean, g_log_std)``.  With
        ``accumulate=False`` parameter gradients are left untouched (useful
        when only the input gradient is wanted).
        """
        if self._hidden is None:
            raise RuntimeError("backward called without a recorded forward")
        if self.head == "gaussian":
            g_mean, g_log_std = g_out
            g = np.concatenate([np.atleast_2d(g_mean),
                                np.atleast_2d(g_log_std) * self._clip_mask], axis=1)
        else:
            g = np.atleast_2d(np.asarray(g_out, dtype=np.float64))
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                g = _act_grad(self.activation, self._hidden[i], g)
            g = self.layers[i].backward(g, accumulate)
        return g

    def copy_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst.value[...] = src.value

    def spec(self) -> dict:
        return {"sizes": self.sizes, "activation": self.activation, "head": self.head}


def polyak_update(target: Mlp, online: Mlp, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``."""
    for t, o in zip(target.params(), online.params()):
        if tau == 1.0:
            t.value[...] = o.value
        else:
            t.value *= 1.0 - tau
            t.value += tau * o.value


class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: Iterable[ParamTensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class TanhGaussian:
    """Reparameterized ``a = tanh(mean + exp(log_std) * eps)`` with its log-density."""

    def __init__(self):
        self._cache = None

    def sample(self, mean: np.ndarray, log_std: np.ndarray, eps: np.ndarray):
        log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mean + std * eps
        a = np.tanh(u)
        log_prob = np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(u), axis=-1)
        self._cache = (a, std, eps)
        return a, log_prob

    def backward(self, g_a: np.ndarray, g_logp: np.ndarray):
        """Gradients w.r.t. ``(mean, log_std)`` given upstream grads of ``a`` and ``log_prob``."""
        a, std, eps = self._cache
        g_logp = np.asarray(g_logp, dtype=np.float64)[..., None]
        # d log_prob / d u = 2 tanh(u); d log_prob / d log_std (eps fixed) = -1
        g_u = g_a * (1.0 - a * a) + g_logp * 2.0 * a
        return g_u, g_u * std * eps - g_logp


def gaussian_head_sample(mean, log_std, rng: np.random.Generator):
    """Draw a squashed Gaussian action and its log-probability."""
    mean = np.asarray(mean, dtype=np.float64)
    eps = rng.standard_normal(mean.shape)
    return TanhGaussian().sample(mean, np.asarray(log_std, dtype=np.float64), eps)


def params_checksum(nets: Iterable[Mlp]) -> str:
    h = hashlib.sha256()
    for net in nets:
        for p in net.params():
            h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def save_params(path, nets: dict[str, Mlp], metadata: dict | None = None, extra: dict | None = None) -> None:
    """Write networks (plus optional arrays) to one ``.npz`` file.

    Parameters are stored as ``<net>/<index>`` in layer order; the JSON
    metadata records each net's layer sizes and activation.
    """
    arrays = {}
    meta = {"nets": {}, "metadata": metadata or {}}
    for key, net in nets.items():
        meta["nets"][key] = net.spec()
        for i, p in enumerate(net.params()):
            arrays[f"{key}/{i}"] = p.value
    for key, arr in (extra or {}).items():
        arrays[f"extra/{key}"] = np.asarray(arr)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> tuple[dict[str, Mlp], dict, dict]:
    """Inverse of :func:`save_params`: ``(nets, metadata, extra)``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        nets = {}
        for key, spec in meta["nets"].items():
            net = Mlp(spec["sizes"], np.random.default_rng(0), spec["activation"], spec["head"], key)
            for i, p in enumerate(net.params()):
                p.value[...] = data[f"{key}/{i}"]
            nets[key] = net
        extra = {k[len("extra/"):]: data[k].copy() for k in data.files if k.startswith("extra/")}
    return nets, meta["metadata"], extra
