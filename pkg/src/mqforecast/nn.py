"""Layers, parameter bookkeeping, Adam, and checkpoint IO."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat

__all__ = [
    "ParamStore",
    "Dense",
    "LayerNorm",
    "Adam",
    "glorot",
    "save_checkpoint",
    "load_checkpoint",
]


def glorot(rng, fan_in, fan_out, shape=None):
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Flat name -> Tensor registry for one model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, data):
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def n_params(self):
        return sum(t.size for t in self._params.values())

    def state_arrays(self):
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays):
        for k, t in self._params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint missing parameter: {k}")
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ValueError(
                    f"shape mismatch for {k}: checkpoint {a.shape}, model {t.shape}"
                )
            t.data[...] = a


class Dense:
    """Affine map on the last axis: x @ W + b."""

    def __init__(self, store, name, d_in, d_out, rng):
        self.w = store.add(f"{name}.w", glorot(rng, d_in, d_out))
        self.b = store.add(f"{name}.b", np.zeros(d_out))

    def __call__(self, x):
        return x @ self.w + self.b


class LayerNorm:
    """Normalize over the last axis with learned scale and shift."""

    def __init__(self, store, name, dim, eps=1e-6):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return xc * inv * self.gamma + self.beta


class Adam:
    """Adam with bias correction over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def save_checkpoint(path, store, extras=None):
    """Write parameters (and optional extra arrays) to one .npz file.

    Round-trips bit-exactly: values are stored as raw float64 arrays.
    Extra arrays are namespaced under 'extra::'.
    """
    payload = {f"param::{k}": v for k, v in store.state_arrays().items()}
    for k, v in (extras or {}).items():
        payload[f"extra::{k}"] = np.asarray(v)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (param arrays, extra arrays)."""
    with np.load(path, allow_pickle=False) as f:
        params = {}
        extras = {}
        for k in f.files:
            if k.startswith("param::"):
                params[k[len("param::"):]] = f[k]
            elif k.startswith("extra::"):
                extras[k[len("extra::"):]] = f[k]
    return params, extras
