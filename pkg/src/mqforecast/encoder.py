"""Encoder: causal dilated conv stack over the past plus a static encoding.

Hidden state h_t = [h1_t ; h2_t] where h1_t summarizes targets, covariates
and position encodings up to t (strictly causal) and h2_t is the static
encoding replicated across time.
"""

from __future__ import annotations

import numpy as np

from .nn import Dense, glorot
from .tensor import Tensor, concat, dilated_conv1d

__all__ = ["SeriesEncoder", "StaticEncoder"]


class SeriesEncoder:
    """Stack of causal dilated convolutions (wavenet-style, no residuals)."""

    def __init__(self, store, name, d_in, filters, dilations, rng, kernel_width=2):
        self.dilations = tuple(dilations)
        self.kernel_width = kernel_width
        self.kernels = []
        self.biases = []
        c_in = d_in
        for i, _ in enumerate(self.dilations):
            k = store.add(
                f"{name}.conv{i}.kernel",
                glorot(rng, kernel_width * c_in, filters,
                       (kernel_width, c_in, filters)),
            )
            b = store.add(f"{name}.conv{i}.bias", np.zeros(filters))
            self.kernels.append(k)
            self.biases.append(b)
            c_in = filters

    def __call__(self, x, dropout=0.0, rng=None):
        """x: (B, T, d_in) -> (B, T, filters); row t sees inputs up to t."""
        if x.shape[-2] < 1:
            raise ValueError("series must have at least one time step")
        out = x if isinstance(x, Tensor) else Tensor(x)
        for k, b, d in zip(self.kernels, self.biases, self.dilations):
            out = dilated_conv1d(out, k, d, mode="causal") + b
            out = out.relu()
            if dropout > 0.0:
                out = out.dropout(dropout, rng)
        return out

    def receptive_span(self):
        """Number of past steps (beyond t itself) that can affect output t."""
        return sum(d * (self.kernel_width - 1) for d in self.dilations)


class StaticEncoder:
    """Single dense layer over static features."""

    def __init__(self, store, name, d_in, d_out, rng):
        self.dense = Dense(store, f"{name}.dense", d_in, d_out, rng)

    def __call__(self, s):
        """s: (B, d_in) -> (B, d_out)."""
        s = s if isinstance(s, Tensor) else Tensor(s)
        return self.dense(s).relu()
