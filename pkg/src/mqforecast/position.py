"""Position/context encodings learned from raw event-indicator series.

The global encoder looks both forward and backward in time (bidirectional
dilated convolutions) over indicators shared by every series, e.g. holidays.
The local encoder is applied independently at each time step to per-series
indicators, e.g. promotions.
"""

from __future__ import annotations

import numpy as np

from .nn import Dense, glorot
from .tensor import Tensor, dilated_conv1d

__all__ = ["GlobalPositionEncoder", "LocalPositionEncoder", "matrix_embedding"]


class GlobalPositionEncoder:
    """Stack of dilated bidirectional 1-D conv layers, ReLU + dropout each.

    The output depends only on indicators inside the symmetric receptive
    field around each time step. It is shared by all series in a batch, so
    it is computed once per forward pass and broadcast.

    With linear=True, a single width-1 layer reduces to the classic matrix
    embedding: one-hot indicators select rows of the kernel.
    """

    def __init__(self, store, name, d_in, d_h, dilations, rng,
                 kernel_width=3, linear=False):
        if d_in < 1:
            raise ValueError("global encoder needs at least one indicator column")
        self.dilations = tuple(dilations)
        self.kernel_width = kernel_width
        self.linear = linear
        self.kernels = []
        self.biases = []
        c_in = d_in
        for i, _ in enumerate(self.dilations):
            k = store.add(
                f"{name}.conv{i}.kernel",
                glorot(rng, kernel_width * c_in, d_h, (kernel_width, c_in, d_h)),
            )
            b = store.add(f"{name}.conv{i}.bias", np.zeros(d_h))
            self.kernels.append(k)
            self.biases.append(b)
            c_in = d_h

    def __call__(self, x_g, dropout=0.0, rng=None):
        """x_g: (T', d_in) -> (T', d_h)."""
        if x_g.shape[0] < 1:
            raise ValueError("indicator series must have at least one time step")
        out = x_g if isinstance(x_g, Tensor) else Tensor(x_g)
        for k, b, d in zip(self.kernels, self.biases, self.dilations):
            out = dilated_conv1d(out, k, d, mode="bidirectional") + b
            if not self.linear:
                out = out.relu()
                if dropout > 0.0:
                    out = out.dropout(dropout, rng)
        return out

    def receptive_radius(self):
        """Max |offset| of any input a given output row can depend on."""
        return sum(d * (self.kernel_width // 2) for d in self.dilations)


class LocalPositionEncoder:
    """Per-timestep dense layer over local indicators: row t sees x_l[t] only."""

    def __init__(self, store, name, d_in, d_h, rng):
        self.dense = Dense(store, f"{name}.dense", d_in, d_h, rng)

    def __call__(self, x_l):
        """x_l: (..., T', d_in) -> (..., T', d_h)."""
        x_l = x_l if isinstance(x_l, Tensor) else Tensor(x_l)
        return self.dense(x_l).relu()


def matrix_embedding(x_onehot, m):
    """Classic embedding-table lookup via one-hot rows: out_t = x_t^T M."""
    x_onehot = x_onehot if isinstance(x_onehot, Tensor) else Tensor(x_onehot)
    m = m if isinstance(m, Tensor) else Tensor(m)
    return x_onehot @ m
