import numpy as np
import pytest

from mqforecast.nn import ParamStore
from mqforecast.position import (GlobalPositionEncoder, LocalPositionEncoder,
                                 matrix_embedding)
from mqforecast.tensor import Tensor


def make_global(rng, d_in=2, d_h=4, dilations=(1, 2), **kw):
    store = ParamStore()
    enc = GlobalPositionEncoder(store, "pe", d_in, d_h, dilations, rng, **kw)
    # randomize biases so ReLU pre-activations are generic
    for t in store.tensors():
        t.data += rng.normal(scale=0.1, size=t.data.shape)
    return enc, store


def test_global_output_shape(rng):
    enc, _ = make_global(rng)
    out = enc(np.zeros((20, 2)))
    assert out.shape == (20, 4)


def test_global_locality(rng):
    enc, _ = make_global(rng, dilations=(1, 2, 4))
    radius = enc.receptive_radius()
    assert radius == (1 + 2 + 4) * 1  # width 3 -> half-width 1 per layer
    base = np.zeros((40, 2))
    out0 = enc(base).data
    bumped = base.copy()
    bumped[20, 0] = 1.0
    out1 = enc(bumped).data
    changed = np.nonzero((out0 != out1).any(axis=1))[0]
    assert changed.size > 0
    assert changed.min() >= 20 - radius
    assert changed.max() <= 20 + radius


def test_global_shift_equivariance(rng):
    # away from the boundary the conv stack commutes with time shifts
    enc, _ = make_global(rng, dilations=(1, 2))
    radius = enc.receptive_radius()
    x = np.zeros((50, 2))
    x[20, 1] = 1.0
    a = enc(x).data
    x2 = np.roll(x, 5, axis=0)
    b = enc(x2).data
    lo, hi = radius, 50 - radius - 5
    assert np.allclose(a[lo:hi], b[lo + 5:hi + 5], atol=1e-12)


def test_global_bidirectional_sees_future(rng):
    enc, _ = make_global(rng, dilations=(1,))
    x = np.zeros((10, 2))
    x[5, 0] = 1.0
    out = enc(x).data
    base = enc(np.zeros((10, 2))).data
    assert not np.allclose(out[4], base[4])  # t=4 reacts to the t=5 event


def test_global_linear_recovers_matrix_embedding(rng):
    store = ParamStore()
    enc = GlobalPositionEncoder(store, "pe", 3, 4, (1,), rng,
                                kernel_width=1, linear=True)
    m = store["pe.conv0.kernel"].data[0]          # (d_in, d_h)
    onehot = np.eye(3)[rng.integers(0, 3, 12)]
    out = enc(onehot).data
    ref = matrix_embedding(onehot, m).data + store["pe.conv0.bias"].data
    assert np.allclose(out, ref, atol=1e-12)


def test_global_errors(rng):
    store = ParamStore()
    with pytest.raises(ValueError):
        GlobalPositionEncoder(store, "pe", 0, 4, (1,), rng)
    enc, _ = make_global(rng)
    with pytest.raises(ValueError):
        enc(np.zeros((0, 2)))


def test_local_per_timestep(rng):
    store = ParamStore()
    enc = LocalPositionEncoder(store, "pl", 2, 4, rng)
    x = rng.integers(0, 2, (3, 15, 2)).astype(float)
    out = enc(x).data
    assert out.shape == (3, 15, 4)
    # row t depends only on x[t]: recompute row-by-row
    for t in range(15):
        row = enc(Tensor(x[:, t:t + 1])).data
        assert np.allclose(out[:, t:t + 1], row, atol=1e-14)


def test_local_nonnegative(rng):
    store = ParamStore()
    enc = LocalPositionEncoder(store, "pl", 1, 8, rng)
    out = enc(rng.integers(0, 2, (4, 9, 1)).astype(float)).data
    assert np.all(out >= 0)
