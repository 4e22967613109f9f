import numpy as np
import pytest

from mqforecast.data import SeriesDataset, SyntheticSpec, generate_synthetic
from mqforecast.model import ModelConfig
from mqforecast.tensor import Tensor
from mqforecast.training import (Scaler, TrainConfig, _cell_masks, forecast,
                                 forecast_naive, load_model, save_model,
                                 total_quantile_loss, train)

from conftest import rel_err


def tiny_model_config(**kw):
    base = dict(variant="mqt", n_horizons=3, d_h=8, conv_filters=6,
                static_dim=4, enc_dilations=(1, 2), pos_dilations=(1, 2),
                lookback=10, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_dataset(n=8, t_total=36, seed=0):
    spec = SyntheticSpec(n_series=n, t_total=t_total, seed=seed, n_future=4,
                         val_len=5, test_len=5)
    ds, _ = generate_synthetic(spec)
    return ds


# -- scaler --------------------------------------------------------------


def test_scaler_standardizes_train_window():
    ds = tiny_dataset()
    sc = Scaler.fit(ds)
    z = sc.transform(ds.y)
    train_part = z[:, :ds.train_end]
    assert np.abs(np.nanmean(train_part, axis=1)).max() < 1e-10
    assert np.abs(np.nanstd(train_part, axis=1) - 1.0).max() < 1e-10
    back = sc.inverse(z)
    ok = np.isfinite(ds.y)
    assert np.allclose(back[ok], ds.y[ok])


def test_scaler_constant_series_safe():
    ds = tiny_dataset()
    ds.y[:] = 5.0
    sc = Scaler.fit(ds)
    z = sc.transform(ds.y)
    assert np.all(np.isfinite(z))


# -- loss ----------------------------------------------------------------


def test_total_quantile_loss_triple_loop_oracle(rng):
    b, t_len, n_h = 2, 4, 3
    quantiles = (0.5, 0.9)
    cube = Tensor(rng.normal(size=(b, t_len, n_h, 2)))
    targets = rng.normal(size=(b, t_len, n_h))
    mask = rng.integers(0, 2, (b, t_len, n_h)).astype(bool)
    got = total_quantile_loss(cube, targets, mask, quantiles).item()
    ref = 0.0
    for i in range(b):
        for t in range(t_len):
            for h in range(n_h):
                if not mask[i, t, h]:
                    continue
                for k, q in enumerate(quantiles):
                    d = targets[i, t, h] - cube.data[i, t, h, k]
                    ref += q * d if d >= 0 else (q - 1.0) * d
    assert abs(got - ref) < 1e-12


def test_total_quantile_loss_all_masked(rng):
    cube = Tensor(rng.normal(size=(1, 2, 2, 1)))
    out = total_quantile_loss(cube, np.zeros((1, 2, 2)),
                              np.zeros((1, 2, 2), dtype=bool), (0.5,))
    assert out.item() == 0.0


def test_cell_masks_partition():
    ds = tiny_dataset()
    train_m, val_m, test_m = _cell_masks(ds, 3)
    assert not (train_m & val_m).any()
    assert not (val_m & test_m).any()
    assert not (train_m & test_m).any()
    # a cell is in train iff its target lands before train_end and is observed
    t, h = 5, 1
    assert train_m[0, t, h] == (t + h + 1 < ds.train_end)


# -- training ------------------------------------------------------------


def test_train_constant_series_converges(tmp_path):
    ds = tiny_dataset(n=6, t_total=30)
    ds.y[:] = np.linspace(4.0, 9.0, 6)[:, None]  # constant per series
    ds.local_ind[:] = 0.0
    ds.global_ind[:] = 0.0
    cfg = tiny_model_config()
    model, scaler, report = train(
        ds, cfg, TrainConfig(learning_rate=1e-2, batch_size=6, max_epochs=30,
                             patience=30, seed=0))
    cube = forecast(ds, model, scaler)
    truth = ds.y[:, 0][:, None, None]
    err = np.abs(cube.values[..., 0] - truth) / truth
    assert np.median(err) < 0.02


def test_train_deterministic():
    ds = tiny_dataset()
    cfg = tiny_model_config()
    tc = TrainConfig(batch_size=8, max_epochs=2, seed=3)
    m1, s1, r1 = train(ds, cfg, tc)
    m2, s2, r2 = train(ds, cfg, tc)
    a = forecast(ds, m1, s1).values
    b = forecast(ds, m2, s2).values
    assert np.array_equal(a, b)
    losses1 = [(e, tr, va) for e, tr, va, _ in r1.epochs]
    losses2 = [(e, tr, va) for e, tr, va, _ in r2.epochs]
    assert losses1 == losses2


def test_forking_matches_per_fct_reencoding():
    ds = tiny_dataset(n=4, t_total=24)
    cfg = tiny_model_config()
    model, scaler, _ = train(ds, cfg, TrainConfig(batch_size=4, max_epochs=1,
                                                  seed=0))
    fcts = np.array([10, 15, 20])
    fast = forecast(ds, model, scaler, fcts=fcts)
    slow = forecast_naive(ds, model, scaler, fcts=fcts)
    assert rel_err(fast.values, slow.values) < 1e-9


def test_forecast_fct_out_of_range():
    ds = tiny_dataset(n=2, t_total=24)
    cfg = tiny_model_config()
    model, scaler, _ = train(ds, cfg, TrainConfig(batch_size=2, max_epochs=1,
                                                  seed=0))
    with pytest.raises(IndexError):
        forecast(ds, model, scaler, fcts=np.array([24]))


def test_save_load_roundtrip(tmp_path):
    ds = tiny_dataset(n=3, t_total=24)
    cfg = tiny_model_config()
    model, scaler, _ = train(ds, cfg, TrainConfig(batch_size=3, max_epochs=1,
                                                  seed=0))
    path = tmp_path / "model.npz"
    save_model(path, model, scaler)
    model2, scaler2 = load_model(path)
    a = forecast(ds, model, scaler).values
    b = forecast(ds, model2, scaler2).values
    assert np.array_equal(a, b)


def test_early_stopping_restores_best():
    ds = tiny_dataset(n=6, t_total=30)
    cfg = tiny_model_config()
    model, scaler, report = train(
        ds, cfg, TrainConfig(learning_rate=1e-2, batch_size=6, max_epochs=15,
                             patience=2, seed=1))
    val = [row[2] for row in report.epochs]
    assert report.selected_epoch == int(np.argmin(val))
