"""Datasets, synthetic generation, forecast-cube serialization, and metrics.

All file formats are plain CSV plus a small JSON schema descriptor so test
fixtures stay diffable.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os

import numpy as np

__all__ = [
    "SeriesDataset",
    "SyntheticSpec",
    "ForecastCube",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "normalized_quantile_loss",
    "pinball",
    "slice_masks",
    "sliced_metrics",
]


class DataError(ValueError):
    """Dataset shape/content violation."""


@dataclasses.dataclass
class SeriesDataset:
    """N series with targets, covariates, event indicators and statics.

    y is (N, T) with NaN marking missing targets. Indicator matrices extend
    n_future steps past the last target so every horizon of every FCT has a
    position encoding. Windows satisfy train < validation < test.
    """

    series_ids: list
    y: np.ndarray                # (N, T)
    covariates: np.ndarray       # (N, T, d_x)
    local_ind: np.ndarray        # (N, T + n_future, d_l)
    global_ind: np.ndarray       # (T + n_future, d_g)
    static: np.ndarray           # (N, d_s)
    train_end: int
    val_end: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        self.local_ind = np.asarray(self.local_ind, dtype=np.float64)
        self.global_ind = np.asarray(self.global_ind, dtype=np.float64)
        self.static = np.asarray(self.static, dtype=np.float64)
        n, t = self.y.shape
        if len(self.series_ids) != n:
            raise DataError("series_ids length disagrees with y")
        for name, ind in (("local", self.local_ind), ("global", self.global_ind)):
            vals = ind[np.isfinite(ind)]
            if not np.all((vals == 0.0) | (vals == 1.0)):
                raise DataError(f"{name} indicators must be binary")
        if self.local_ind.shape[1] != self.global_ind.shape[0]:
            raise DataError("local/global indicator lengths disagree")
        if self.local_ind.shape[1] < t:
            raise DataError("indicators must cover at least the target span")
        if not 0 < self.train_end <= self.val_end <= t:
            raise DataError("windows must satisfy 0 < train_end <= val_end <= T")

    @property
    def n_series(self):
        return self.y.shape[0]

    @property
    def n_time(self):
        return self.y.shape[1]

    @property
    def n_future(self):
        return self.global_ind.shape[0] - self.y.shape[1]


@dataclasses.dataclass
class SyntheticSpec:
    """Fully seeded generator spec with closed-form true quantiles.

    y_t = base * season(t) * (1 + holiday_lift*g_t) * (1 + promo_lift*l_t) * eps
    with eps ~ lognormal(0, noise_sigma), so the conditional p-quantile of
    each cell is the deterministic part times exp(noise_sigma * z_p).
    """

    n_series: int = 100
    t_total: int = 156
    seed: int = 0
    base_level: float = 50.0
    base_sigma: float = 0.5
    season_amplitude: float = 0.3
    season_period: int = 52
    holiday_offsets: tuple = (45, 51)
    holiday_lift: float = 1.0
    promo_prob: float = 0.06
    promo_lift: float = 0.8
    noise_sigma: float = 0.3
    n_future: int = 12
    val_len: int = 12
    test_len: int = 12

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        d = json.loads(s)
        d["holiday_offsets"] = tuple(d["holiday_offsets"])
        return cls(**d)


def _norm_quantile(p):
    # inverse standard normal via Acklam-style rational approx is overkill
    # here; scipy is already a dependency of the diagnostics module
    from scipy.stats import norm

    return norm.ppf(p)


def generate_synthetic(spec: SyntheticSpec, quantile_levels=(0.5, 0.9)):
    """Returns (SeriesDataset, true_quantiles (N, T, len(levels)))."""
    rng = np.random.default_rng(spec.seed)
    n, t_total, t_ext = spec.n_series, spec.t_total, spec.t_total + spec.n_future

    base = spec.base_level * np.exp(
        rng.normal(0.0, spec.base_sigma, size=n) - 0.5 * spec.base_sigma**2)
    season = 1.0 + spec.season_amplitude * np.sin(
        2.0 * np.pi * np.arange(t_ext) / spec.season_period)
    week = np.arange(t_ext) % spec.season_period
    holiday = np.isin(week, spec.holiday_offsets).astype(float)
    promo = (rng.random((n, t_ext)) < spec.promo_prob).astype(float)

    clean = (base[:, None] * season[None, :]
             * (1.0 + spec.holiday_lift * holiday[None, :])
             * (1.0 + spec.promo_lift * promo))
    eps = np.exp(rng.normal(0.0, spec.noise_sigma, size=(n, t_ext)))
    y = (clean * eps)[:, :t_total]

    z = np.array([_norm_quantile(q) for q in quantile_levels])
    true_q = clean[:, :t_total, None] * np.exp(spec.noise_sigma * z)[None, None, :]

    dataset = SeriesDataset(
        series_ids=[f"s{i:05d}" for i in range(n)],
        y=y,
        covariates=np.zeros((n, t_total, 0)),
        local_ind=promo[:, :, None],
        global_ind=holiday[:, None],
        static=np.log(base)[:, None],
        train_end=t_total - spec.val_len - spec.test_len,
        val_end=t_total - spec.test_len,
    )
    return dataset, true_q


# -- CSV round trip ------------------------------------------------------


def save_dataset(dataset: SeriesDataset, path, schema_path=None):
    """Long-format CSV; rows past the last target carry only indicators."""
    schema_path = schema_path or _schema_path(path)
    d_x = dataset.covariates.shape[2]
    d_l = dataset.local_ind.shape[2]
    d_g = dataset.global_ind.shape[1]
    d_s = dataset.static.shape[1]
    schema = {
        "target": "target",
        "covariates": [f"cov_{j}" for j in range(d_x)],
        "local_indicators": [f"lind_{j}" for j in range(d_l)],
        "global_indicators": [f"gind_{j}" for j in range(d_g)],
        "static": [f"static_{j}" for j in range(d_s)],
        "train_end": dataset.train_end,
        "val_end": dataset.val_end,
    }
    with open(schema_path, "w") as f:
        json.dump(schema, f, indent=2)

    t_ext = dataset.global_ind.shape[0]
    header = (["series_id", "time_index", "target"]
              + schema["covariates"] + schema["local_indicators"]
              + schema["global_indicators"] + schema["static"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for i, sid in enumerate(dataset.series_ids):
            for t in range(t_ext):
                row = [sid, t]
                if t < dataset.n_time and np.isfinite(dataset.y[i, t]):
                    row.append(repr(float(dataset.y[i, t])))
                else:
                    row.append("")
                if t < dataset.n_time:
                    row += [repr(float(v)) for v in dataset.covariates[i, t]]
                else:
                    row += ["0.0"] * d_x
                row += [repr(float(v)) for v in dataset.local_ind[i, t]]
                row += [repr(float(v)) for v in dataset.global_ind[t]]
                row += [repr(float(v)) for v in dataset.static[i]]
                w.writerow(row)


def _schema_path(path):
    root, _ = os.path.splitext(path)
    return root + ".schema.json"


def load_dataset(path, schema_path=None):
    """Parse a long-format CSV back into a SeriesDataset.

    Raises DataError with the offending row number on schema violations,
    non-binary indicators, or an unordered time index.
    """
    schema_path = schema_path or _schema_path(path)
    with open(schema_path) as f:
        schema = json.load(f)

    per_series: dict[str, list] = {}
    order: list[str] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = (["series_id", "time_index", schema["target"]]
                    + schema["covariates"] + schema["local_indicators"]
                    + schema["global_indicators"] + schema["static"])
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"missing columns: {missing}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["series_id"]
            if sid not in per_series:
                per_series[sid] = []
                order.append(sid)
            try:
                t = int(row["time_index"])
            except ValueError:
                raise DataError(f"row {lineno}: bad time_index")
            tgt = row[schema["target"]]
            y = float(tgt) if tgt != "" else np.nan
            cov = [float(row[c]) for c in schema["covariates"]]
            lind = [float(row[c]) for c in schema["local_indicators"]]
            gind = [float(row[c]) for c in schema["global_indicators"]]
            stat = [float(row[c]) for c in schema["static"]]
            for v in lind + gind:
                if v not in (0.0, 1.0):
                    raise DataError(f"row {lineno}: non-binary indicator {v}")
            rows = per_series[sid]
            if rows and t != rows[-1][0] + 1:
                raise DataError(f"row {lineno}: unordered time index")
            rows.append((t, y, cov, lind, gind, stat))

    if not order:
        raise DataError("empty dataset file")
    t_ext = len(per_series[order[0]])
    n = len(order)
    y_all, cov_all, lind_all, stat_all = [], [], [], []
    gind = np.array([r[4] for r in per_series[order[0]]])
    for sid in order:
        rows = per_series[sid]
        if len(rows) != t_ext:
            raise DataError(f"series {sid}: ragged length")
        y_all.append([r[1] for r in rows])
        cov_all.append([r[2] for r in rows])
        lind_all.append([r[3] for r in rows])
        stat_all.append(rows[0][5])

    y_ext = np.array(y_all)
    # target span = rows where any series has an observed target
    has_target = np.any(np.isfinite(y_ext), axis=0)
    t_len = int(np.max(np.nonzero(has_target)[0])) + 1 if has_target.any() else 0
    return SeriesDataset(
        series_ids=order,
        y=y_ext[:, :t_len],
        covariates=np.array(cov_all)[:, :t_len, :],
        local_ind=np.array(lind_all),
        global_ind=gind,
        static=np.array(stat_all),
        train_end=int(schema["train_end"]),
        val_end=int(schema["val_end"]),
    )


# -- forecast cube -------------------------------------------------------


@dataclasses.dataclass
class ForecastCube:
    """Forecasts indexed by (series, FCT, horizon 1..H, quantile level)."""

    series_ids: list
    fcts: np.ndarray             # (T_f,) FCT time indices
    quantiles: tuple
    values: np.ndarray           # (N, T_f, H, Q)

    def __post_init__(self):
        self.fcts = np.asarray(self.fcts, dtype=int)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise DataError("forecast cube contains non-finite values")

    @property
    def n_horizons(self):
        return self.values.shape[2]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["series_id", "fct", "horizon", "quantile", "value"])
            for i, sid in enumerate(self.series_ids):
                for j, t in enumerate(self.fcts):
                    for h in range(self.values.shape[2]):
                        for k, q in enumerate(self.quantiles):
                            w.writerow([sid, t, h + 1, q,
                                        repr(float(self.values[i, j, h, k]))])

    @classmethod
    def from_csv(cls, path):
        cells = {}
        sids, fcts, hs, qs = [], set(), set(), set()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                sid = row["series_id"]
                key = (sid, int(row["fct"]), int(row["horizon"]),
                       float(row["quantile"]))
                cells[key] = float(row["value"])
                if sid not in sids:
                    sids.append(sid)
                fcts.add(key[1])
                hs.add(key[2])
                qs.add(key[3])
        fcts = sorted(fcts)
        quantiles = tuple(sorted(qs))
        n_h = max(hs)
        values = np.full((len(sids), len(fcts), n_h, len(quantiles)), np.nan)
        f_pos = {t: j for j, t in enumerate(fcts)}
        s_pos = {s: i for i, s in enumerate(sids)}
        q_pos = {q: k for k, q in enumerate(quantiles)}
        for (sid, t, h, q), v in cells.items():
            values[s_pos[sid], f_pos[t], h - 1, q_pos[q]] = v
        return cls(sids, np.array(fcts), quantiles, values)


# -- metrics -------------------------------------------------------------


def pinball(y, y_hat, q):
    """Elementwise pinball loss on plain arrays."""
    diff = y - y_hat
    return np.where(diff >= 0, q * diff, (q - 1.0) * diff)


def target_matrix(dataset: SeriesDataset, fcts, n_horizons):
    """actuals[i, j, h] = y[i, fct_j + h + 1]; NaN outside the data."""
    n, t_len = dataset.y.shape
    fcts = np.asarray(fcts)
    tgt = fcts[:, None] + np.arange(1, n_horizons + 1)[None, :]
    valid = tgt < t_len
    out = np.full((n, len(fcts), n_horizons), np.nan)
    out[:, valid] = dataset.y[:, tgt[valid]]
    return out


def normalized_quantile_loss(pred, actual, q, mask=None):
    """2 * sum(pinball) / sum(|y|) over cells where both sides exist."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    ok = np.isfinite(actual) & np.isfinite(pred)
    if mask is not None:
        ok &= mask
    denom = np.abs(actual[ok]).sum()
    if denom == 0.0:
        raise ZeroDivisionError("normalized QL undefined: zero target mass")
    return 2.0 * pinball(actual[ok], pred[ok], q).sum() / denom


def slice_masks(dataset: SeriesDataset, fcts, n_horizons):
    """Cell masks (N, T_f, H) keyed by slice name, from indicator series.

    'promo' marks cells whose target period has any local indicator set;
    'holiday' any global indicator; 'overall' everything.
    """
    fcts = np.asarray(fcts)
    tgt = fcts[:, None] + np.arange(1, n_horizons + 1)[None, :]
    t_ext = dataset.global_ind.shape[0]
    tgt_c = np.clip(tgt, 0, t_ext - 1)
    n = dataset.n_series
    promo = dataset.local_ind.max(axis=2)[:, tgt_c] > 0
    holiday = np.broadcast_to(
        (dataset.global_ind.max(axis=1)[tgt_c] > 0)[None], promo.shape)
    overall = np.ones((n,) + tgt.shape, dtype=bool)
    return {"overall": overall, "promo": promo, "holiday": holiday.copy()}


def sliced_metrics(cube: ForecastCube, dataset: SeriesDataset, cell_mask=None,
                   baseline=None):
    """Per-quantile normalized QL per slice; optionally relative to baseline.

    Returns {slice: {q: value}}; empty slices are reported as absent.
    With a baseline dict of the same shape, values become ratios.
    """
    actual = target_matrix(dataset, cube.fcts, cube.n_horizons)
    masks = slice_masks(dataset, cube.fcts, cube.n_horizons)
    out = {}
    for name, m in masks.items():
        mm = m if cell_mask is None else (m & cell_mask)
        row = {}
        for k, q in enumerate(cube.quantiles):
            sel = mm & np.isfinite(actual)
            if not sel.any():
                continue
            row[q] = normalized_quantile_loss(cube.values[..., k], actual, q, mm)
        if row:
            out[name] = row
    if baseline is not None:
        out = {
            name: {q: v / baseline[name][q] for q, v in row.items()
                   if name in baseline and q in baseline[name]}
            for name, row in out.items()
        }
    return out
