"""Forecast-evolution diagnostics for multi-horizon quantile forecasts.

For a fixed (series, target period T) the forecasts announced at successive
FCTs imply a coverage process p_t: the probability, under a gamma
distribution fitted to the announced (q50, q90) pair, that the realized
target falls at or below the threshold tau announced at the first FCT.
If forecasts revise efficiently, p_t is a martingale and its quadratic
variation Q_s = sum_{t<=s} (p_t - p_{t-1})^2 satisfies E[Q_T] = pi(1 - pi).
The compensated process V_t = Q_t - (p_t - pi)^2 is then flat near zero;
excess forecast volatility shows up as V_t drifting above zero.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np
from scipy.stats import norm

from .data import DataError
from .gamma import FitRangeError, fit_gamma_from_quantiles, gamma_cdf, gamma_ppf

__all__ = [
    "DiagnosticTrajectory",
    "VolatilityReport",
    "ExclusionStats",
    "TrajectoryExcluded",
    "GapError",
    "coverage_process",
    "build_trajectories",
    "aggregate_volatility",
    "diagnose",
    "martingale_fixture",
]


class GapError(DataError):
    """The FCT chain for a trajectory has a hole; we never interpolate."""


class TrajectoryExcluded(ValueError):
    """Trajectory cannot be diagnosed (crossed or non-positive quantiles)."""

    def __init__(self, reason, message):
        super().__init__(message)
        self.reason = reason


@dataclasses.dataclass
class DiagnosticTrajectory:
    """Coverage process for one (series, target period) pair.

    p, q_var and v have one entry per FCT plus a terminal entry where the
    coverage collapses to the realized indicator I(Y_T <= tau). Entry j
    corresponds to lead time target - fcts[j]; the terminal entry to lead 0.
    """

    series_id: str
    target: int
    tau: float
    pi: float                    # p_0, the coverage announced at the first FCT
    fcts: np.ndarray             # (n,) FCT indices, consecutive, fcts[-1] = target - 1
    p: np.ndarray                # (n + 1,) coverage probabilities, last = indicator
    q_var: np.ndarray            # (n + 1,) quadratic variation, q_var[0] = 0
    v: np.ndarray                # (n + 1,) compensated process
    indicator: float             # I(Y_T <= tau)
    demand: float                # realized actual, used for demand weighting

    @property
    def lead_times(self):
        """Lead time of each entry of p / q_var / v (terminal entry is 0)."""
        return np.concatenate([self.target - self.fcts, [0]])


@dataclasses.dataclass
class VolatilityReport:
    """Per-lead-time weighted mean of V with a 95% bootstrap CI band."""

    lead_times: np.ndarray
    mean_v: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    weighting: str
    n_trajectories: int
    n_bootstrap: int

    def __post_init__(self):
        if np.any(self.ci_lo > self.mean_v) or np.any(self.mean_v > self.ci_hi):
            raise ValueError("CI band must bracket the mean at every lead time")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lead_time", "mean_V", "ci_lo", "ci_hi"])
            for i, lead in enumerate(self.lead_times):
                w.writerow([int(lead), repr(float(self.mean_v[i])),
                            repr(float(self.ci_lo[i])), repr(float(self.ci_hi[i]))])

    @classmethod
    def from_csv(cls, path, weighting="unknown", n_trajectories=0,
                 n_bootstrap=0):
        rows = []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rows.append((int(row["lead_time"]), float(row["mean_V"]),
                             float(row["ci_lo"]), float(row["ci_hi"])))
        rows.sort()
        arr = np.array(rows, dtype=float)
        return cls(arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3],
                   weighting, n_trajectories, n_bootstrap)


@dataclasses.dataclass
class ExclusionStats:
    """How many candidate trajectories were dropped, and why."""

    n_total: int = 0
    n_crossing: int = 0
    n_nonpositive: int = 0
    n_range: int = 0

    @property
    def n_kept(self):
        return self.n_total - self.n_crossing - self.n_nonpositive - self.n_range

    @property
    def exclusion_rate(self):
        return 0.0 if self.n_total == 0 else (
            (self.n_total - self.n_kept) / self.n_total)


# -- single trajectory ---------------------------------------------------


def _fill_processes(p, pi):
    diffs = np.diff(p)
    q_var = np.concatenate([[0.0], np.cumsum(diffs ** 2)])
    v = q_var - (p - pi) ** 2
    return q_var, v


def coverage_process(q50, q90, actual, pi=0.9, fcts=None, series_id="",
                     target=None, tau=None):
    """Diagnostic trajectory for one series and one target period.

    q50 / q90 are the forecasts for that target at successive FCTs, in FCT
    order. The threshold tau is the level-pi forecast at the first FCT
    (override with an explicit tau for other levels); the terminal coverage
    is the realized indicator I(actual <= tau).
    """
    q50 = np.asarray(q50, dtype=float)
    q90 = np.asarray(q90, dtype=float)
    if q50.ndim != 1 or q50.shape != q90.shape or q50.size < 1:
        raise ValueError("q50 and q90 must be equal-length 1-D sequences")
    if fcts is None:
        fcts = np.arange(q50.size)
    else:
        fcts = np.asarray(fcts, dtype=int)
        if fcts.size != q50.size:
            raise ValueError("fcts must align with the forecast sequences")
        if np.any(np.diff(fcts) != 1):
            raise GapError(
                f"FCT chain for series {series_id!r} has gaps: {fcts.tolist()}")
    if target is None:
        target = int(fcts[-1]) + 1
    if np.any(q50 <= 0):
        raise TrajectoryExcluded(
            "nonpositive", f"non-positive q50 for series {series_id!r}")
    if np.any(q90 <= q50):
        raise TrajectoryExcluded(
            "crossing", f"crossed quantiles for series {series_id!r}")
    if tau is None:
        if pi == 0.5:
            tau = float(q50[0])
        elif pi == 0.9:
            tau = float(q90[0])
        else:
            raise ValueError(
                "tau must be given explicitly for levels other than 0.5 / 0.9")
    k, theta = fit_gamma_from_quantiles(q50, q90)
    p = np.empty(q50.size + 1)
    p[:-1] = gamma_cdf(np.full(q50.size, tau), k, theta)
    indicator = float(actual <= tau)
    p[-1] = indicator
    pi_0 = float(p[0])
    q_var, v = _fill_processes(p, pi_0)
    return DiagnosticTrajectory(
        series_id=str(series_id), target=int(target), tau=float(tau),
        pi=pi_0, fcts=fcts, p=p, q_var=q_var, v=v, indicator=indicator,
        demand=float(actual))


# -- cube-driven batch ---------------------------------------------------


def build_trajectories(cube, actuals, pi=0.9):
    """All diagnosable trajectories implied by a forecast cube.

    actuals is (N, T_total) aligned with cube.series_ids; targets are the
    periods whose full FCT chain (leads H..1) lies inside cube.fcts and
    whose actual is observed. Returns (trajectories, ExclusionStats).
    """
    if 0.5 not in cube.quantiles or 0.9 not in cube.quantiles:
        raise DataError("diagnostics require 0.5 and 0.9 quantile forecasts")
    i50 = cube.quantiles.index(0.5)
    i90 = cube.quantiles.index(0.9)
    actuals = np.asarray(actuals, dtype=float)
    n_h = cube.n_horizons
    fct_pos = {int(t): j for j, t in enumerate(cube.fcts)}
    stats = ExclusionStats()
    out = []
    for target in range(int(cube.fcts[0]) + n_h, int(cube.fcts[-1]) + 2):
        chain = list(range(target - n_h, target))
        if any(t not in fct_pos for t in chain):
            continue
        if target >= actuals.shape[1]:
            continue
        j_idx = np.array([fct_pos[t] for t in chain])
        h_idx = np.array([target - t - 1 for t in chain])
        q50 = cube.values[:, j_idx, h_idx, i50]   # (N, H)
        q90 = cube.values[:, j_idx, h_idx, i90]
        y = actuals[:, target]
        for i, sid in enumerate(cube.series_ids):
            if not np.isfinite(y[i]):
                continue
            stats.n_total += 1
            try:
                out.append(coverage_process(
                    q50[i], q90[i], y[i], pi=pi, fcts=np.array(chain),
                    series_id=sid, target=target))
            except TrajectoryExcluded as exc:
                if exc.reason == "crossing":
                    stats.n_crossing += 1
                else:
                    stats.n_nonpositive += 1
            except FitRangeError:
                stats.n_range += 1
    return out, stats


# -- aggregation ---------------------------------------------------------


def _v_matrix(trajectories):
    leads = [t.lead_times for t in trajectories]
    max_lead = max(int(ld.max()) for ld in leads)
    v_mat = np.full((len(trajectories), max_lead + 1), np.nan)
    for i, (traj, ld) in enumerate(zip(trajectories, leads)):
        v_mat[i, ld] = traj.v
    return v_mat, np.arange(max_lead + 1)


def _weighted_mean(v_mat, weights):
    present = np.isfinite(v_mat)
    w = present * weights[:, None]
    denom = w.sum(axis=0)
    num = np.where(present, v_mat, 0.0) * weights[:, None]
    return np.where(denom > 0, num.sum(axis=0) / np.maximum(denom, 1e-300),
                    np.nan)


def aggregate_volatility(trajectories, weighting="uniform", b=1000, seed=0):
    """Per-lead-time weighted mean of V with a percentile bootstrap CI.

    The bootstrap resamples whole series (all trajectories of a series move
    together) to respect within-series dependence. Demand weighting uses the
    realized actual of each trajectory's target period, normalized.
    """
    if len(trajectories) == 0:
        raise DataError("no trajectories to aggregate")
    if len(trajectories) < 2:
        raise DataError("need at least two trajectories for a bootstrap CI")
    if weighting not in ("uniform", "demand"):
        raise ValueError(f"unknown weighting mode: {weighting}")
    if b < 100:
        raise ValueError("bootstrap needs at least 100 replicates")
    v_mat, lead_times = _v_matrix(trajectories)
    if weighting == "demand":
        weights = np.array([t.demand for t in trajectories])
        if np.any(weights < 0) or weights.sum() <= 0:
            raise DataError("demand weighting needs non-negative actuals "
                            "with positive total")
    else:
        weights = np.ones(len(trajectories))
    weights = weights / weights.sum()

    series = []
    members = {}
    for i, t in enumerate(trajectories):
        if t.series_id not in members:
            members[t.series_id] = []
            series.append(t.series_id)
        members[t.series_id].append(i)
    member_idx = [np.array(members[s]) for s in series]

    mean_v = _weighted_mean(v_mat, weights)
    rng = np.random.default_rng(seed)
    reps = np.empty((b, lead_times.size))
    for r in range(b):
        pick = rng.integers(0, len(series), size=len(series))
        idx = np.concatenate([member_idx[s] for s in pick])
        reps[r] = _weighted_mean(v_mat[idx], weights[idx])
    ci_lo = np.nanpercentile(reps, 2.5, axis=0)
    ci_hi = np.nanpercentile(reps, 97.5, axis=0)
    # a percentile interval can miss the full-sample mean by resampling
    # noise; widen so the band always brackets the point estimate
    ci_lo = np.minimum(ci_lo, mean_v)
    ci_hi = np.maximum(ci_hi, mean_v)
    return VolatilityReport(
        lead_times=lead_times, mean_v=mean_v, ci_lo=ci_lo, ci_hi=ci_hi,
        weighting=weighting, n_trajectories=len(trajectories), n_bootstrap=b)


def diagnose(cube, dataset, pi=0.9, weighting="demand", b=1000, seed=0):
    """Cube + dataset -> (VolatilityReport, ExclusionStats)."""
    trajectories, stats = build_trajectories(cube, dataset.y, pi=pi)
    report = aggregate_volatility(trajectories, weighting=weighting, b=b,
                                  seed=seed)
    return report, stats


# -- calibrated oracle fixture -------------------------------------------


def martingale_fixture(n_paths, n_steps, pi=0.9, shape=2.0, jitter=0.0,
                       seed=0, tau=1.0):
    """Simulated forecaster whose coverage process is an exact martingale.

    A latent Gaussian random walk X_t (X_0 = 0) drives the demand signal;
    the Bayesian coverage of the threshold is p_t = Phi((theta* - X_t) /
    sqrt(T - t)) with theta* = Phi^{-1}(pi) sqrt(T), and the forecaster
    announces the gamma quantile pair with fixed shape whose CDF at tau
    reproduces p_t exactly. Refitting from (q50, q90) therefore recovers
    p_t, and E[Q_T] = pi (1 - pi) holds exactly in expectation. A positive
    jitter multiplies each FCT's quantile pair by an iid lognormal factor,
    breaking the martingale property without crossing the quantiles.

    Returns (q50, q90, actuals, tau) with q50 / q90 of shape
    (n_paths, n_steps) and actuals of shape (n_paths,).
    """
    rng = np.random.default_rng(seed)
    steps = rng.standard_normal((n_paths, n_steps))
    x = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(steps, axis=1)],
                       axis=1)                      # (n_paths, n_steps + 1)
    theta_star = norm.ppf(pi) * np.sqrt(n_steps)
    t = np.arange(n_steps)
    remaining = np.sqrt(n_steps - t)                # sqrt(T - t), t < T
    p = norm.cdf((theta_star - x[:, :n_steps]) / remaining)
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    theta = tau / gamma_ppf(p, shape)
    q50 = theta * gamma_ppf(0.5, shape)
    q90 = theta * gamma_ppf(0.9, shape)
    if jitter > 0:
        factor = np.exp(rng.normal(0.0, jitter, size=q50.shape))
        q50 = q50 * factor
        q90 = q90 * factor
    actuals = tau * np.exp(x[:, -1] - theta_star)
    return q50, q90, actuals, tau
