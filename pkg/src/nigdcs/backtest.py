"""VaR backtests, score diagnostics and the model confidence set.

All coverage tests use the convention ``0 * ln 0 = 0``; a test whose
likelihood touches an empty cell carries ``degenerate=True`` instead of
failing.  ``level`` is always the VaR confidence level, so the violation
probability under the null is ``1 - level``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import special, stats

from .errors import DataError, DomainError

logger = logging.getLogger(__name__)

__all__ = [
    "TestResult",
    "CcResult",
    "VarForecastSeries",
    "lruc",
    "lrcc",
    "dq",
    "lm_score_test",
    "pinball_loss",
    "stationary_bootstrap",
    "McsResult",
    "mcs",
    "BacktestReport",
    "backtest",
    "evaluate",
    "format_table",
    "check_alignment",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = [
    "model", "level", "lruc_stat", "lruc_p", "lrcc_stat", "lrcc_p", "dq_stat", "dq_p", "mcs_rank", "mcs_p",
]


class TestResult(NamedTuple):
    statistic: float
    p_value: float
    degenerate: bool = False


class CcResult(NamedTuple):
    statistic: float
    p_value: float
    lruc: float
    lr_ind: float
    degenerate: bool = False


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")


def _hits(hits):
    h = np.asarray(hits)
    if h.ndim != 1:
        raise DataError("hit sequence must be one-dimensional")
    if h.dtype != bool:
        if not np.all(np.isin(h, (0, 1))):
            raise DataError("hits must be boolean or 0/1")
        h = h.astype(bool)
    return h


@dataclass
class VarForecastSeries:
    """Dated VaR forecasts at one level on the loss scale."""

    dates: np.ndarray
    level: float
    var_forecast: np.ndarray
    realized_loss: np.ndarray

    def __post_init__(self):
        _check_level(self.level)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.var_forecast = np.asarray(self.var_forecast, dtype=float)
        self.realized_loss = np.asarray(self.realized_loss, dtype=float)
        n = self.dates.size
        if self.var_forecast.shape != (n,) or self.realized_loss.shape != (n,):
            raise DataError("dates, forecasts and realized losses differ in length")
        if n > 1 and np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise DataError("forecast dates must be strictly increasing")

    @property
    def hits(self):
        return self.realized_loss > self.var_forecast

    def __len__(self):
        return self.dates.size

    def to_frame(self):
        return pd.DataFrame(
            {
                "date": self.dates,
                "level": self.level,
                "var_forecast": self.var_forecast,
                "realized_loss": self.realized_loss,
                "hit": self.hits.astype(int),
            }
        )

    @classmethod
    def from_frame(cls, df):
        levels = df["level"].unique()
        if levels.size != 1:
            raise DataError("a forecast frame must hold a single level")
        fs = cls(df["date"].to_numpy(), float(levels[0]), df["var_forecast"], df["realized_loss"])
        if "hit" in df and not np.array_equal(df["hit"].to_numpy().astype(bool), fs.hits):
            raise DataError("hit column disagrees with realized_loss > var_forecast")
        return fs


# ---------------------------------------------------------------------------
# coverage tests
# ---------------------------------------------------------------------------


def _bernoulli_ll(n_hit, n_miss, p):
    return special.xlogy(n_hit, p) + special.xlogy(n_miss, 1.0 - p)


def lruc(hits, level):
    """Unconditional coverage likelihood-ratio test, chi-square(1)."""
    _check_level(level)
    h = _hits(hits)
    T = h.size
    if T < 1:
        raise DataError("empty hit sequence")
    N = int(h.sum())
    p0 = 1.0 - level
    if abs(N - p0 * T) <= 1e-9 * T:
        stat = 0.0
    else:
        stat = -2.0 * (_bernoulli_ll(N, T - N, p0) - _bernoulli_ll(N, T - N, N / T))
        stat = max(stat, 0.0)
    return TestResult(stat, float(stats.chi2.sf(stat, 1)), N in (0, T))


def _transitions(h):
    prev, nxt = h[:-1], h[1:]
    n00 = int(np.sum(~prev & ~nxt))
    n01 = int(np.sum(~prev & nxt))
    n10 = int(np.sum(prev & ~nxt))
    n11 = int(np.sum(prev & nxt))
    return n00, n01, n10, n11


def lr_independence(hits):
    """First-order Markov independence statistic and its degeneracy flag."""
    h = _hits(hits)
    if h.size < 2:
        raise DataError("independence test needs at least two observations")
    n00, n01, n10, n11 = _transitions(h)
    row0, row1 = n00 + n01, n10 + n11
    total = row0 + row1
    pi = (n01 + n11) / total
    pi01 = n01 / row0 if row0 else 0.0
    pi11 = n11 / row1 if row1 else 0.0
    l0 = _bernoulli_ll(n01 + n11, n00 + n10, pi)
    l1 = _bernoulli_ll(n01, n00, pi01) + _bernoulli_ll(n11, n10, pi11)
    stat = max(-2.0 * (l0 - l1), 0.0)
    degenerate = min(row0, row1) == 0 or n01 + n11 == 0 or n00 + n10 == 0
    return stat, degenerate


def lrcc(hits, level):
    """Conditional coverage test: LRUC plus the Markov independence term, chi-square(2)."""
    _check_level(level)
    h = _hits(hits)
    if h.size < 2:
        raise DataError("conditional coverage needs at least two observations")
    uc = lruc(h, level)
    ind, deg = lr_independence(h)
    stat = uc.statistic + ind
    return CcResult(stat, float(stats.chi2.sf(stat, 2)), uc.statistic, ind, deg or uc.degenerate)


def _ols(y, X):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise DataError(f"singular design: rank {rank} < {X.shape[1]} regressors")
    b, *_ = np.linalg.lstsq(X, y, rcond=None)
    return b


def dq(hits, var_forecasts, level, lags=4):
    """Dynamic quantile test with ``lags`` lagged hits and the current VaR.

    ``DQ = b' X'X b / (level (1 - level))`` is chi-square with ``lags + 2``
    degrees of freedom under correct conditional coverage.
    """
    _check_level(level)
    h = _hits(hits)
    v = np.asarray(var_forecasts, dtype=float)
    T = h.size
    if v.shape != (T,):
        raise DataError("hits and VaR forecasts differ in length")
    if T <= lags + 2:
        raise DataError(f"DQ test needs more than {lags + 2} observations")
    dev = h.astype(float) - (1.0 - level)
    y = dev[lags:]
    cols = [np.ones(T - lags)] + [dev[lags - k : T - k] for k in range(1, lags + 1)] + [v[lags:]]
    X = np.column_stack(cols)
    b = _ols(y, X)
    Xb = X @ b
    stat = float(Xb @ Xb / (level * (1.0 - level)))
    return TestResult(stat, float(stats.chi2.sf(stat, lags + 2)))


def lm_score_test(score_path, lags=4):
    """Serial-correlation test of a score sequence: ``n R^2`` from an AR(lags) fit.

    ``n = T - lags`` is the number of regression rows.
    """
    s = np.asarray(score_path, dtype=float)
    T = s.size
    if T <= lags + 2:
        raise DataError(f"LM test needs more than {lags + 2} observations")
    if not np.all(np.isfinite(s)):
        raise DataError("score path contains non-finite values")
    if np.ptp(s) == 0:
        raise DataError("score path is constant")
    y = s[lags:]
    X = np.column_stack([np.ones(T - lags)] + [s[lags - k : T - k] for k in range(1, lags + 1)])
    b = _ols(y, X)
    resid = y - X @ b
    tss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - resid @ resid / tss if tss > 0 else 0.0
    stat = float((T - lags) * r2)
    return TestResult(stat, float(stats.chi2.sf(stat, lags)))


def pinball_loss(realized_loss, var_forecast, level):
    """Quantile loss ``(1[x > q] - (1 - level)) (x - q)``; elementwise on arrays."""
    _check_level(level)
    x = np.asarray(realized_loss, dtype=float)
    q = np.asarray(var_forecast, dtype=float)
    out = ((x > q).astype(float) - (1.0 - level)) * (x - q)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# model confidence set
# ---------------------------------------------------------------------------


def stationary_bootstrap(T, block, reps, rng):
    """``reps x T`` resampling indices with geometric blocks of mean length ``block``."""
    if block < 1:
        raise DomainError("expected block length must be at least 1")
    p = 1.0 / block
    idx = np.empty((reps, T), dtype=np.int64)
    idx[:, 0] = rng.integers(0, T, reps)
    fresh = rng.random((reps, T)) < p
    starts = rng.integers(0, T, (reps, T))
    for t in range(1, T):
        idx[:, t] = np.where(fresh[:, t], starts[:, t], (idx[:, t - 1] + 1) % T)
    return idx


@dataclass
class McsResult:
    """MCS p-values and ranks; rank 1 is the last model standing."""

    names: list
    p_values: np.ndarray
    ranks: np.ndarray
    mean_loss: np.ndarray
    alpha: float
    elimination_order: list = field(default_factory=list)

    @property
    def included(self):
        return self.p_values >= self.alpha

    @property
    def surviving(self):
        return [n for n, keep in zip(self.names, self.included) if keep]

    def to_frame(self):
        return pd.DataFrame(
            {
                "model": self.names,
                "mcs_rank": self.ranks,
                "mcs_p": self.p_values,
                "mean_loss": self.mean_loss,
                "included": self.included,
            }
        )


def _t_matrix(dbar, var):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = dbar / np.sqrt(var)
    zero = var <= 0
    t[zero & (dbar == 0)] = 0.0
    t[zero & (dbar > 0)] = np.inf
    t[zero & (dbar < 0)] = -np.inf
    return t


def mcs(losses, alpha=0.15, block=10, reps=5000, seed=0, names=None, min_obs=50):
    """Model confidence set with the range statistic and stationary bootstrap.

    Parameters
    ----------
    losses : array_like, shape (T, M)
        Loss of each model per period; smaller is better.
    alpha : float
        Size of the set: models with MCS p-value ``>= alpha`` are included.
    block, reps, seed
        Expected block length, bootstrap replications and generator seed.
    """
    L = np.asarray(losses, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    T, M = L.shape
    if M < 1:
        raise DataError("no models supplied")
    if T < min_obs:
        raise DataError(f"MCS needs at least {min_obs} periods, got {T}")
    if reps < 1000:
        raise DomainError("MCS needs at least 1000 bootstrap replications")
    if not np.all(np.isfinite(L)):
        raise DataError("losses contain non-finite values")
    names = list(names) if names is not None else [f"model_{i + 1}" for i in range(M)]
    if len(names) != M:
        raise DataError("names do not match the number of loss columns")
    mean = L.mean(axis=0)
    pvals = np.ones(M)
    ranks = np.ones(M, dtype=int)
    if M == 1:
        return McsResult(names, pvals, ranks, mean, alpha, [])

    rng = np.random.default_rng(seed)
    idx = stationary_bootstrap(T, block, reps, rng)
    boot_mean = np.stack([L[:, m][idx].mean(axis=1) for m in range(M)], axis=1)
    dev = boot_mean - mean

    alive = list(range(M))
    order = []
    running = 0.0
    while len(alive) > 1:
        a = np.array(alive)
        dbar = mean[a][:, None] - mean[a][None, :]
        ddev = dev[:, a][:, :, None] - dev[:, a][:, None, :]
        var = np.mean(ddev**2, axis=0)
        t = _t_matrix(dbar, var)
        stat = np.max(np.abs(t))
        with np.errstate(divide="ignore", invalid="ignore"):
            tb = np.abs(ddev) / np.sqrt(var)
        tb[:, var <= 0] = 0.0
        boot_stat = tb.reshape(reps, -1).max(axis=1)
        p = float(np.mean(boot_stat >= stat))
        running = max(running, p)
        worst = np.max(t, axis=1)
        cand = np.flatnonzero(worst == worst.max())
        drop = int(a[cand[np.argmax(mean[a][cand])]])
        pvals[drop] = running
        ranks[drop] = len(alive)
        order.append(names[drop])
        alive.remove(drop)
    pvals[alive[0]] = 1.0
    ranks[alive[0]] = 1
    return McsResult(names, pvals, ranks, mean, alpha, order)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class BacktestReport:
    """Coverage and independence tests of one model at one or more levels."""

    model: str
    table: pd.DataFrame


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except DataError as exc:
        logger.warning("%s skipped: %s", fn.__name__, exc)
        return None


def backtest(series, model="model", lags=4):
    """Run LRUC, LRCC and DQ for each :class:`VarForecastSeries` in ``series``."""
    rows = []
    for fs in series:
        h = fs.hits
        uc = lruc(h, fs.level)
        cc = lrcc(h, fs.level)
        d = _safe(dq, h, fs.var_forecast, fs.level, lags)
        rows.append(
            {
                "model": model,
                "level": fs.level,
                "n": len(fs),
                "violations": int(h.sum()),
                "expected": (1.0 - fs.level) * len(fs),
                "lruc_stat": uc.statistic,
                "lruc_p": uc.p_value,
                "lrcc_stat": cc.statistic,
                "lrcc_p": cc.p_value,
                "dq_stat": d.statistic if d else math.nan,
                "dq_p": d.p_value if d else math.nan,
                "degenerate": uc.degenerate or cc.degenerate,
            }
        )
    return BacktestReport(model, pd.DataFrame(rows))


def check_alignment(forecasts, levels=None):
    """Validate ``{model: {level: VarForecastSeries}}`` and return the levels to use."""
    if not forecasts:
        raise DataError("no models to evaluate")
    models = list(forecasts)
    if levels is None:
        levels = sorted(forecasts[models[0]])
    for m in models:
        for lv in levels:
            if lv not in forecasts[m]:
                raise DataError(f"model {m} has no forecasts at level {lv}")
            ref = forecasts[models[0]][lv]
            fs = forecasts[m][lv]
            if not np.array_equal(fs.dates, ref.dates):
                raise DataError(f"forecast dates of {m} at level {lv} are misaligned with {models[0]}")
            if not np.allclose(fs.realized_loss, ref.realized_loss, rtol=0, atol=1e-12):
                raise DataError(f"realized losses of {m} at level {lv} differ from {models[0]}")
    return list(levels)


def evaluate(forecasts, levels=None, alpha=0.15, block=10, reps=5000, seed=0, lags=4):
    """Backtest every model and compare them with the MCS at each level.

    Parameters
    ----------
    forecasts : dict
        ``{model: {level: VarForecastSeries}}`` with identical dates across models.

    Returns
    -------
    reports : dict of BacktestReport
    mcs_results : dict
        ``{level: McsResult}`` on pinball loss.
    table : pandas.DataFrame
        One row per (model, level) with :data:`REPORT_COLUMNS`.
    """
    levels = check_alignment(forecasts, levels)
    models = list(forecasts)
    reports = {m: backtest([forecasts[m][lv] for lv in levels], m, lags) for m in models}
    results = {}
    n_obs = len(forecasts[models[0]][levels[0]])
    for lv in levels:
        if n_obs < 50:
            logger.warning("MCS skipped: %d forecasts are fewer than 50", n_obs)
            continue
        loss = np.column_stack(
            [pinball_loss(forecasts[m][lv].realized_loss, forecasts[m][lv].var_forecast, lv) for m in models]
        )
        results[lv] = mcs(loss, alpha, block, reps, seed, names=models)
    rows = []
    for m in models:
        for _, r in reports[m].table.iterrows():
            res = results.get(r["level"])
            rank, p = math.nan, math.nan
            if res is not None:
                i = res.names.index(m)
                rank, p = int(res.ranks[i]), float(res.p_values[i])
            rows.append({**{k: r[k] for k in REPORT_COLUMNS[:8]}, "mcs_rank": rank, "mcs_p": p})
    return reports, results, pd.DataFrame(rows, columns=REPORT_COLUMNS)


def format_table(table, digits=3):
    """Appendix-style text table: ``stat (p)`` cells per test."""
    out = pd.DataFrame({"model": table["model"], "level": table["level"]})
    for test in ("lruc", "lrcc", "dq"):
        out[test.upper()] = [
            "nan" if not np.isfinite(s) else f"{s:.{digits}f} ({p:.{digits}f})"
            for s, p in zip(table[f"{test}_stat"], table[f"{test}_p"])
        ]
    if "mcs_rank" in table:
        out["MCS rank"] = table["mcs_rank"]
        out["MCS p"] = [f"{p:.{digits}f}" for p in table["mcs_p"]]
    return out.to_string(index=False)
