"""Return construction, loss orientation, vacation adjustment and the annual cycle."""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ContractError, DataError

logger = logging.getLogger(__name__)

__all__ = [
    "PriceSeries",
    "ReturnSeries",
    "log_returns",
    "to_loss",
    "to_raw",
    "VacationPolicy",
    "vacation_adjust",
    "SeasonalCycle",
    "cycle_position",
    "seasonal_target",
    "seasonal_decompose",
    "describe",
]

CYCLE = 366
_FEB29 = 59  # zero-based position of 29 February on the 366-day grid


def _as_dates(dates):
    d = np.asarray(dates, dtype="datetime64[D]")
    if d.ndim != 1:
        raise DataError("dates must be one-dimensional")
    if d.size > 1 and np.any(np.diff(d) <= np.timedelta64(0, "D")):
        i = int(np.argmax(np.diff(d) <= np.timedelta64(0, "D")))
        raise DataError(f"dates must be strictly increasing (row {i + 2}: {d[i + 1]})")
    return d


@dataclass
class PriceSeries:
    dates: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        self.dates = _as_dates(self.dates)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.prices.shape != self.dates.shape:
            raise DataError("dates and prices differ in length")
        bad = np.flatnonzero(~(self.prices > 0) | ~np.isfinite(self.prices))
        if bad.size:
            raise DataError(f"non-positive or non-finite price on {self.dates[bad[0]]}")

    def __len__(self):
        return self.prices.size


@dataclass
class ReturnSeries:
    dates: np.ndarray
    values: np.ndarray
    orientation: str = "raw"

    def __post_init__(self):
        self.dates = _as_dates(self.dates)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.dates.shape:
            raise DataError("dates and values differ in length")
        bad = np.flatnonzero(~np.isfinite(self.values))
        if bad.size:
            raise DataError(f"non-finite return on {self.dates[bad[0]]}")
        if self.orientation not in ("raw", "loss"):
            raise ContractError(f"unknown orientation {self.orientation!r}")

    def __len__(self):
        return self.values.size

    def to_frame(self):
        return pd.DataFrame({"date": self.dates, "value": self.values})

    def window(self, start, stop):
        return ReturnSeries(self.dates[start:stop], self.values[start:stop], self.orientation)


def log_returns(prices):
    """Log price differences, dated by the later price."""
    if len(prices) < 2:
        raise DataError("need at least two prices")
    lp = np.log(prices.prices)
    return ReturnSeries(prices.dates[1:], np.diff(lp), "raw")


def to_loss(returns):
    """Flip raw returns to the loss convention (losses are positive)."""
    if returns.orientation != "raw":
        raise ContractError("series is already loss-oriented")
    return ReturnSeries(returns.dates, -returns.values, "loss")


def to_raw(returns):
    if returns.orientation != "loss":
        raise ContractError("series is already raw-oriented")
    return ReturnSeries(returns.dates, -returns.values, "raw")


# ---------------------------------------------------------------------------
# vacation and weekend adjustment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VacationPolicy:
    """Winsorize returns that follow long market closures.

    A return is eligible when at least ``gap_days`` calendar days without
    trading precede it; it is clipped to ``clip`` times the standard
    deviation of the previous ``window`` returns.
    """

    enabled: bool = True
    gap_days: int = 3
    clip: float = 3.0
    window: int = 250
    min_history: int = 20


def _closure_lengths(dates, calendar):
    gaps = (np.diff(dates) / np.timedelta64(1, "D")).astype(int) - 1
    if calendar is None:
        return gaps
    cal = _as_dates(calendar)
    missing = np.setdiff1d(dates, cal)
    if missing.size:
        raise DataError(f"date {missing[0]} is not a trading day of the calendar")
    pos = np.searchsorted(cal, dates)
    if np.any(np.diff(pos) != 1):
        i = int(np.argmax(np.diff(pos) != 1))
        raise DataError(f"calendar trading days between {dates[i]} and {dates[i + 1]} have no return")
    return gaps


def vacation_adjust(returns, policy=None, calendar=None):
    """Apply the post-closure winsorization.

    Returns
    -------
    adjusted : ReturnSeries
    log : pandas.DataFrame
        One row per modified return: ``date, original, adjusted, rule``.
    """
    policy = policy or VacationPolicy()
    empty = pd.DataFrame(columns=["date", "original", "adjusted", "rule"])
    if not policy.enabled or len(returns) < 2:
        return ReturnSeries(returns.dates, returns.values.copy(), returns.orientation), empty
    gaps = _closure_lengths(returns.dates, calendar)
    x = returns.values
    out = x.copy()
    rows = []
    for i in np.flatnonzero(gaps >= policy.gap_days) + 1:
        hist = x[max(0, i - policy.window) : i]
        if hist.size < policy.min_history:
            continue
        sd = float(np.std(hist, ddof=1))
        bound = policy.clip * sd
        clipped = min(max(x[i], -bound), bound)
        if clipped != x[i]:
            out[i] = clipped
            rule = f"gap>={policy.gap_days}d clip {policy.clip:g}sd/{policy.window}"
            rows.append((returns.dates[i], float(x[i]), clipped, rule))
    log = pd.DataFrame(rows, columns=empty.columns) if rows else empty
    if rows:
        logger.info("vacation adjustment modified %d returns", len(rows))
    return ReturnSeries(returns.dates, out, returns.orientation), log


# ---------------------------------------------------------------------------
# 366-day cycle
# ---------------------------------------------------------------------------


def cycle_position(dates):
    """Zero-based day-of-cycle on a 366-day grid where 29 February is slot 59.

    In non-leap years every day from 1 March on is shifted by one so that
    each calendar date keeps the same position across years.
    """
    idx = pd.DatetimeIndex(np.asarray(dates, dtype="datetime64[D]"))
    doy = idx.dayofyear.to_numpy() - 1
    shift = (~idx.is_leap_year) & (doy >= _FEB29)
    return doy + shift.astype(int)


def _grid(dates, values):
    """Spread values over a gap-free 366-per-year grid, zero where no trading."""
    years = pd.DatetimeIndex(dates).year.to_numpy()
    pos = cycle_position(dates)
    y0 = years[0]
    flat = (years - y0) * CYCLE + pos
    first, last = flat[0], flat[-1]
    grid = np.zeros(last - first + 1)
    grid[flat - first] = values
    positions = (np.arange(first, last + 1)) % CYCLE
    return grid, positions


def _centered_ma(x, period):
    """Centered moving average; even periods use half weights on both ends."""
    if period % 2:
        w = np.full(period, 1.0 / period)
    else:
        w = np.full(period + 1, 1.0 / period)
        w[0] = w[-1] = 0.5 / period
    h = w.size // 2
    trend = np.full(x.size, np.nan)
    if x.size >= w.size:
        trend[h : x.size - h] = np.convolve(x, w, mode="valid")
    return trend


@dataclass(frozen=True)
class SeasonalCycle:
    """Mean-zero 366-value annual pattern indexed by :func:`cycle_position`."""

    values: np.ndarray
    target: str = "log_abs"
    method: str = "moving_average"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (CYCLE,) or not np.all(np.isfinite(v)):
            raise DataError("a cycle holds 366 finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def values_for(self, dates):
        return self.values[cycle_position(dates)]

    @classmethod
    def zero(cls):
        return cls(np.zeros(CYCLE), "none", "none")

    def to_frame(self):
        return pd.DataFrame({"position": np.arange(1, CYCLE + 1), "q": self.values})


def seasonal_target(returns, target="log_abs", eps=1e-8):
    """Series to decompose; the log target is demeaned so a zero fill is neutral."""
    x = returns.values
    if target == "log_abs":
        y = np.log(np.abs(x - x.mean()) + eps)
        return y - y.mean()
    if target == "raw":
        return x.copy()
    raise DataError(f"unknown seasonal target {target!r}")


def seasonal_decompose(returns, target="log_abs", method="moving_average", eps=1e-8):
    """Estimate the annual cycle of a daily series.

    Parameters
    ----------
    returns : ReturnSeries
    target : {"log_abs", "raw"}
        Series to decompose: ``log(|r - mean| + eps)`` demeaned over trading
        days, or the returns as they are.
    method : {"moving_average", "direct"}
        Remove a centered 366-day moving-average trend before averaging by
        position, or average the target by position directly.

    Non-trading days and the 29 February slot of non-leap years enter the
    grid as zeros.  The returned cycle is centred to mean zero.
    """
    if len(returns) < 2:
        raise DataError("series too short for a seasonal decomposition")
    y = seasonal_target(returns, target, eps)
    grid, positions = _grid(returns.dates, y)
    if grid.size < 2 * CYCLE:
        raise DataError(f"seasonal decomposition needs at least {2 * CYCLE} days of span, got {grid.size}")
    if method == "moving_average":
        resid = grid - _centered_ma(grid, CYCLE)
    elif method == "direct":
        resid = grid
    else:
        raise DataError(f"unknown seasonal method {method!r}")
    ok = np.isfinite(resid)
    sums = np.bincount(positions[ok], weights=resid[ok], minlength=CYCLE)
    counts = np.bincount(positions[ok], minlength=CYCLE)
    cycle = np.divide(sums, counts, out=np.zeros(CYCLE), where=counts > 0)
    cycle -= cycle.mean()
    return SeasonalCycle(cycle, target, method)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def describe(returns, min_obs=30):
    """Sample summary of a return series.

    ``skew`` and ``kurtosis`` (excess) are NaN and ``degenerate`` is set
    when the series has zero variance.
    """
    x = returns.values
    if x.size < min_obs:
        raise DataError(f"need at least {min_obs} observations, got {x.size}")
    sd = float(np.std(x, ddof=1))
    degenerate = sd == 0.0
    return {
        "n": int(x.size),
        "min": float(x.min()),
        "max": float(x.max()),
        "mean": float(x.mean()),
        "sd": sd,
        "skew": math.nan if degenerate else float(stats.skew(x, bias=False)),
        "kurtosis": math.nan if degenerate else float(stats.kurtosis(x, bias=False)),
        "degenerate": degenerate,
    }
