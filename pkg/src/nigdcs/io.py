"""CSV and JSON readers and writers, and intraday bar resampling."""

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .dataprep import PriceSeries, ReturnSeries
from .errors import DataError
from .intraday import IntradayPanel

__all__ = [
    "Session",
    "read_daily_prices",
    "read_intraday_prices",
    "resample_bars",
    "write_csv",
    "write_text",
    "write_json",
    "read_json",
    "read_returns",
    "write_returns",
    "read_panel",
    "write_panel",
]


def _atomic(path, writer):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(df, path):
    return _atomic(path, lambda fh: df.to_csv(fh, index=False, lineterminator="\n"))


def write_text(text, path):
    return _atomic(path, lambda fh: fh.write(text))


def write_json(obj, path):
    return _atomic(path, lambda fh: fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n"))


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found")
    return json.loads(path.read_text())


def _read(path, columns):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from None
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    return df


def _parse(df, col, path, conv):
    out = []
    for i, raw in enumerate(df[col]):
        try:
            out.append(conv(raw))
        except (ValueError, TypeError):
            raise DataError(f"{path}: row {i + 2}: cannot parse {col} {raw!r}") from None
    return out


def _date(raw):
    return np.datetime64(raw.strip(), "D")


def read_daily_prices(path):
    """``date, close`` file into a :class:`PriceSeries`."""
    df = _read(path, ["date", "close"])
    dates = np.array(_parse(df, "date", path, _date), dtype="datetime64[D]")
    close = np.array(_parse(df, "close", path, float))
    for i in range(1, dates.size):
        if dates[i] <= dates[i - 1]:
            raise DataError(f"{path}: row {i + 2}: date {dates[i]} is not after {dates[i - 1]}")
    bad = np.flatnonzero(~(close > 0) | ~np.isfinite(close))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 2}: close must be a positive number")
    return PriceSeries(dates, close)


@dataclass(frozen=True)
class Session:
    """Trading session as a list of ``(open, close)`` clock intervals in minutes."""

    intervals: tuple

    @classmethod
    def parse(cls, spec):
        out = []
        for part in spec.split(","):
            try:
                a, b = part.strip().split("-")
                out.append((_clock(a), _clock(b)))
            except ValueError:
                raise DataError(f"cannot read session interval {part!r}") from None
        if any(b <= a for a, b in out) or any(out[i + 1][0] < out[i][1] for i in range(len(out) - 1)):
            raise DataError(f"session intervals must be increasing: {spec!r}")
        return cls(tuple(out))

    @property
    def minutes(self):
        return sum(b - a for a, b in self.intervals)

    def offset(self, clock):
        """Session minutes elapsed at clock minute ``clock``; ``nan`` outside the session."""
        elapsed = 0
        for a, b in self.intervals:
            if a <= clock <= b:
                return elapsed + clock - a
            elapsed += b - a
        return np.nan

    def clock(self, offset):
        """Clock time string at session offset ``offset`` (a bar end)."""
        for a, b in self.intervals:
            if offset <= b - a:
                m = a + offset
                return f"{m // 60:02d}:{m % 60:02d}"
            offset -= b - a
        raise DataError("offset beyond the session")


def _clock(raw):
    parts = raw.strip().split(":")
    if len(parts) not in (2, 3):
        raise ValueError(raw)
    return int(parts[0]) * 60 + int(parts[1])


def read_intraday_prices(path):
    """``date, time, close`` file at source frequency, sorted and validated."""
    df = _read(path, ["date", "time", "close"])
    out = pd.DataFrame(
        {
            "date": np.array(_parse(df, "date", path, _date), dtype="datetime64[D]"),
            "clock": np.array(_parse(df, "time", path, _clock)),
            "close": np.array(_parse(df, "close", path, float)),
        }
    )
    bad = np.flatnonzero(~(out["close"].to_numpy() > 0))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 2}: close must be a positive number")
    key = out["date"].to_numpy().astype(np.int64) * 1440 + out["clock"].to_numpy()
    if np.any(np.diff(key) <= 0):
        i = int(np.argmax(np.diff(key) <= 0)) + 1
        raise DataError(f"{path}: row {i + 2}: timestamps must be strictly increasing")
    return out


def resample_bars(prices, bar_minutes, session):
    """Bar-end closes and bar log returns on a fixed session grid.

    The close of a bar is the last price in ``(end - width, end]`` of
    session time (the first bar also takes a print at the open).  The first
    bar return of a day is taken against the previous day's last close, so
    the first day of the file only supplies that reference price.

    Returns
    -------
    IntradayPanel
        Raw-oriented bar log returns for every day but the first.
    """
    total = session.minutes
    if total % bar_minutes:
        raise DataError(f"bar width {bar_minutes} does not divide the {total}-minute session")
    n_bars = total // bar_minutes
    offs = np.array([session.offset(c) for c in prices["clock"]])
    outside = np.flatnonzero(np.isnan(offs))
    if outside.size:
        r = prices.iloc[outside[0]]
        raise DataError(f"price at {r['date']} minute {r['clock']} lies outside the session")
    slot = np.maximum(np.ceil(offs / bar_minutes).astype(int), 1) - 1
    frame = pd.DataFrame({"date": prices["date"].to_numpy(), "slot": slot, "close": prices["close"].to_numpy()})
    last = frame.groupby(["date", "slot"], sort=True)["close"].last()
    table = last.unstack("slot")
    table = table.reindex(columns=range(n_bars))
    holes = np.argwhere(table.isna().to_numpy())
    if holes.size:
        t, k = holes[0]
        raise DataError(f"missing bar {k + 1} of {n_bars} on {table.index[t].date()}")
    closes = table.to_numpy()
    dates = table.index.to_numpy().astype("datetime64[D]")
    if dates.size < 2:
        raise DataError("intraday file must span at least two days")
    logc = np.log(closes)
    prev = np.concatenate([logc[:-1, -1:], logc[1:, :-1]], axis=1)
    rets = logc[1:] - prev
    return IntradayPanel(dates[1:], rets, bar_minutes, "raw")


def write_returns(series, path, column="loss"):
    df = pd.DataFrame({"date": series.dates.astype(str), column: series.values})
    return write_csv(df, path)


def read_returns(path, column="loss", orientation="loss"):
    df = _read(path, ["date", column])
    dates = np.array(_parse(df, "date", path, _date), dtype="datetime64[D]")
    vals = np.array(_parse(df, column, path, float))
    return ReturnSeries(dates, vals, orientation)


def write_panel(panel, path):
    cols = {f"bar_{k + 1}": panel.returns[:, k] for k in range(panel.bars_per_day)}
    df = pd.DataFrame({"date": panel.dates.astype(str), **cols})
    return write_csv(df, path)


def read_panel(path, bar_minutes=0, orientation="loss"):
    df = _read(path, ["date"])
    bars = [c for c in df.columns if c.startswith("bar_")]
    if not bars:
        raise DataError(f"{path}: no bar_ columns")
    dates = np.array(_parse(df, "date", path, _date), dtype="datetime64[D]")
    mat = np.column_stack([np.array(_parse(df, c, path, float)) for c in bars])
    return IntradayPanel(dates, mat, bar_minutes, orientation)
