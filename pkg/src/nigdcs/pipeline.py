"""End-to-end steps behind the command-line verbs.

Each step reads its inputs from files under ``config.output_dir`` (or the
configured data paths) and writes its outputs atomically, so a run is a
pure function of the input files, the configuration and the seeds.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .backtest import (
    REPORT_COLUMNS,
    VarForecastSeries,
    check_alignment,
    evaluate,
    format_table,
    lm_score_test,
    mcs,
    pinball_loss,
)
from .dataprep import (
    ReturnSeries,
    SeasonalCycle,
    VacationPolicy,
    describe,
    log_returns,
    seasonal_decompose,
    to_loss,
    vacation_adjust,
)
from .dcs import (
    PARAM_NAMES,
    DcsCoefficients,
    FitOptions,
    contraction_rates,
    dcs_filter,
    fit_mle,
    forecast_one_step,
    link,
)
from .errors import DataError, EstimationError
from .intraday import (
    IntradayPanel,
    aggregate_params,
    filter_slots,
    forecast_slots,
    intraday_filter,
    pearson_adjacency,
    simulate_intraday,
)
from .nig import nig_quantile
from .plotting import plot_states, plot_var

logger = logging.getLogger(__name__)

__all__ = [
    "TRUE_COEFFICIENTS",
    "session_weights",
    "simulate_dataset",
    "Prepared",
    "prepare",
    "load_prepared",
    "fit_models",
    "rolling_forecast",
    "write_forecasts",
    "load_forecasts",
    "run_backtest",
    "run_mcs",
    "model_name",
    "DAILY_MODEL",
]

DAILY_MODEL = "VaR-day"

TRUE_COEFFICIENTS = DcsCoefficients(
    A=[0.0, -4.6 * 0.05, 0.0, -0.02],
    B=[0.0, 0.95, 0.9, 0.9],
    C=[0.0, 0.05, 0.02, 0.01],
)


def model_name(bar_minutes):
    return f"NIG-DCS-{bar_minutes}min"


def level_tag(level):
    return format(level, "g")


def _options(cfg, restarts=None, start=None):
    return FitOptions(
        min_obs=cfg.min_obs,
        maxiter=cfg.maxiter,
        fatol=cfg.fatol,
        xatol=cfg.xatol,
        restarts=cfg.restarts if restarts is None else restarts,
        seed=cfg.seed,
        raise_on_failure=False,
        start=start,
    )


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def session_weights(n_bars):
    """U-shaped share of daily scale per bar: busier at the open and close."""
    if n_bars == 1:
        return np.ones(1)
    x = np.linspace(-1.0, 1.0, n_bars)
    w = 1.0 + 0.8 * x**2
    return w / w.sum()


def simulate_dataset(cfg, coefficients=None, start_price=3000.0):
    """Write synthetic daily and intraday price files plus their ground truth.

    Daily losses follow the score-driven NIG model; each day is split into
    ``240 / sim_base_minutes`` bars whose losses are NIG with the daily tail
    and skewness and scale shares from :func:`session_weights`.  Prices are
    ``start_price * exp(-cumulative loss)`` on a Monday-to-Friday calendar,
    with one leading day at ``start_price`` to anchor the first return.
    """
    coeff = coefficients or (
        DcsCoefficients.from_dict(io.read_json(cfg.sim_truth)["coefficients"]) if cfg.sim_truth else TRUE_COEFFICIENTS
    )
    session = io.Session.parse(cfg.session)
    base = cfg.sim_base_minutes
    n_base = session.minutes // base
    w = session_weights(n_base)
    slots, states = simulate_intraday(coeff, cfg.sim_days, w, seed=cfg.seed)
    dates = np.busday_offset(np.datetime64(cfg.sim_start, "D"), np.arange(cfg.sim_days + 1), roll="forward")
    logp = math.log(start_price) - np.concatenate([[0.0], np.cumsum(slots.ravel())])
    bar_logp = np.concatenate([np.full(n_base, logp[0]), logp[1:]]).reshape(cfg.sim_days + 1, n_base)
    times = [session.clock(base * (k + 1)) for k in range(n_base)]
    intraday = pd.DataFrame(
        {
            "date": np.repeat(dates.astype(str), n_base),
            "time": np.tile(times, cfg.sim_days + 1),
            "close": [repr(float(p)) for p in np.exp(bar_logp.ravel())],
        }
    )
    daily = pd.DataFrame({"date": dates.astype(str), "close": [repr(float(p)) for p in np.exp(bar_logp[:, -1])]})
    daily_path = Path(cfg.daily_csv)
    io.write_csv(daily, daily_path)
    io.write_csv(intraday, cfg.intraday_csv)
    truth = {
        "seed": cfg.seed,
        "days": cfg.sim_days,
        "base_minutes": base,
        "weights": [float(x) for x in w],
        "coefficients": coeff.to_dict(),
        "orientation": "loss",
    }
    io.write_json(truth, daily_path.parent / "truth.json")
    st = pd.DataFrame(states, columns=PARAM_NAMES)
    st.insert(0, "date", dates[1:].astype(str))
    io.write_csv(st, daily_path.parent / "truth_states.csv")
    return truth


# ---------------------------------------------------------------------------
# preparation
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    daily: ReturnSeries
    panel: IntradayPanel
    cycle: SeasonalCycle

    @property
    def q(self):
        return self.cycle.values_for(self.daily.dates)


def _model_q(cfg, prep):
    """Seasonal term for the log-scale recursion, or ``None`` when not modelled."""
    return prep.q if cfg.seasonal_in_model else None


def _window_cycle(cfg, prep, lo, hi):
    """Cycle re-estimated on days ``lo..hi-1`` only; ``None`` when not modelled."""
    if not cfg.seasonal_in_model or cfg.seasonal_target == "off":
        return None
    return seasonal_decompose(prep.daily.window(lo, hi), cfg.seasonal_target, cfg.seasonal_method)


def _prepared_dir(cfg):
    return cfg.out / "prepared"


def prepare(cfg):
    """Build loss-oriented daily and intraday series and their diagnostics."""
    prices = io.read_daily_prices(cfg.daily_csv)
    raw = log_returns(prices)
    policy = VacationPolicy(cfg.vacation_enabled, cfg.vacation_gap_days, cfg.vacation_clip, cfg.vacation_window)
    adjusted, vlog = vacation_adjust(raw, policy)
    session = io.Session.parse(cfg.session)
    panel = io.resample_bars(io.read_intraday_prices(cfg.intraday_csv), cfg.bar_minutes, session)
    if not np.array_equal(panel.dates, raw.dates):
        extra = np.setxor1d(panel.dates, raw.dates)
        raise DataError(f"daily and intraday files cover different days (first mismatch {extra[0]})")
    gap = np.abs(panel.daily_returns - raw.values)
    if np.any(gap > 1e-10):
        i = int(np.argmax(gap))
        raise DataError(f"intraday returns on {raw.dates[i]} do not sum to the daily return (gap {gap[i]:.3g})")
    # move each vacation adjustment onto the first bar so rows still sum to the day
    rets = panel.returns.copy()
    rets[:, 0] += adjusted.values - raw.values
    panel = IntradayPanel(panel.dates, rets, panel.bar_minutes, "raw").to_loss()
    daily = to_loss(adjusted)
    if cfg.seasonal_target == "off":
        cycle = SeasonalCycle.zero()
    else:
        try:
            cycle = seasonal_decompose(daily, cfg.seasonal_target, cfg.seasonal_method)
        except DataError as exc:
            if cfg.seasonal_in_model:
                raise
            # the cycle is a diagnostic only here; keep going without it
            logger.warning("seasonal cycle not estimated: %s", exc)
            cycle = SeasonalCycle.zero()

    d = _prepared_dir(cfg)
    io.write_returns(daily, d / "daily_loss.csv")
    io.write_panel(panel, d / "intraday_loss.csv")
    io.write_csv(cycle.to_frame(), d / "seasonal_cycle.csv")
    if panel.bars_per_day > 1:
        adj = pearson_adjacency(panel)
        tab = pd.concat([adj.table, pd.DataFrame([{"pair": "ratio", "correlation": np.nan, "p_value": adj.ratio}])])
        io.write_csv(tab, d / "pearson.csv")
    vlog = vlog.assign(date=vlog["date"].astype(str)) if len(vlog) else vlog
    io.write_csv(vlog, d / "vacation_log.csv")
    io.write_json({"daily_loss": describe(daily, min_obs=min(30, len(daily)))}, d / "summary.json")
    return Prepared(daily, panel, cycle)


def load_prepared(cfg):
    d = _prepared_dir(cfg)
    daily = io.read_returns(d / "daily_loss.csv")
    panel = io.read_panel(d / "intraday_loss.csv", cfg.bar_minutes)
    if not np.array_equal(panel.dates, daily.dates):
        raise DataError("prepared daily and intraday files are misaligned; rerun prep")
    cyc = pd.read_csv(d / "seasonal_cycle.csv")
    return Prepared(daily, panel, SeasonalCycle(cyc["q"].to_numpy(), cfg.seasonal_target, cfg.seasonal_method))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _fit_daily(r, q, options):
    try:
        return fit_mle(r, q, options)
    except EstimationError as exc:  # pragma: no cover - raise_on_failure is off here
        return exc.best


def fit_models(cfg, prep):
    """Full-sample daily and intraday fits with score diagnostics."""
    out = cfg.out / "models"
    daily = fit_mle(prep.daily.values, _model_q(cfg, prep), _options(cfg))
    doc = daily.to_dict()
    doc["seasonal_target"] = cfg.seasonal_target if cfg.seasonal_in_model else "off"
    rates = contraction_rates(daily, prep.daily.values)
    doc["contraction_rates"] = dict(zip(PARAM_NAMES, map(float, rates)))
    io.write_json(doc, out / "daily.json")
    dates = prep.daily.dates.astype(str)
    st = pd.DataFrame(daily.states, columns=PARAM_NAMES)
    st.insert(0, "date", dates)
    io.write_csv(st, out / "daily_states.csv")
    sc = pd.DataFrame(daily.scores, columns=[f"s_{n}" for n in PARAM_NAMES])
    sc.insert(0, "date", dates)
    io.write_csv(sc, out / "daily_scores.csv")

    rows = [("day", p, *lm_score_test(daily.scores[:, i], cfg.lm_lags)[:2]) for i, p in enumerate(PARAM_NAMES)]
    intr = None
    if prep.panel.bars_per_day > 1:
        intr = intraday_filter(prep.panel, daily, cfg.pooled_slots, _options(cfg))
        io.write_json(intr.to_dict(), out / "intraday.json")
        cols = {}
        for k in range(intr.n_slots):
            cols[f"s_mu_{k + 1}"] = intr.scores[:, k, 0]
            cols[f"s_v_{k + 1}"] = intr.scores[:, k, 1]
        io.write_csv(pd.DataFrame({"date": dates, **cols}), out / "intraday_scores.csv")
        name = f"{cfg.bar_minutes}min"
        for k in range(intr.n_slots):
            for j, p in enumerate(("mu", "v")):
                stat, pv = lm_score_test(intr.scores[:, k, j], cfg.lm_lags)[:2]
                rows.append((name, f"{p}_{k + 1}", stat, pv))
    lm = pd.DataFrame(rows, columns=["frequency", "parameter", "lm_stat", "lm_p"])
    io.write_csv(lm, out / "lm_table.csv")
    pivot = lm.pivot(index="parameter", columns="frequency", values="lm_p")
    io.write_text(pivot.to_string(float_format=lambda x: f"{x:.3f}", na_rep="") + "\n", out / "lm_table.txt")
    plot_states(prep.daily.dates, daily.states, PARAM_NAMES, out / "daily_states.svg")
    if not daily.convergence.get("converged", False):
        edge = [n for n, x in zip(PARAM_NAMES, rates) if x > -1e-4]
        where = f"; at the invertibility boundary in {', '.join(edge)}" if edge else ""
        raise EstimationError(
            f"daily fit did not meet its tolerance after {daily.convergence.get('iterations')} iterations{where};"
            f" best-so-far written to {out / 'daily.json'}",
            best=daily,
        )
    return daily, intr, lm


# ---------------------------------------------------------------------------
# rolling forecasts
# ---------------------------------------------------------------------------


def rolling_forecast(cfg, prep):
    """One-step-ahead VaR for days ``window .. window + horizon - 1``.

    Coefficients are re-estimated on the trailing window every
    ``refit_every`` days, warm-started from the previous estimate.  In
    between, the filter of the last refit is extended with the new
    observations, so states carry forward instead of restarting at the
    unconditional mean.  A filter that needs a guard clamp forces a refit.

    Returns
    -------
    forecasts : dict
        ``{model: {level: VarForecastSeries}}``.
    diagnostics : pandas.DataFrame
        Per target day: refit flag, convergence, guard clamps and the largest
        relative gap between slot and daily tail parameters.
    """
    r = prep.daily.values
    T = r.size
    s, n = cfg.window, cfg.horizon
    if s + n > T:
        raise DataError(f"window {s} plus horizon {n} exceeds the {T} available days")
    panel = prep.panel
    N = panel.bars_per_day
    levels = tuple(cfg.levels)
    agg_name = model_name(cfg.bar_minutes)
    var = {agg_name: np.empty((n, len(levels))), DAILY_MODEL: np.empty((n, len(levels)))}
    diag = []
    daily = intr = cycle = None
    anchor = 0
    for i, j in enumerate(range(s, s + n)):
        lo = j - s
        refit = i % cfg.refit_every == 0
        if refit:
            cycle = _window_cycle(cfg, prep, lo, j)
        if not refit:
            dates = prep.daily.dates[anchor : j + 1]
            q_all = np.zeros(dates.size) if cycle is None else cycle.values_for(dates)
            daily_f = dcs_filter(daily.coefficients, r[anchor:j], q_all[:-1])
            if daily_f.clamp_count:
                # the old coefficients leave the guarded region on the moved window
                refit = True
                logger.info("forced refit at %s after %d clamps", prep.daily.dates[j], daily_f.clamp_count)
            else:
                daily = daily_f
        if refit:
            anchor = lo
            dates = prep.daily.dates[lo : j + 1]
            q_all = np.zeros(dates.size) if cycle is None else cycle.values_for(dates)
            rw, qw = r[lo:j], q_all[:-1]
            start = daily.coefficients if daily is not None else None
            restarts = cfg.restarts if daily is None else cfg.refit_restarts
            daily = _fit_daily(rw, qw, _options(cfg, restarts, start))
        nxt = forecast_one_step(daily, r[j - 1], q_all[-1])
        p_day = link(nxt)
        tail_gap = 0.0
        clamps = daily.clamp_count
        if N > 1:
            slot_refit = refit
            pw = panel.window(anchor, j)
            if not slot_refit:
                intr_f = filter_slots(pw, daily, intr.coefficients, cfg.pooled_slots)
                slot_refit = intr_f.clamp_count > 0
                if not slot_refit:
                    intr = intr_f
            if slot_refit:
                prev = intr.coefficients if intr is not None else None
                restarts = cfg.restarts if intr is None else cfg.refit_restarts
                if anchor != lo:
                    # slots alone lost the guarded region: refit the daily model too
                    anchor = lo
                    dates = prep.daily.dates[lo : j + 1]
                    q_all = np.zeros(dates.size) if cycle is None else cycle.values_for(dates)
                    daily = _fit_daily(r[lo:j], q_all[:-1], _options(cfg, cfg.refit_restarts, daily.coefficients))
                    nxt = forecast_one_step(daily, r[j - 1], q_all[-1])
                    p_day = link(nxt)
                    pw = panel.window(lo, j)
                intr = intraday_filter(pw, daily, cfg.pooled_slots, _options(cfg, restarts), start=prev)
                refit = True
            log_alpha = nxt.v - nxt.lam
            slot_next = forecast_slots(intr, panel.returns[j - 1], log_alpha)
            p_agg = aggregate_params(slot_next, log_alpha, nxt.eta)
            a_day = np.exp(intr.log_alpha)
            a_slot = np.exp(intr.states[:, :, 1] - intr.lam)
            tail_gap = float(np.max(np.abs(a_slot - a_day[:, None]) / a_day[:, None]))
            a_next = np.exp(slot_next[:, 1] - (slot_next[:, 1] - log_alpha))
            tail_gap = max(tail_gap, float(np.max(np.abs(a_next - p_agg.alpha) / p_agg.alpha)))
            clamps += intr.clamp_count
        else:
            p_agg = p_day
        for k, lv in enumerate(levels):
            var[DAILY_MODEL][i, k] = nig_quantile(p_day, lv)
            var[agg_name][i, k] = nig_quantile(p_agg, lv) if N > 1 else var[DAILY_MODEL][i, k]
        conv = daily.convergence.get("converged", True) if refit else True
        if refit and intr is not None:
            conv = conv and all(c.get("converged", False) for c in intr.convergence)
        diag.append((str(prep.daily.dates[j]), refit, conv, int(clamps), tail_gap))
        if refit:
            logger.info("refit at %s (%d/%d), converged=%s", prep.daily.dates[j], i + 1, n, conv)
    dates = prep.daily.dates[s : s + n]
    realized = r[s : s + n]
    forecasts = {
        m: {lv: VarForecastSeries(dates, lv, v[:, k], realized) for k, lv in enumerate(levels)}
        for m, v in var.items()
    }
    diagnostics = pd.DataFrame(diag, columns=["date", "refit", "converged", "clamps", "tail_gap"])
    return forecasts, diagnostics


def write_forecasts(cfg, forecasts, diagnostics=None):
    root = cfg.out / "forecasts"
    for model, by_level in forecasts.items():
        for lv, fs in by_level.items():
            df = fs.to_frame()
            df["date"] = df["date"].astype(str)
            io.write_csv(df, root / model / f"level_{level_tag(lv)}.csv")
    if diagnostics is not None:
        io.write_csv(diagnostics, root / "diagnostics.csv")
    return root


def load_forecasts(root):
    """Read ``<root>/<model>/level_<level>.csv`` files."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"forecast directory {root} not found")
    out = {}
    for mdir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(mdir.glob("level_*.csv"))
        if not files:
            continue
        out[mdir.name] = {}
        for f in files:
            df = pd.read_csv(f)
            missing = {"date", "level", "var_forecast", "realized_loss", "hit"} - set(df.columns)
            if missing:
                raise DataError(f"{f}: missing column(s) {', '.join(sorted(missing))}")
            fs = VarForecastSeries.from_frame(df)
            out[mdir.name][fs.level] = fs
    if not out:
        raise DataError(f"no forecast files under {root}")
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _all_forecasts(cfg):
    fc = load_forecasts(cfg.out / "forecasts")
    for extra in cfg.extra_forecasts:
        for m, by_level in load_forecasts(extra).items():
            if m in fc:
                raise DataError(f"model {m} appears in more than one forecast directory")
            fc[m] = by_level
    return fc


def _levels(cfg, fc):
    have = set.intersection(*(set(v) for v in fc.values()))
    levels = [lv for lv in cfg.levels if lv in have]
    if not levels:
        raise DataError("no configured level is present for every model")
    return levels


def run_backtest(cfg):
    """Backtest tables and one VaR figure per level."""
    fc = _all_forecasts(cfg)
    levels = _levels(cfg, fc)
    reports, results, table = evaluate(
        fc, levels, cfg.mcs_alpha, cfg.mcs_block, cfg.mcs_reps, cfg.seed, cfg.dq_lags
    )
    out = cfg.out / "reports"
    io.write_csv(table[REPORT_COLUMNS], out / "backtest.csv")
    full = pd.concat([rep.table for rep in reports.values()], ignore_index=True)
    io.write_csv(full, out / "backtest_detail.csv")
    io.write_text(format_table(table) + "\n", out / "backtest.txt")
    for lv in levels:
        ref = next(iter(fc.values()))[lv]
        plot_var(
            ref.dates,
            ref.realized_loss,
            {m: fc[m][lv].var_forecast for m in fc},
            lv,
            out / f"var_level_{level_tag(lv)}.svg",
        )
    return table


def run_mcs(cfg):
    """MCS ranking per level on pinball loss."""
    fc = _all_forecasts(cfg)
    levels = _levels(cfg, fc)
    check_alignment(fc, levels)
    frames = []
    models = list(fc)
    for lv in levels:
        loss = np.column_stack(
            [pinball_loss(fc[m][lv].realized_loss, fc[m][lv].var_forecast, lv) for m in models]
        )
        res = mcs(loss, cfg.mcs_alpha, cfg.mcs_block, cfg.mcs_reps, cfg.seed, names=models)
        df = res.to_frame()
        df.insert(1, "level", lv)
        frames.append(df)
    table = pd.concat(frames, ignore_index=True)
    io.write_csv(table, cfg.out / "reports" / "mcs.csv")
    return table
