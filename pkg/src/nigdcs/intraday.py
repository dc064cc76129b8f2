"""Intraday panels, shared-tail slot filters and aggregation to daily laws.

Within day ``t`` every bar slot ``tau`` is NIG with its own location
``mu[tau, t]`` and log-shape ``v[tau, t]`` but with the tail and skewness of
the daily model: ``alpha = exp(v_t - lam_t)`` and ``beta = alpha tanh(eta_t)``.
The slot log-scale is therefore ``lam[tau, t] = v[tau, t] - (v_t - lam_t)``.
By closure under convolution the daily return is NIG with summed locations
and summed scales.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numba import njit
from scipy import stats

from .dcs import (
    MU_BOUND_FACTOR,
    FitOptions,
    ModelFit,
    _density_and_scores,
    _density_scores_slopes,
    _guard,
    _Packing,
    default_init,
    fit_mle,
    link,
    minimize_restarts,
)
from .errors import ContractError, DataError, DomainError
from .nig import NigParams, convolve_nig, nig_quantile, nig_sample

logger = logging.getLogger(__name__)

__all__ = [
    "IntradayPanel",
    "SlotCoefficients",
    "IntradayFit",
    "intraday_filter",
    "filter_slots",
    "forecast_slots",
    "aggregate_daily",
    "aggregate_params",
    "slot_params",
    "var_from_aggregate",
    "intraday_seasonal",
    "fit_bootstrap_slots",
    "bootstrap_quantile",
    "bootstrap_daily",
    "AdjacencyResult",
    "pearson_adjacency",
    "simulate_intraday",
]

_BETA_MAX = float(np.nextafter(1.0, 0.0))


@dataclass
class IntradayPanel:
    """``T x N`` intraday log returns; row ``t`` belongs to ``dates[t]``."""

    dates: np.ndarray
    returns: np.ndarray
    bar_minutes: int = 0
    orientation: str = "raw"

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.returns = np.asarray(self.returns, dtype=float)
        if self.returns.ndim != 2 or self.returns.shape[0] != self.dates.size:
            raise DataError("returns must be a T x N matrix with one row per date")
        if self.returns.shape[1] < 1:
            raise DataError("panel needs at least one bar per day")
        bad = np.argwhere(~np.isfinite(self.returns))
        if bad.size:
            t, k = bad[0]
            raise DataError(f"missing or non-finite bar {k + 1} on {self.dates[t]}")
        if self.dates.size > 1 and np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise DataError("panel dates must be strictly increasing")

    @property
    def n_days(self):
        return self.returns.shape[0]

    @property
    def bars_per_day(self):
        return self.returns.shape[1]

    @property
    def daily_returns(self):
        return self.returns.sum(axis=1)

    def to_loss(self):
        if self.orientation != "raw":
            raise ContractError("panel is already loss-oriented")
        return IntradayPanel(self.dates, -self.returns, self.bar_minutes, "loss")

    def window(self, start, stop):
        return IntradayPanel(
            self.dates[start:stop], self.returns[start:stop], self.bar_minutes, self.orientation
        )


@dataclass(frozen=True)
class SlotCoefficients:
    """Per-slot recursion constants; arrays are ``N x 2`` in ``(mu, v)`` order."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} must be a finite N x 2 array")
            object.__setattr__(self, name, arr)

    @property
    def n_slots(self):
        return self.A.shape[0]

    def to_dict(self):
        return {
            "slots": [
                {
                    "slot": i + 1,
                    "mu": {"A": float(self.A[i, 0]), "B": float(self.B[i, 0]), "C": float(self.C[i, 0])},
                    "v": {"A": float(self.A[i, 1]), "B": float(self.B[i, 1]), "C": float(self.C[i, 1])},
                }
                for i in range(self.n_slots)
            ]
        }

    @classmethod
    def from_dict(cls, d):
        rows = d["slots"]
        get = lambda k: np.array([[r["mu"][k], r["v"][k]] for r in rows])  # noqa: E731
        return cls(get("A"), get("B"), get("C"))


@dataclass
class IntradayFit:
    """Filtered slot paths together with the daily quantities they share.

    ``states[t, tau]`` holds ``(mu, v)`` for slot ``tau`` on day ``t``;
    ``log_alpha[t] = v_t - lam_t`` and ``eta[t]`` come from the daily fit.
    """

    coefficients: SlotCoefficients
    states: np.ndarray
    scores: np.ndarray
    log_alpha: np.ndarray
    eta: np.ndarray
    log_likelihood: np.ndarray
    clamp_count: int = 0
    pooled: bool = False
    convergence: list = field(default_factory=list)

    @property
    def n_days(self):
        return self.states.shape[0]

    @property
    def n_slots(self):
        return self.states.shape[1]

    @property
    def lam(self):
        return self.states[:, :, 1] - self.log_alpha[:, None]

    def to_dict(self):
        d = self.coefficients.to_dict()
        d.update(
            pooled=self.pooled,
            log_likelihood=[float(x) for x in self.log_likelihood],
            clamp_count=int(self.clamp_count),
            final_states=[{"mu": float(m), "v": float(v)} for m, v in self.states[-1]],
            convergence=self.convergence,
        )
        return d


# ---------------------------------------------------------------------------
# slot recursions
# ---------------------------------------------------------------------------


@njit(cache=True)
def _slot_step(mu, v, log_alpha, eta, r, sc):
    """Log-density and ``(s_mu, s_v)`` of one slot; ``s_v`` is the total derivative."""
    lam = v - log_alpha
    ll = _density_and_scores(mu, lam, v, eta, r, sc)
    return ll, sc[0], sc[1] + sc[2]


@njit(cache=True)
def _slot_guard(st, log_alpha):
    lam = st[1] - log_alpha
    if lam > 30.0:
        st[1] = 30.0 + log_alpha
        return 1
    if lam < -30.0:
        st[1] = -30.0 + log_alpha
        return 1
    return 0


@njit(cache=True)
def _slot_filter(A, B, C, r, log_alpha, eta, init, states, scores_out):
    st = init.copy()
    clamps = _slot_guard(st, log_alpha[0])
    sc = np.empty(4)
    total = 0.0
    T = r.size
    for t in range(T):
        states[t, 0] = st[0]
        states[t, 1] = st[1]
        ll, s_mu, s_v = _slot_step(st[0], st[1], log_alpha[t], eta[t], r[t], sc)
        total += ll
        scores_out[t, 0] = s_mu
        scores_out[t, 1] = s_v
        st[0] = A[0] + B[0] * st[0] + C[0] * s_mu
        st[1] = A[1] + B[1] * st[1] + C[1] * s_v
        if t + 1 < T:
            clamps += _slot_guard(st, log_alpha[t + 1])
    return total, clamps


@njit(cache=True)
def _slot_loglik(A, B, C, r, log_alpha, eta, mu_bound):
    """Slot log-likelihood, or ``-1e300`` for an inadmissible filter (see ``dcs._loglik``)."""
    st = A / (1.0 - B)
    if _slot_guard(st, log_alpha[0]):
        return -1e300
    sc = np.empty(4)
    sl = np.empty(5)
    lyap_mu = 0.0
    lyap_v = 0.0
    total = 0.0
    for t in range(r.size):
        ll = _density_scores_slopes(st[0], st[1] - log_alpha[t], st[1], eta[t], r[t], sc, sl)
        if not math.isfinite(ll):
            return -1e300
        total += ll
        lyap_mu += math.log(abs(B[0] + C[0] * sl[0]) + 1e-300)
        lyap_v += math.log(abs(B[1] + C[1] * (sl[1] + 2.0 * sl[4] + sl[2])) + 1e-300)
        st[0] = A[0] + B[0] * st[0] + C[0] * sc[0]
        st[1] = A[1] + B[1] * st[1] + C[1] * (sc[1] + sc[2])
        if t + 1 < r.size and (_slot_guard(st, log_alpha[t + 1]) or abs(st[0]) > mu_bound):
            return -1e300
    if lyap_mu >= 0.0 or lyap_v >= 0.0:
        return -1e300
    return total


def _daily_shared(daily):
    log_alpha = np.ascontiguousarray(daily.states[:, 2] - daily.states[:, 1])
    eta = np.ascontiguousarray(daily.states[:, 3])
    return log_alpha, eta


def filter_slots(panel, daily, coefficients, pooled=False):
    """Filter every slot with fixed coefficients against the daily fit."""
    if panel.n_days != daily.n_obs:
        raise DataError(f"panel has {panel.n_days} days but the daily fit has {daily.n_obs}")
    if coefficients.n_slots != panel.bars_per_day:
        raise DataError("coefficient count does not match bars per day")
    log_alpha, eta = _daily_shared(daily)
    T, N = panel.returns.shape
    states = np.empty((T, N, 2))
    sc = np.empty((T, N, 2))
    ll = np.empty(N)
    clamps = 0
    for k in range(N):
        A, B, C = coefficients.A[k], coefficients.B[k], coefficients.C[k]
        r = np.ascontiguousarray(panel.returns[:, k])
        st_k = np.empty((T, 2))
        sc_k = np.empty((T, 2))
        ll[k], c = _slot_filter(A, B, C, r, log_alpha, eta, A / (1.0 - B), st_k, sc_k)
        states[:, k] = st_k
        sc[:, k] = sc_k
        clamps += c
    return IntradayFit(coefficients, states, sc, log_alpha, eta, ll, int(clamps), pooled)


def _slot_start(r_slot, daily_returns, daily_v, b=0.9, c=0.02):
    target = np.array(
        [np.mean(r_slot), np.mean(daily_v) + math.log(np.var(r_slot) / np.var(daily_returns))]
    )
    return (1.0 - b) * target, np.full(2, b), np.full(2, c)


def intraday_filter(panel, daily, pooled=False, options=None, start=None):
    """Estimate the slot recursions by maximum likelihood and filter them.

    Parameters
    ----------
    panel : IntradayPanel
        Intraday returns covering the same days as ``daily``.
    daily : ModelFit
        Daily fit providing ``v_t - lam_t`` and ``eta_t``.
    pooled : bool
        Use one coefficient set for all slots instead of one per slot.
    options : FitOptions, optional
    start : SlotCoefficients, optional
        Warm start for the optimiser.
    """
    opts = options or FitOptions()
    if panel.n_days != daily.n_obs:
        raise DataError(f"panel has {panel.n_days} days but the daily fit has {daily.n_obs}")
    if panel.n_days < opts.min_obs:
        raise DataError(f"slot series too short: {panel.n_days} < {opts.min_obs}")
    log_alpha, eta = _daily_shared(daily)
    T, N = panel.returns.shape
    daily_r = panel.daily_returns
    daily_v = daily.states[:, 2]
    cols = [np.ascontiguousarray(panel.returns[:, k]) for k in range(N)]
    bound = MU_BOUND_FACTOR * float(np.max(np.abs(panel.returns)))

    def initial(k):
        if start is not None:
            a, b, c = start.A[k], start.B[k], start.C[k]
            if _slot_loglik(a, b, c, cols[k], log_alpha, eta, bound) > -1e300:
                return a, b, c
        return _slot_start(cols[k], daily_r, daily_v, opts.b_start, opts.c_start)

    A = np.empty((N, 2))
    B = np.empty((N, 2))
    C = np.empty((N, 2))
    info = []
    if pooled:
        scale = float(np.std(panel.returns))
        packing = _Packing([scale, 1.0])
        a0, b0, c0 = (np.mean([initial(k)[j] for k in range(N)], axis=0) for j in range(3))

        def objective(x):
            a, b, c = packing.unpack(x)
            val = -sum(_slot_loglik(a, b, c, r, log_alpha, eta, bound) for r in cols)
            return val if math.isfinite(val) else 1e300

        x, _, inf = minimize_restarts(objective, packing.pack(a0, b0, c0), packing.steps(), opts)
        a, b, c = packing.unpack(x)
        A[:], B[:], C[:] = a, b, c
        info.append(inf)
    else:
        for k in range(N):
            packing = _Packing([float(np.std(cols[k])), 1.0])
            r = cols[k]

            def objective(x, r=r, packing=packing):
                a, b, c = packing.unpack(x)
                val = -_slot_loglik(a, b, c, r, log_alpha, eta, bound)
                return val if math.isfinite(val) else 1e300

            x, _, inf = minimize_restarts(objective, packing.pack(*initial(k)), packing.steps(), opts)
            A[k], B[k], C[k] = packing.unpack(x)
            info.append(inf)
    fit = filter_slots(panel, daily, SlotCoefficients(A, B, C), pooled)
    fit.convergence = info
    return fit


def forecast_slots(fit, last_returns, log_alpha_next):
    """One-step slot states ``(mu, v)`` for the day after the fitted sample."""
    last_returns = np.asarray(last_returns, dtype=float)
    if last_returns.shape != (fit.n_slots,):
        raise DataError(f"expected {fit.n_slots} last returns")
    coef = fit.coefficients
    out = np.empty((fit.n_slots, 2))
    sc = np.empty(4)
    for k in range(fit.n_slots):
        mu, v = fit.states[-1, k]
        _, s_mu, s_v = _slot_step(mu, v, fit.log_alpha[-1], fit.eta[-1], last_returns[k], sc)
        st = coef.A[k] + coef.B[k] * np.array([mu, v]) + coef.C[k] * np.array([s_mu, s_v])
        _slot_guard(st, log_alpha_next)
        out[k] = st
    return out


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _tail_pair(log_alpha, eta):
    alpha = math.exp(log_alpha)
    beta = alpha * max(-_BETA_MAX, min(_BETA_MAX, math.tanh(eta)))
    if abs(beta) >= alpha:
        beta = math.copysign(float(np.nextafter(alpha, 0.0)), beta)
    return alpha, beta


def aggregate_params(slot_states, log_alpha, eta):
    """Daily NIG law from slot ``(mu, v)`` states sharing ``exp(log_alpha)`` and ``eta``."""
    slot_states = np.asarray(slot_states, dtype=float)
    alpha, beta = _tail_pair(log_alpha, eta)
    mu = math.fsum(slot_states[:, 0])
    delta = math.fsum(np.exp(slot_states[:, 1] - log_alpha))
    return NigParams(mu, delta, alpha, beta)


def slot_params(fit, t, tau):
    """NIG law of slot ``tau`` on day ``t``."""
    alpha, beta = _tail_pair(fit.log_alpha[t], fit.eta[t])
    mu, v = fit.states[t, tau]
    return NigParams(float(mu), math.exp(v - fit.log_alpha[t]), alpha, beta)


def aggregate_daily(fit, t):
    """Daily law on filtered day ``t`` by convolving the slot laws."""
    if not -fit.n_days <= t < fit.n_days:
        raise DomainError(f"day index {t} outside 0..{fit.n_days - 1}")
    return aggregate_params(fit.states[t], fit.log_alpha[t], fit.eta[t])


def fold_convolution(params):
    """Reference fold of :func:`convolve_nig` over a list of laws."""
    out = params[0]
    for p in params[1:]:
        out = convolve_nig(out, p)
    return out


def var_from_aggregate(p, level):
    """VaR at ``level`` for a loss-oriented law: its ``level`` quantile."""
    return nig_quantile(p, level)


# ---------------------------------------------------------------------------
# bootstrap aggregation
# ---------------------------------------------------------------------------


def intraday_seasonal(panel, eps=1e-8):
    """Within-day log-scale pattern: log mean absolute deviation per slot, centred."""
    dev = np.abs(panel.returns - panel.returns.mean(axis=0))
    pattern = np.log(dev.mean(axis=0) + eps)
    return pattern - pattern.mean()


def fit_bootstrap_slots(panel, options=None, seasonal=True):
    """Four-parameter fits per slot, with no tail/skew sharing across slots."""
    q = intraday_seasonal(panel) if seasonal else np.zeros(panel.bars_per_day)
    fits = []
    for k in range(panel.bars_per_day):
        qk = np.full(panel.n_days, q[k])
        fits.append(fit_mle(panel.returns[:, k], qk, options))
    return fits


def bootstrap_quantile(params, level, n_draws=10000, seed=0):
    """Empirical ``level`` quantile of the sum of independent draws from each law."""
    if n_draws < 1000:
        raise DomainError("need at least 1000 bootstrap draws")
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    total = np.zeros(n_draws)
    for p in params:
        total += nig_sample(p, n_draws, rng)
    return float(np.quantile(total, level))


def bootstrap_daily(fits, t, level, n_draws=10000, seed=0):
    """Bootstrap VaR for day ``t`` from per-slot four-parameter fits."""
    if not fits:
        raise DataError("no slot fits supplied")
    for f in fits:
        if not isinstance(f, ModelFit):
            raise DataError("slot fits must be ModelFit instances")
        if not -f.n_obs <= t < f.n_obs:
            raise DomainError(f"day index {t} outside the fitted range")
    params = [link(f.states[t]) for f in fits]
    return bootstrap_quantile(params, level, n_draws, seed)


# ---------------------------------------------------------------------------
# adjacency diagnostic
# ---------------------------------------------------------------------------


@dataclass
class AdjacencyResult:
    table: pd.DataFrame
    ratio: float


def pearson_adjacency(panel, significance=0.05):
    """Correlation tests between neighbouring bar slots across days.

    ``ratio`` is the share of testable pairs with a p-value below
    ``significance``; pairs involving a constant column are flagged and
    left untested.
    """
    N = panel.bars_per_day
    if N < 2:
        raise DataError("need at least two bars per day")
    rows = []
    for k in range(N - 1):
        a, b = panel.returns[:, k], panel.returns[:, k + 1]
        pair = f"{k + 1}-{k + 2}"
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            rows.append((pair, np.nan, np.nan, True))
            continue
        res = stats.pearsonr(a, b)
        rows.append((pair, float(res.statistic), float(res.pvalue), False))
    table = pd.DataFrame(rows, columns=["pair", "correlation", "p_value", "flagged"])
    tested = table.loc[~table.flagged, "p_value"]
    ratio = float((tested < significance).mean()) if len(tested) else float("nan")
    return AdjacencyResult(table, ratio)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@njit(cache=True)
def _simulate_split(A, B, C, w, init, normals, uniforms, gauss, out, out_states):
    st = init.copy()
    _guard(st)
    sc = np.empty(4)
    T, N = out.shape
    for t in range(T):
        out_states[t, :] = st
        delta = math.exp(st[1])
        alpha = math.exp(st[2] - st[1])
        beta = alpha * math.tanh(st[3])
        gamma = alpha / math.cosh(st[3])
        total = 0.0
        for k in range(N):
            d = delta * w[k]
            mean = d / gamma
            shape = d * d
            u = mean * normals[t, k] ** 2 / (2.0 * shape)
            root = mean / (1.0 + u + math.sqrt(u * u + 2.0 * u))
            zz = root if uniforms[t, k] * (mean + root) <= mean else mean * mean / root
            x = st[0] * w[k] + beta * zz + math.sqrt(zz) * gauss[t, k]
            out[t, k] = x
            total += x
        _density_and_scores(st[0], st[1], st[2], st[3], total, sc)
        for i in range(4):
            st[i] = A[i] + B[i] * st[i] + C[i] * sc[i]
        _guard(st)


def simulate_intraday(coeff, T, weights, seed=0):
    """Daily DCS path whose observations are split into ``len(weights)`` slots.

    Slot ``k`` of day ``t`` is ``NIG(w_k mu_t, w_k delta_t, alpha_t, beta_t)``
    so the day total has exactly the daily law ``link(state_t)``.

    Returns
    -------
    slots : ndarray, shape (T, N)
    states : ndarray, shape (T, 4)
    """
    if T < 1:
        raise DomainError("T must be at least 1")
    if not coeff.is_stationary:
        raise DomainError(f"explosive coefficients: |B| >= 1 in {coeff.B}")
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 1 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
        raise DomainError("weights must be positive and sum to one")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    N = w.size
    normals = rng.standard_normal((T, N))
    uniforms = rng.random((T, N))
    gauss = rng.standard_normal((T, N))
    out = np.empty((T, N))
    states = np.empty((T, 4))
    init = np.array(default_init(coeff), dtype=float)
    _simulate_split(coeff.A, coeff.B, coeff.C, w, init, normals, uniforms, gauss, out, states)
    return out, states
