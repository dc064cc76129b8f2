"""Score-driven (DCS) filter for NIG returns.

The time-varying state is ``(mu, lam, v, eta)`` and maps to NIG parameters by

    delta = exp(lam),  alpha = exp(v - lam),  beta = alpha * tanh(eta).

Each coordinate follows ``x' = A + B x + C s`` where ``s`` is the score of the
conditional log-density at the current observation; the location score is
multiplied by ``exp(2 lam)`` and the log-scale equation also receives the
seasonal term ``q``.  The scores below are derived directly from the
log-density and are checked against finite differences in the test suite.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numba import njit
from scipy import optimize

from .errors import DataError, DomainError, EstimationError
from .nig import NigParams, nig_fit_static
from .special import k01e

logger = logging.getLogger(__name__)

__all__ = [
    "DcsState",
    "DcsCoefficients",
    "ScoreVector",
    "ModelFit",
    "FitOptions",
    "link",
    "inverse_link",
    "log_cond_density",
    "scores",
    "dcs_update",
    "dcs_filter",
    "fit_mle",
    "forecast_one_step",
    "simulate_dcs",
    "contraction_rates",
]

PARAM_NAMES = ("mu", "lambda", "v", "eta")
_LOG_PI = math.log(math.pi)
_GUARD = 30.0
MU_BOUND_FACTOR = 100.0
_BETA_MAX = float(np.nextafter(1.0, 0.0))


class DcsState(NamedTuple):
    """Time-varying parameters: location, log-scale, log-shape and skew index."""

    mu: float
    lam: float
    v: float
    eta: float


class ScoreVector(NamedTuple):
    s_mu: float
    s_lam: float
    s_v: float
    s_eta: float


@dataclass(frozen=True)
class DcsCoefficients:
    """Intercepts ``A``, persistences ``B`` and score loadings ``C``.

    Each is a length-4 array in ``(mu, lam, v, eta)`` order.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (4,) or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} must hold four finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def is_stationary(self):
        return bool(np.all(np.abs(self.B) < 1.0))

    def unconditional(self):
        """Fixed point ``A / (1 - B)`` of the recursion with zero scores."""
        return DcsState(*(self.A / (1.0 - self.B)))

    def to_dict(self):
        return {
            name: {"A": float(a), "B": float(b), "C": float(c)}
            for name, a, b, c in zip(PARAM_NAMES, self.A, self.B, self.C)
        }

    @classmethod
    def from_dict(cls, d):
        rows = [d[name] for name in PARAM_NAMES]
        return cls(*(np.array([r[k] for r in rows]) for k in ("A", "B", "C")))


@dataclass
class ModelFit:
    """Filtered (and possibly estimated) DCS model.

    ``states[t]`` is the predictive state for observation ``t`` and
    ``scores[t]`` the score evaluated at that observation.
    """

    coefficients: DcsCoefficients
    log_likelihood: float
    states: np.ndarray
    scores: np.ndarray
    loglik_terms: np.ndarray
    clamp_count: int = 0
    convergence: dict = field(default_factory=dict)

    @property
    def n_obs(self):
        return self.states.shape[0]

    @property
    def state_path(self):
        return [DcsState(*row) for row in self.states]

    @property
    def score_path(self):
        return [ScoreVector(*row) for row in self.scores]

    @property
    def final_state(self):
        return DcsState(*self.states[-1])

    def to_dict(self):
        return {
            "coefficients": self.coefficients.to_dict(),
            "log_likelihood": float(self.log_likelihood),
            "n_obs": int(self.n_obs),
            "final_state": dict(zip(PARAM_NAMES, map(float, self.states[-1]))),
            "clamp_count": int(self.clamp_count),
            "convergence": self.convergence,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# link, density and scores
# ---------------------------------------------------------------------------


def _check_state(state):
    state = DcsState(*map(float, state))
    if not all(math.isfinite(x) for x in state):
        raise DomainError(f"state must be finite: {state}")
    return state


def link(state):
    """Map a state to valid NIG parameters."""
    mu, lam, v, eta = _check_state(state)
    delta = math.exp(lam)
    alpha = math.exp(v - lam)
    th = max(-_BETA_MAX, min(_BETA_MAX, math.tanh(eta)))
    beta = alpha * th
    if abs(beta) >= alpha:
        beta = math.copysign(float(np.nextafter(alpha, 0.0)), beta)
    return NigParams(mu, delta, alpha, beta)


def inverse_link(p):
    """State whose link is ``p``."""
    return DcsState(p.mu, math.log(p.delta), math.log(p.delta * p.alpha), math.atanh(p.beta / p.alpha))


@njit(cache=True)
def _kernel(mu, lam, v, eta, r, out, slope, with_slope):
    """Log-density, scores into ``out`` and, if asked, score slopes into ``slope``.

    ``slope`` holds ``ds_mu/dmu, ds_lam/dlam, ds_v/dv, ds_eta/deta`` and the
    cross term ``ds_lam/dv``; they drive the filter contraction check.
    """
    y = r - mu
    delta = math.exp(lam)
    ev = math.exp(v)
    alpha = ev / delta
    ch = math.cosh(eta)
    sech = 1.0 / ch
    th = math.tanh(eta)
    beta = alpha * th
    u = (y / delta) ** 2
    root = math.sqrt(1.0 + u)
    s = delta * root
    z = ev * root
    k0e, k1e = k01e(z)
    ratio = k0e / k1e + 1.0 / z
    by = beta * y
    # expo = delta gamma + beta y - alpha s <= 0, formed without cancellation
    if by > 0.0:
        yt = y / delta
        dev = yt * sech - th
        expo = -ev * dev * dev / (root + sech + yt * th)
    else:
        sh = math.sinh(0.5 * eta)
        expo = ev * (-2.0 * sh * sh * sech - u / (1.0 + root)) + by
    logf = expo + v - _LOG_PI - math.log(s) + math.log(k1e)
    d_mu = -beta + y / (s * s) + alpha * y * ratio / s
    out[0] = d_mu * delta * delta
    if by > 0.0:
        out[1] = -1.0 / (1.0 + u) - expo + ev * (sech - ratio / root) + (ratio - 1.0) * z
    else:
        out[1] = -1.0 / (1.0 + u) - by + ratio * ev * u / root
    out[2] = 1.0 + expo - (ratio - 1.0) * z
    out[3] = alpha * sech * sech * y - ev * th * sech
    if with_slope:
        # d ratio / dz from the Bessel equation
        rp = ratio * ratio - ratio / z - 1.0 - 1.0 / (z * z)
        r3 = root * root * root
        slope[0] = -((1.0 - u) / (r3 * root) + ev * ev * rp * u / (1.0 + u) + ev * ratio / r3)
        slope[1] = by - 2.0 * u / ((1.0 + u) * (1.0 + u)) - ev * ev * rp * u * u / (1.0 + u) - ev * ratio * u * (u + 2.0) / r3
        slope[2] = expo - z * (rp * z + ratio - 1.0)
        slope[3] = -2.0 * alpha * y * sech * sech * th - ev * sech * (sech * sech - th * th)
        slope[4] = -by + (rp * z + ratio) * ev * u / root
    return logf


@njit(cache=True)
def _density_and_scores(mu, lam, v, eta, r, out):
    """Fill ``out`` with the four scores and return the log-density."""
    return _kernel(mu, lam, v, eta, r, out, out, False)


@njit(cache=True)
def _density_scores_slopes(mu, lam, v, eta, r, out, slope):
    return _kernel(mu, lam, v, eta, r, out, slope, True)


@njit(cache=True)
def _log_density(mu, lam, v, eta, r):
    tmp = np.empty(4)
    return _density_and_scores(mu, lam, v, eta, r, tmp)


def log_cond_density(state, r):
    """Conditional log-density of ``r`` given the state."""
    mu, lam, v, eta = _check_state(state)
    r = float(r)
    if not math.isfinite(r):
        raise DomainError("observation must be finite")
    return float(_log_density(mu, lam, v, eta, r))


def scores(state, r):
    """Scores of the log-density at ``r``; the location score is scaled by ``exp(2 lam)``."""
    mu, lam, v, eta = _check_state(state)
    r = float(r)
    if not math.isfinite(r):
        raise DomainError("observation must be finite")
    out = np.empty(4)
    _density_and_scores(mu, lam, v, eta, r, out)
    return ScoreVector(*map(float, out))


def dcs_update(coeff, state, score, q=0.0):
    """One step of the recursion; ``q`` enters the log-scale equation only."""
    nxt = coeff.A + coeff.B * np.asarray(state, dtype=float) + coeff.C * np.asarray(score, dtype=float)
    nxt[1] += q
    return DcsState(*map(float, nxt))


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


@njit(cache=True)
def _guard(st):
    """Clamp log-scale and log-tail into [-30, 30]; return 1 if anything moved."""
    hit = 0
    if st[1] > 30.0:
        st[1] = 30.0
        hit = 1
    elif st[1] < -30.0:
        st[1] = -30.0
        hit = 1
    d = st[2] - st[1]
    if d > 30.0:
        st[2] = st[1] + 30.0
        hit = 1
    elif d < -30.0:
        st[2] = st[1] - 30.0
        hit = 1
    if st[3] > 30.0:
        st[3] = 30.0
        hit = 1
    elif st[3] < -30.0:
        st[3] = -30.0
        hit = 1
    return hit


@njit(cache=True)
def _filter(A, B, C, r, q, init, states, scores_out, terms):
    st = init.copy()
    clamps = _guard(st)
    sc = np.empty(4)
    total = 0.0
    T = r.size
    for t in range(T):
        states[t, :] = st
        ll = _density_and_scores(st[0], st[1], st[2], st[3], r[t], sc)
        terms[t] = ll
        total += ll
        scores_out[t, :] = sc
        for i in range(4):
            st[i] = A[i] + B[i] * st[i] + C[i] * sc[i]
        if t + 1 < T:
            st[1] += q[t + 1]
        clamps += _guard(st)
    return total, clamps


@njit(cache=True)
def _loglik(A, B, C, r, q, init, mu_bound):
    """Log-likelihood, or ``-1e300`` for an inadmissible filter.

    A path is inadmissible when it needs a guard clamp, its location exceeds
    ``mu_bound``, or some recursion fails to contract: the sample mean of
    ``log|B_i + C_i ds_i/df_i|`` must be negative for every coordinate.
    """
    st = init.copy()
    if _guard(st):
        return -1e300
    sc = np.empty(4)
    sl = np.empty(5)
    lyap = np.zeros(4)
    total = 0.0
    T = r.size
    for t in range(T):
        ll = _density_scores_slopes(st[0], st[1], st[2], st[3], r[t], sc, sl)
        if not math.isfinite(ll):
            return -1e300
        total += ll
        for i in range(4):
            lyap[i] += math.log(abs(B[i] + C[i] * sl[i]) + 1e-300)
            st[i] = A[i] + B[i] * st[i] + C[i] * sc[i]
        if t + 1 < T:
            st[1] += q[t + 1]
        if _guard(st) or abs(st[0]) > mu_bound:
            return -1e300
    for i in range(4):
        if lyap[i] >= 0.0:
            return -1e300
    return total


@njit(cache=True)
def _contraction(B, C, states, r):
    """Per-coordinate mean ``log|B_i + C_i ds_i/df_i|`` along a filtered path."""
    sc = np.empty(4)
    sl = np.empty(5)
    lyap = np.zeros(4)
    for t in range(r.size):
        _density_scores_slopes(states[t, 0], states[t, 1], states[t, 2], states[t, 3], r[t], sc, sl)
        for i in range(4):
            lyap[i] += math.log(abs(B[i] + C[i] * sl[i]) + 1e-300)
    return lyap / r.size


def contraction_rates(fit, returns):
    """Mean log one-step multipliers of each recursion; all negative for an invertible filter."""
    r = _returns(returns)
    if r.size != fit.n_obs:
        raise DataError(f"expected {fit.n_obs} returns, got {r.size}")
    c = fit.coefficients
    return _contraction(c.B, c.C, np.ascontiguousarray(fit.states), r)


def _seasonal(q, T):
    if q is None:
        return np.zeros(T)
    q = np.asarray(q, dtype=float)
    if q.shape != (T,):
        raise DataError(f"seasonal term must have length {T}, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DataError("seasonal term contains non-finite values")
    return q


def _returns(returns):
    r = np.ascontiguousarray(returns, dtype=float)
    if r.ndim != 1 or r.size < 1:
        raise DataError("returns must be a non-empty one-dimensional sequence")
    bad = np.flatnonzero(~np.isfinite(r))
    if bad.size:
        raise DataError(f"non-finite return at index {bad[0]}")
    return r


def default_init(coeff, q=None):
    """Unconditional state, with the first seasonal value added to the log-scale."""
    init = np.array(coeff.unconditional(), dtype=float)
    if q is not None:
        init[1] += float(np.asarray(q)[0])
    return DcsState(*init)


def dcs_filter(coeff, returns, q=None, init=None):
    """Run the score recursion over ``returns``.

    Parameters
    ----------
    coeff : DcsCoefficients
    returns : array_like
        Observations in time order.
    q : array_like, optional
        Seasonal term aligned with ``returns``; ``q[t]`` is added when
        forming the state for observation ``t``.
    init : DcsState, optional
        State for the first observation; defaults to :func:`default_init`.
    """
    r = _returns(returns)
    T = r.size
    qq = _seasonal(q, T)
    if init is None:
        init = default_init(coeff, qq)
    init = np.array(_check_state(init), dtype=float)
    states = np.empty((T, 4))
    sc = np.empty((T, 4))
    terms = np.empty(T)
    total, clamps = _filter(coeff.A, coeff.B, coeff.C, r, qq, init, states, sc, terms)
    return ModelFit(coeff, float(total), states, sc, terms, int(clamps))


def forecast_one_step(fit, last_return, q_next=0.0):
    """Predictive state for the observation after ``last_return``.

    ``last_return`` is the observation that the final filtered state predicted.
    """
    if fit.n_obs < 1:
        raise DataError("fit has no filtered state")
    state = fit.final_state
    nxt = np.array(dcs_update(fit.coefficients, state, scores(state, last_return), q_next))
    _guard(nxt)
    return DcsState(*map(float, nxt))


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


@dataclass
class FitOptions:
    """Settings for :func:`fit_mle`.

    The simplex stops when its log-likelihood spread is below ``fatol``;
    ``xatol`` adds a coordinate-spread requirement and is off by default.
    """

    min_obs: int = 250
    maxiter: int = 5000
    fatol: float = 1e-8
    xatol: float = math.inf
    restarts: int = 3
    seed: int = 0
    b_start: float = 0.9
    c_start: float = 0.02
    raise_on_failure: bool = True
    start: Optional[DcsCoefficients] = None
    fixed_c: Optional[np.ndarray] = None


class _Packing:
    """Unconstrained vector <-> ``(A, B, C)`` for ``k`` recursions.

    Coordinates per recursion are the unconditional mean divided by a data
    scale, ``atanh(B)`` and ``C``.
    """

    def __init__(self, scale, fixed_c=None):
        self.scale = np.asarray(scale, dtype=float)
        self.k = self.scale.size
        self.fixed_c = None if fixed_c is None else np.asarray(fixed_c, dtype=float)

    def unpack(self, x):
        k = self.k
        m = x[:k] * self.scale
        B = np.tanh(x[k : 2 * k])
        C = self.fixed_c if self.fixed_c is not None else x[2 * k : 3 * k]
        return m * (1.0 - B), B, C

    def pack(self, A, B, C):
        B = np.clip(B, -0.999999, 0.999999)
        parts = [A / (1.0 - B) / self.scale, np.arctanh(B)]
        if self.fixed_c is None:
            parts.append(np.asarray(C, dtype=float))
        return np.concatenate(parts)

    def steps(self):
        st = [0.2] * self.k + [0.3] * self.k
        if self.fixed_c is None:
            st += [0.02] * self.k
        return np.array(st)


def start_coefficients(returns, b=0.9, c=0.02):
    """Persistent start near the static NIG fit of ``returns``."""
    target = np.array(inverse_link(nig_fit_static(returns)))
    B = np.full(4, b)
    return DcsCoefficients((1.0 - B) * target, B, np.full(4, c))


def _nelder_mead(fun, x0, steps, opts):
    simplex = np.vstack([x0] + [x0 + np.eye(x0.size)[i] * steps[i] for i in range(x0.size)])
    return optimize.minimize(
        fun,
        x0,
        method="Nelder-Mead",
        options={
            "maxiter": opts.maxiter,
            "maxfev": 2 * opts.maxiter,
            "fatol": opts.fatol,
            "xatol": opts.xatol,
            "adaptive": True,
            "initial_simplex": simplex,
        },
    )


def minimize_restarts(fun, x0, steps, opts):
    """Nelder-Mead followed by jittered restarts around the incumbent.

    Returns ``(x_best, f_best, info)``; ``info['converged']`` reports whether
    the run that produced the incumbent met the tolerances.
    """
    rng = np.random.default_rng(opts.seed)
    f0 = fun(x0)
    res = _nelder_mead(fun, x0, steps, opts)
    best_x, best_f, best_ok = res.x, res.fun, bool(res.success)
    nit, nfev = int(res.nit), int(res.nfev)
    for _ in range(opts.restarts):
        x_try = best_x + rng.normal(scale=0.5, size=best_x.size) * steps
        res = _nelder_mead(fun, x_try, steps, opts)
        nit += int(res.nit)
        nfev += int(res.nfev)
        if res.fun < best_f - 1e-12:
            best_x, best_f, best_ok = res.x, res.fun, bool(res.success)
        elif res.fun <= best_f + 1e-6:
            best_ok = best_ok or bool(res.success)
    if not best_ok:
        res = _nelder_mead(fun, best_x, steps, opts)
        nit += int(res.nit)
        nfev += int(res.nfev)
        if res.fun <= best_f:
            best_x, best_f, best_ok = res.x, res.fun, bool(res.success)
    if best_f > f0:
        best_x, best_f = x0, f0
    if best_f >= 1e300:
        best_ok = False
    info = {
        "converged": best_ok,
        "iterations": nit,
        "evaluations": nfev,
        "restarts": int(opts.restarts),
        "objective_start": float(-f0),
    }
    return best_x, best_f, info


def fit_mle(returns, q=None, options=None):
    """Maximum likelihood estimate of the twelve recursion coefficients.

    Raises
    ------
    DataError
        If fewer than ``options.min_obs`` observations are supplied.
    EstimationError
        If the optimiser stops without meeting its tolerances and
        ``options.raise_on_failure`` is set; ``best`` carries the incumbent fit.
    """
    opts = options or FitOptions()
    r = _returns(returns)
    if r.size < opts.min_obs:
        raise DataError(f"need at least {opts.min_obs} observations, got {r.size}")
    qq = _seasonal(q, r.size)
    start = opts.start or start_coefficients(r, opts.b_start, opts.c_start)
    if opts.fixed_c is not None:
        start = DcsCoefficients(start.A, start.B, opts.fixed_c)
    packing = _Packing([float(np.std(r)), 1.0, 1.0, 1.0], opts.fixed_c)
    mu_bound = MU_BOUND_FACTOR * float(np.max(np.abs(r)))

    def objective(x):
        A, B, C = packing.unpack(x)
        init = A / (1.0 - B)
        init[1] += qq[0]
        val = -_loglik(A, B, C, r, qq, init, mu_bound)
        return val if math.isfinite(val) else 1e300

    x0 = packing.pack(start.A, start.B, start.C)
    if opts.start is not None and objective(x0) >= 1e300:
        # a warm start that is infeasible on this sample falls back to the default
        fallback = start_coefficients(r, opts.b_start, opts.c_start)
        c0 = fallback.C if opts.fixed_c is None else opts.fixed_c
        x0 = packing.pack(fallback.A, fallback.B, c0)
    x_best, _, info = minimize_restarts(objective, x0, packing.steps(), opts)
    fit = dcs_filter(DcsCoefficients(*packing.unpack(x_best)), r, qq)
    fit.convergence = info
    logger.debug("fit_mle: loglik %.6f, %s", fit.log_likelihood, info)
    if not info["converged"] and opts.raise_on_failure:
        raise EstimationError(
            f"Nelder-Mead did not converge after {info['iterations']} iterations", best=fit
        )
    return fit


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@njit(cache=True)
def _simulate(A, B, C, q, init, normals, uniforms, gauss, out_r, out_states):
    st = init.copy()
    _guard(st)
    sc = np.empty(4)
    T = out_r.size
    for t in range(T):
        out_states[t, :] = st
        delta = math.exp(st[1])
        alpha = math.exp(st[2] - st[1])
        beta = alpha * math.tanh(st[3])
        gamma = alpha / math.cosh(st[3])
        mean = delta / gamma
        shape = delta * delta
        w = mean * normals[t] ** 2 / (2.0 * shape)
        root = mean / (1.0 + w + math.sqrt(w * w + 2.0 * w))
        zz = root if uniforms[t] * (mean + root) <= mean else mean * mean / root
        r = st[0] + beta * zz + math.sqrt(zz) * gauss[t]
        out_r[t] = r
        _density_and_scores(st[0], st[1], st[2], st[3], r, sc)
        for i in range(4):
            st[i] = A[i] + B[i] * st[i] + C[i] * sc[i]
        if t + 1 < T:
            st[1] += q[t + 1]
        _guard(st)


def simulate_dcs(coeff, T, q=None, seed=0, return_states=False):
    """Generate ``T`` observations from the model with the given coefficients.

    Each step draws ``r_t ~ NIG(link(state_t))`` through the inverse Gaussian
    mixture and then updates the state with the realised score.
    """
    if T < 1:
        raise DomainError("T must be at least 1")
    if not coeff.is_stationary:
        raise DomainError(f"explosive coefficients: |B| >= 1 in {coeff.B}")
    qq = _seasonal(q, T)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    normals = rng.standard_normal(T)
    uniforms = rng.random(T)
    gauss = rng.standard_normal(T)
    init = np.array(default_init(coeff, qq), dtype=float)
    out_r = np.empty(T)
    out_states = np.empty((T, 4))
    _simulate(coeff.A, coeff.B, coeff.C, qq, init, normals, uniforms, gauss, out_r, out_states)
    if return_states:
        return out_r, out_states
    return out_r
