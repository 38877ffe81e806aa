"""
Automatic ARIMA baseline.

KPSS-driven choice of the differencing order, conditional-sum-of-squares
(CSS) ARMA estimation with a bounded Nelder-Mead search, an AIC grid over
p, q in 0..3 and rolling one-step-ahead forecasts with fixed parameters.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from errors import ArimaFitError, DataError

logger = logging.getLogger(__name__)

KPSS_CRITICAL_5PCT = 0.463
COEF_BOUND = 0.99
SIGMA2_FLOOR = 1e-12
MIN_KPSS_LENGTH = 10
MIN_AUTO_LENGTH = 30
MAX_ORDER = 3
MAX_DIFF = 2


@dataclass(frozen=True)
class ArimaOrder:
    p: int
    d: int
    q: int

    def __post_init__(self):
        if not (0 <= self.p <= MAX_ORDER and 0 <= self.q <= MAX_ORDER and 0 <= self.d <= MAX_DIFF):
            raise ValueError(f"order ({self.p},{self.d},{self.q}) outside p,q in 0..3, d in 0..2")

    def __str__(self):
        return f"({self.p},{self.d},{self.q})"


@dataclass(frozen=True)
class ArimaModel:
    order: ArimaOrder
    ar: np.ndarray
    ma: np.ndarray
    mean: Optional[float]
    sigma2: float
    aic: float
    n_obs: int
    css: float
    n_cond: int
    converged: bool = True

    def to_record(self, ticker):
        def join(coefs):
            return " ".join(f"{c:.17g}" for c in coefs)

        return {
            "ticker": ticker,
            "p": self.order.p,
            "d": self.order.d,
            "q": self.order.q,
            "ar": join(self.ar),
            "ma": join(self.ma),
            "mean": math.nan if self.mean is None else self.mean,
            "sigma2": self.sigma2,
            "aic": self.aic,
            "n_obs": self.n_obs,
        }


@dataclass(frozen=True)
class KpssResult:
    statistic: float
    lags: int
    reject_at_5pct: bool


@dataclass(frozen=True)
class AutoArimaResult:
    best: ArimaModel
    candidates: list = field(default_factory=list)
    d: int = 0


def _as_order(order):
    return order if isinstance(order, ArimaOrder) else ArimaOrder(*order)


# --- Stationarity ---

def kpss_statistic(series, lags=None):
    """Level-stationarity KPSS statistic with a Bartlett-weighted Newey-West variance.

    ``lags=None`` uses floor(4 (n/100)^(1/4)).
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    if n < MIN_KPSS_LENGTH:
        raise DataError(f"KPSS needs at least {MIN_KPSS_LENGTH} observations, got {n}")
    if lags is None:
        lags = int(math.floor(4.0 * (n / 100.0) ** 0.25))
    lags = int(min(max(lags, 0), n - 1))
    if np.ptp(x) == 0:
        return KpssResult(0.0, lags, False)

    e = x - x.mean()
    partial = np.cumsum(e)
    long_run = float(e @ e)
    for j in range(1, lags + 1):
        long_run += 2.0 * (1.0 - j / (lags + 1.0)) * float(e[j:] @ e[:-j])
    long_run /= n
    if long_run <= 0:
        return KpssResult(0.0, lags, False)

    statistic = float(partial @ partial) / (n * n * long_run)
    return KpssResult(statistic, lags, statistic > KPSS_CRITICAL_5PCT)


def difference(series, d):
    x = np.asarray(series, dtype=np.float64)
    return np.diff(x, n=d) if d > 0 else x.copy()


def integrate(diffs, d, initial):
    """Undo ``difference``: ``initial`` holds the first d values of the original series."""
    y = np.asarray(diffs, dtype=np.float64)
    initial = np.asarray(initial, dtype=np.float64)
    if initial.size != d:
        raise ValueError(f"need {d} initial values to integrate {d} times, got {initial.size}")
    for k in range(d - 1, -1, -1):
        start = np.diff(initial, n=k)[0]
        y = np.concatenate([[start], start + np.cumsum(y)])
    return y


def select_differencing(series, max_d=MAX_DIFF):
    """Smallest d whose d-times differenced series KPSS does not reject; max_d otherwise."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < MIN_KPSS_LENGTH + max_d:
        raise DataError(f"series of length {x.size} is too short to test up to d={max_d}")
    for d in range(max_d + 1):
        if not kpss_statistic(difference(x, d)).reject_at_5pct:
            return d
    return max_d


# --- CSS estimation ---

def css_residuals(w, ar, ma, mean=None, n_cond=None):
    """Innovations e_t for t >= n_cond, with e seeded at zero before that."""
    w = np.asarray(w, dtype=np.float64)
    ar = np.asarray(ar, dtype=np.float64)
    ma = np.asarray(ma, dtype=np.float64)
    p = ar.size
    m = max(ar.size, ma.size) if n_cond is None else n_cond
    if m < p:
        raise ValueError(f"conditioning on {m} observations cannot cover {p} AR lags")
    if w.size <= m:
        raise DataError(f"series of length {w.size} leaves no residuals after conditioning on {m}")
    y = w - (mean or 0.0)
    n = y.size
    u = y[m:].copy()
    for i in range(1, p + 1):
        u -= ar[i - 1] * y[m - i:n - i]
    if ma.size:
        return lfilter([1.0], np.concatenate([[1.0], ma]), u)
    return u


def _unpack(params, p, q, include_mean):
    params = np.asarray(params, dtype=np.float64)
    mean = float(params[p + q]) if include_mean else None
    return params[:p], params[p:p + q], mean


def css_objective(params, w, p, q, include_mean, n_cond):
    ar, ma, mean = _unpack(params, p, q, include_mean)
    e = css_residuals(w, ar, ma, mean, n_cond)
    return float(e @ e)


def _initial_simplex(x0, steps, bounds):
    simplex = [x0]
    for i, step in enumerate(steps):
        vertex = x0.copy()
        lo, hi = bounds[i]
        vertex[i] = x0[i] + step if x0[i] + step <= hi else x0[i] - step
        vertex[i] = min(max(vertex[i], lo), hi)
        simplex.append(vertex)
    return np.array(simplex)


def fit_arma_css(series, order, n_cond=None, start=None, name="series"):
    """Fit an ARIMA(p,d,q) by CSS on the d-times differenced series.

    The mean is estimated iff d = 0. ``start`` (ar, ma, mean) seeds the
    search; the result is never worse than the start.
    """
    order = _as_order(order)
    p, d, q = order.p, order.d, order.q
    w = difference(series, d)
    include_mean = d == 0
    m = max(p, q) if n_cond is None else n_cond
    n_eff = w.size - m
    if n_eff <= p + q + 1:
        raise DataError(
            f"{name}: {w.size} differenced observations are too few for ARIMA{order} "
            f"conditioned on {m}"
        )

    converged = True
    if p == 0 and q == 0:
        mean = float(np.mean(w[m:])) if include_mean else None
        ar, ma = np.zeros(0), np.zeros(0)
        css = css_objective([] if mean is None else [mean], w, 0, 0, include_mean, m)
    else:
        span = max(float(np.ptp(w)), 1e-8)
        bounds = [(-COEF_BOUND, COEF_BOUND)] * (p + q)
        steps = [0.1] * (p + q)
        if include_mean:
            bounds.append((float(w.min()) - span, float(w.max()) + span))
            steps.append(0.1 * max(float(np.std(w)), 1e-8))

        if start is None:
            x0 = np.zeros(p + q + include_mean)
            if include_mean:
                x0[-1] = float(np.mean(w))
        else:
            s_ar, s_ma, s_mean = start
            x0 = np.concatenate([s_ar, s_ma, [s_mean] if include_mean else []]).astype(np.float64)
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])

        base = css_objective(x0, w, p, q, include_mean, m)
        scale = base if base > 0 else 1.0

        def objective(params):
            return css_objective(params, w, p, q, include_mean, m) / scale

        k = x0.size
        options = {"maxiter": 2000 * k, "maxfev": 4000 * k, "xatol": 1e-8, "fatol": 1e-12}
        res = minimize(
            objective, x0, method="Nelder-Mead", bounds=bounds,
            options={**options, "initial_simplex": _initial_simplex(x0, steps, bounds)},
        )
        if not res.success:
            # one restart from the stalled simplex's best vertex
            res = minimize(
                objective, res.x, method="Nelder-Mead", bounds=bounds,
                options={**options, "initial_simplex": _initial_simplex(res.x, steps, bounds)},
            )
        converged = bool(res.success)
        best = res.x if res.fun * scale <= base else x0
        ar, ma, mean = _unpack(best, p, q, include_mean)
        css = css_objective(best, w, p, q, include_mean, m)
        if not converged:
            logger.warning("%s: ARIMA%s did not converge: %s", name, order, res.message)

    sigma2 = css / n_eff
    if not sigma2 > SIGMA2_FLOOR:
        logger.warning("%s: ARIMA%s residual variance %.3g floored at %g", name, order, sigma2, SIGMA2_FLOOR)
        sigma2 = SIGMA2_FLOOR
    loglik = -0.5 * n_eff * (math.log(2.0 * math.pi * sigma2) + 1.0)
    n_params = p + q + 1 + int(include_mean)
    return ArimaModel(
        order=order,
        ar=np.array(ar, dtype=np.float64),
        ma=np.array(ma, dtype=np.float64),
        mean=mean,
        sigma2=float(sigma2),
        aic=float(2 * n_params - 2.0 * loglik),
        n_obs=int(n_eff),
        css=float(css),
        n_cond=int(m),
        converged=converged,
    )


# --- Order selection ---

def _warm_start(fits, p, q):
    """Lower-CSS solution of the (p-1,q) and (p,q-1) fits, padded with a zero coefficient."""
    options = []
    smaller = fits.get((p - 1, q))
    if smaller is not None:
        options.append((smaller.css, (np.append(smaller.ar, 0.0), smaller.ma, smaller.mean)))
    smaller = fits.get((p, q - 1))
    if smaller is not None:
        options.append((smaller.css, (smaller.ar, np.append(smaller.ma, 0.0), smaller.mean)))
    if not options:
        return None
    return min(options, key=lambda item: item[0])[1]


def auto_arima_search(series, max_p=MAX_ORDER, max_q=MAX_ORDER, max_d=MAX_DIFF, name="series"):
    """KPSS-selected d, then every (p, q) on the grid by CSS; minimum AIC wins.

    All candidates share one conditioning length so their AIC values compare.
    Ties go to the smaller p + q, then the smaller p.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size < MIN_AUTO_LENGTH:
        raise DataError(f"{name}: auto ARIMA needs at least {MIN_AUTO_LENGTH} observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{name}: series contains non-finite values")

    d = select_differencing(x, max_d)
    n_cond = max(max_p, max_q)
    fits = {}
    for p in range(max_p + 1):
        for q in range(max_q + 1):
            try:
                fits[(p, q)] = fit_arma_css(
                    x, ArimaOrder(p, d, q), n_cond=n_cond, start=_warm_start(fits, p, q), name=name
                )
            except (DataError, FloatingPointError, ValueError) as e:
                logger.warning("%s: ARIMA(%d,%d,%d) failed: %s", name, p, d, q, e)

    candidates = [fits[key] for key in sorted(fits)]
    eligible = [m for m in candidates if m.converged and math.isfinite(m.aic)]
    if not eligible:
        raise ArimaFitError(name, f"all {(max_p + 1) * (max_q + 1)} candidate fits failed (d={d})")
    best = min(eligible, key=lambda m: (m.aic, m.order.p + m.order.q, m.order.p))
    logger.info("%s: selected ARIMA%s, AIC %.4f (%d/%d candidates usable)",
                name, best.order, best.aic, len(eligible), len(candidates))
    return AutoArimaResult(best=best, candidates=candidates, d=d)


def auto_arima(series, max_p=MAX_ORDER, max_q=MAX_ORDER, max_d=MAX_DIFF, name="series"):
    return auto_arima_search(series, max_p, max_q, max_d, name).best


# --- Forecasting ---

def forecast_one_step(model, history):
    """Next value of the raw series given its realized history up to today."""
    x = np.asarray(history, dtype=np.float64)
    p, d, q = model.order.p, model.order.d, model.order.q
    if x.size < max(d + p, 1):
        raise DataError(f"history of length {x.size} is shorter than the {d + p} values ARIMA{model.order} needs")

    w = difference(x, d)
    mean = model.mean or 0.0
    prediction = mean
    if p:
        prediction += float(model.ar @ (w[::-1][:p] - mean))
    if q and w.size > p:
        m = max(p, min(model.n_cond, w.size - 1))
        e = css_residuals(w, model.ar, model.ma, model.mean, m)[::-1][:q]
        prediction += float(model.ma[:e.size] @ e)

    for k in range(d):
        prediction += float(np.diff(x, n=k)[-1])
    return prediction


def forecast_walk_forward(model, series, start):
    """One-step forecasts for positions start..len-1, each from series[:t] only."""
    x = np.asarray(series, dtype=np.float64)
    if not 0 < start <= x.size:
        raise ValueError(f"start must lie in 1..{x.size}, got {start}")
    return np.array([forecast_one_step(model, x[:t]) for t in range(start, x.size)])
