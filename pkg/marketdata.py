"""
Market data pipeline: daily closes -> log returns -> annualized rolling
volatility -> standardized 64-step windows split on a shared calendar.

Also holds the synthetic shared-factor volatility generator used when no
price file is available.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.preprocessing import StandardScaler

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

VOL_WINDOW = 21
ANNUALIZATION = math.sqrt(252)
WINDOW_LEN = 64
MAX_MISSING = 10
PRICE_COLUMNS = ["date", "ticker", "close"]
VOLATILITY_COLUMNS = ["date", "ticker", "volatility"]
CSV_FLOAT_FORMAT = "%.17g"


def _frozen(values, dtype):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _strictly_increasing(dates):
    return dates.size < 2 or bool(np.all(dates[1:] > dates[:-1]))


# --- Domain types ---

@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    dates: np.ndarray
    closes: np.ndarray

    def __post_init__(self):
        dates = _frozen(self.dates, "datetime64[D]")
        closes = _frozen(self.closes, np.float64)
        if dates.shape != closes.shape or dates.ndim != 1:
            raise DataError(f"{self.ticker}: dates and closes must be 1-D with equal length")
        if not _strictly_increasing(dates):
            raise DataError(f"{self.ticker}: dates must be strictly increasing")
        if not np.all(np.isfinite(closes)) or np.any(closes <= 0):
            raise DataError(f"{self.ticker}: closes must be finite and strictly positive")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "closes", closes)

    def __len__(self):
        return self.closes.size


@dataclass(frozen=True)
class VolatilitySeries:
    ticker: str
    dates: np.ndarray
    values: np.ndarray
    window: int = VOL_WINDOW
    annualization_factor: float = ANNUALIZATION

    def __post_init__(self):
        dates = _frozen(self.dates, "datetime64[D]")
        values = _frozen(self.values, np.float64)
        if dates.shape != values.shape or dates.ndim != 1:
            raise DataError(f"{self.ticker}: dates and values must be 1-D with equal length")
        if not _strictly_increasing(dates):
            raise DataError(f"{self.ticker}: dates must be strictly increasing")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DataError(f"{self.ticker}: volatility values must be finite and non-negative")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def until(self, cut_date):
        """Values dated on or before ``cut_date``."""
        return self.values[self.dates <= np.datetime64(cut_date, "D")]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    holdout_tickers: frozenset = frozenset()
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        object.__setattr__(self, "holdout_tickers", frozenset(self.holdout_tickers))


@dataclass(frozen=True)
class Windows:
    """65-step slices (64 inputs + next value) cut from one volatility series."""

    slices: np.ndarray
    end_dates: np.ndarray
    last_input_dates: np.ndarray

    def __len__(self):
        return self.slices.shape[0]


@dataclass(frozen=True)
class WindowedDataset:
    inputs: np.ndarray
    targets: np.ndarray
    scalar_targets: np.ndarray
    mean: float
    std: float
    origin: tuple
    input_end_dates: np.ndarray
    end_dates: np.ndarray

    def __post_init__(self):
        if not self.std > 0:
            raise DataError(f"standardization std must be positive, got {self.std}")

    @classmethod
    def from_slices(cls, slices, origin, input_end_dates, mean=None, std=None):
        """Standardize raw 65-step slices.

        With no constants given the slices are the training set and the total
        mean/std over every slice element (overlaps included) is fitted here.
        """
        slices = np.asarray(slices, dtype=np.float64)
        if mean is None or std is None:
            if slices.size == 0:
                raise DataError("cannot fit standardization constants on an empty training set")
            scaler = StandardScaler().fit(slices.reshape(-1, 1))
            mean, std = float(scaler.mean_[0]), float(scaler.scale_[0])
        z = (slices - mean) / std
        origin = tuple(origin)
        return cls(
            inputs=_frozen(z[:, :-1], np.float64),
            targets=_frozen(z[:, 1:], np.float64),
            scalar_targets=_frozen(z[:, -1], np.float64),
            mean=float(mean),
            std=float(std),
            origin=origin,
            input_end_dates=_frozen(input_end_dates, "datetime64[D]"),
            end_dates=_frozen([date for _, date in origin], "datetime64[D]"),
        )

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def window_len(self):
        return self.inputs.shape[1]

    @property
    def tickers(self):
        return sorted({ticker for ticker, _ in self.origin})

    def standardize(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def raw_slices(self):
        return self.destandardize(np.column_stack([self.inputs, self.scalar_targets]))

    def with_constants(self, mean, std):
        """Re-express the same windows in another model's standardization."""
        return WindowedDataset.from_slices(
            self.raw_slices(), self.origin, self.input_end_dates, mean=mean, std=std
        )


@dataclass(frozen=True)
class DatasetSplit:
    joint_train: WindowedDataset
    individual_train: dict
    test: dict
    cut_date: np.datetime64
    holdouts: tuple = field(default=())


@dataclass(frozen=True)
class GeneratorSettings:
    """Shared-factor AR(1) log-volatility process.

    log v_i(t) = mu_i + phi (log v_i(t-1) - mu_i) + beta_i f(t) + sigma eps_i(t)
    f(t)       = factor_phi f(t-1) + factor_sigma eta(t)
    """

    n_series: int = 60
    n_days: int = 2000
    phi: float = 0.97
    sigma: float = 0.06
    factor_phi: float = 0.98
    factor_sigma: float = 0.05
    mu_mean: float = math.log(0.25)
    mu_spread: float = 0.3
    beta_mean: float = 1.0
    beta_spread: float = 0.25
    start_date: str = "2009-01-02"

    def __post_init__(self):
        if self.n_series < 1:
            raise ConfigError("generator.n_series must be >= 1")
        if self.n_days < WINDOW_LEN + 2:
            raise ConfigError(f"generator.n_days must be >= {WINDOW_LEN + 2}")
        for name in ("phi", "factor_phi"):
            if not -1.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"generator.{name} must lie in (-1, 1), got {getattr(self, name)}")
        for name in ("sigma", "factor_sigma", "mu_spread", "beta_spread"):
            if getattr(self, name) < 0:
                raise ConfigError(f"generator.{name} must be >= 0")


# --- Ingestion ---

def _parse_close(text):
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        return None
    if not math.isfinite(value) or value <= 0:
        return None
    return value


def align_to_calendar(dates, closes, calendar):
    """One ticker's closes on the panel calendar inside its own date span; gaps are NaN."""
    frame = pd.Series(closes, index=pd.DatetimeIndex(dates))
    span = calendar[(calendar >= frame.index[0]) & (calendar <= frame.index[-1])]
    return frame.reindex(span)


def ingest_prices(path, max_missing=MAX_MISSING):
    """Read a `date,ticker,close` CSV into cleaned PriceSeries, one per ticker."""
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read price file {path}: {e}") from e
    except pd.errors.ParserError as e:
        raise DataError(f"malformed price file {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"price file {path} is empty") from e

    if list(raw.columns) != PRICE_COLUMNS:
        raise DataError(f"{path}: expected header {','.join(PRICE_COLUMNS)}, got {','.join(raw.columns)}")

    short = raw.isna().any(axis=1)
    if short.any():
        line = int(np.flatnonzero(short.to_numpy())[0]) + 2
        raise DataError(f"{path}, line {line}: expected 3 fields")

    dates = pd.to_datetime(raw["date"], format="%Y-%m-%d", errors="coerce")
    closes = raw["close"].map(_parse_close)
    bad = dates.isna() | (raw["ticker"].str.strip() == "") | closes.isna() & (raw["close"] != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}, line {row + 2}: malformed row {raw.iloc[row].tolist()}")

    frame = pd.DataFrame({"date": dates, "ticker": raw["ticker"].str.strip(), "close": closes.astype(float)})
    duplicated = frame.duplicated(subset=["ticker", "date"])
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise DataError(f"{path}, line {row + 2}: duplicate observation for {frame['ticker'].iat[row]}")

    calendar = pd.DatetimeIndex(np.sort(frame["date"].unique()))
    result = []
    dropped_gaps, dropped_leading = [], []
    for ticker, rows in frame.sort_values(["ticker", "date"]).groupby("ticker", sort=True):
        aligned = align_to_calendar(rows["date"].to_numpy(), rows["close"].to_numpy(), calendar)
        if int(aligned.isna().sum()) > max_missing:
            dropped_gaps.append(ticker)
            continue
        if math.isnan(aligned.iloc[0]):
            dropped_leading.append(ticker)
            continue
        filled = aligned.ffill()
        result.append(PriceSeries(ticker, filled.index.to_numpy(), filled.to_numpy()))

    if dropped_gaps:
        logger.warning(
            "Dropped %d ticker(s) with more than %d missing observations: %s",
            len(dropped_gaps), max_missing, ", ".join(dropped_gaps),
        )
    if dropped_leading:
        logger.warning(
            "Dropped %d ticker(s) whose first observation is missing: %s",
            len(dropped_leading), ", ".join(dropped_leading),
        )
    logger.info("Ingested %d price series from %s", len(result), path)
    return result


# --- Volatility ---

def log_returns(series):
    closes = series.closes if isinstance(series, PriceSeries) else np.asarray(series, dtype=np.float64)
    if closes.size < 2:
        raise DataError("need at least 2 prices to compute a return")
    if not np.all(np.isfinite(closes)) or np.any(closes <= 0):
        raise DataError("non-positive or non-finite price encountered")
    return np.diff(np.log(closes))


def rolling_volatility(returns, window=VOL_WINDOW, annualize=ANNUALIZATION):
    """Annualized sample (ddof=1) standard deviation over a trailing window."""
    returns = np.asarray(returns, dtype=np.float64)
    if window < 2:
        raise ValueError("window must be >= 2")
    if returns.size < window:
        raise DataError(f"series of {returns.size} returns is shorter than the {window}-day window")
    variance = pd.Series(returns).rolling(window=window, min_periods=window).var(ddof=1)
    std = np.sqrt(np.maximum(variance.to_numpy()[window - 1:], 0.0))
    return annualize * std


def featurize(series, window=VOL_WINDOW, annualize=ANNUALIZATION):
    """PriceSeries -> VolatilitySeries, each value dated at the last return it covers."""
    values = rolling_volatility(log_returns(series), window=window, annualize=annualize)
    return VolatilitySeries(
        ticker=series.ticker,
        dates=series.dates[window:],
        values=values,
        window=window,
        annualization_factor=annualize,
    )


def featurize_all(prices, window=VOL_WINDOW, annualize=ANNUALIZATION):
    """Featurize every ticker, skipping (with a warning) those too short for one window."""
    series = []
    for p in prices:
        try:
            series.append(featurize(p, window, annualize))
        except DataError as e:
            logger.warning("Skipping %s: %s", p.ticker, e)
    return series


def write_volatility_csv(series_list, path):
    frames = [
        pd.DataFrame({"date": pd.DatetimeIndex(s.dates).strftime("%Y-%m-%d"), "ticker": s.ticker, "volatility": s.values})
        for s in sorted(series_list, key=lambda s: s.ticker)
    ]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=VOLATILITY_COLUMNS)
    table.to_csv(path, index=False, columns=VOLATILITY_COLUMNS, float_format=CSV_FLOAT_FORMAT, encoding="utf-8")
    return path


def read_volatility_csv(path):
    try:
        table = pd.read_csv(path, dtype={"ticker": str}, float_precision="round_trip", encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read volatility file {path}: {e}") from e
    if list(table.columns) != VOLATILITY_COLUMNS:
        raise DataError(f"{path}: expected header {','.join(VOLATILITY_COLUMNS)}")
    table["date"] = pd.to_datetime(table["date"], format="%Y-%m-%d", errors="coerce")
    table["volatility"] = pd.to_numeric(table["volatility"], errors="coerce")
    bad = table.isna().any(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}, line {row + 2}: malformed row")
    return [
        VolatilitySeries(ticker, rows["date"].to_numpy(), rows["volatility"].to_numpy())
        for ticker, rows in table.sort_values(["ticker", "date"]).groupby("ticker", sort=True)
    ]


# --- Windows and datasets ---

def windowize(values, window_len=WINDOW_LEN, dates=None):
    """All stride-1 slices of ``window_len + 1`` consecutive values."""
    if isinstance(values, VolatilitySeries):
        dates = values.dates
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    if dates is None:
        dates = np.arange(values.size).astype("datetime64[D]")
    dates = np.asarray(dates, dtype="datetime64[D]")
    if values.size < window_len + 1:
        logger.warning("Series of length %d is too short for %d-step windows", values.size, window_len)
        empty = np.empty(0, dtype="datetime64[D]")
        return Windows(np.empty((0, window_len + 1)), empty, empty)
    return Windows(
        slices=sliding_window_view(values, window_len + 1),
        end_dates=dates[window_len:],
        last_input_dates=dates[window_len - 1:-1],
    )


def cut_date_for(series, train_fraction):
    """Last training date on the global calendar of all series."""
    calendar = np.unique(np.concatenate([s.dates for s in series]))
    index = max(int(train_fraction * calendar.size) - 1, 0)
    return calendar[index]


def _stack(parts, window_len):
    if not parts:
        return np.empty((0, window_len + 1)), (), np.empty(0, dtype="datetime64[D]")
    slices = np.concatenate([w.slices[mask] for _, w, mask in parts])
    origin = tuple(
        (ticker, date) for ticker, w, mask in parts for date in w.end_dates[mask]
    )
    last_inputs = np.concatenate([w.last_input_dates[mask] for _, w, mask in parts])
    return slices, origin, last_inputs


def assert_temporal_hygiene(train, test):
    if len(train) and len(test) and test.end_dates.min() <= train.end_dates.max():
        raise AssertionError("a test window ends on or before the last training window")
    if len(test) and np.any(test.input_end_dates >= test.end_dates):
        raise AssertionError("a window's inputs reach its own target date")


def build_datasets(series, split, window_len=WINDOW_LEN):
    """Joint, per-holdout and test datasets on one temporal boundary.

    Test windows are standardized with the joint model's constants; use
    ``with_constants`` to hand them to an individual model.
    """
    by_ticker = {s.ticker: s for s in series}
    missing = sorted(split.holdout_tickers - set(by_ticker))
    if missing:
        raise DataError(f"holdout tickers not in the data: {', '.join(missing)}")

    cut = cut_date_for(series, split.train_fraction)
    windows = {ticker: windowize(by_ticker[ticker], window_len) for ticker in sorted(by_ticker)}

    pool = [(t, w, w.end_dates <= cut) for t, w in windows.items() if t not in split.holdout_tickers]
    slices, origin, last_inputs = _stack(pool, window_len)
    if slices.shape[0] == 0:
        raise DataError("empty training pool: no non-holdout windows end before the split date")
    joint = WindowedDataset.from_slices(slices, origin, last_inputs)
    logger.info(
        "Joint training set: %d windows from %d tickers (cut date %s)",
        len(joint), len(joint.tickers), cut,
    )

    individual, test = {}, {}
    for ticker in sorted(split.holdout_tickers):
        w = windows[ticker]
        train_slices, train_origin, train_last = _stack([(ticker, w, w.end_dates <= cut)], window_len)
        if train_slices.shape[0] == 0:
            raise DataError(f"empty training pool for holdout {ticker}")
        test_slices, test_origin, test_last = _stack([(ticker, w, w.end_dates > cut)], window_len)
        if test_slices.shape[0] == 0:
            raise DataError(f"holdout {ticker} has no test windows after {cut}")
        individual[ticker] = WindowedDataset.from_slices(train_slices, train_origin, train_last)
        test[ticker] = WindowedDataset.from_slices(
            test_slices, test_origin, test_last, mean=joint.mean, std=joint.std
        )
        assert_temporal_hygiene(joint, test[ticker])
        assert_temporal_hygiene(individual[ticker], test[ticker])

    return DatasetSplit(
        joint_train=joint,
        individual_train=individual,
        test=test,
        cut_date=cut,
        holdouts=tuple(sorted(split.holdout_tickers)),
    )


def naive_persistence_loss(dataset):
    """Sequence MSE of predicting every next value by the current one."""
    return float(np.mean((dataset.inputs - dataset.targets) ** 2))


# --- Synthetic panel ---

def generate_synthetic_panel(n_series, n_days, seed, params: Optional[GeneratorSettings] = None):
    params = params or GeneratorSettings()
    if n_series < 1:
        raise ConfigError("n_series must be >= 1")
    if n_days < WINDOW_LEN + 2:
        raise ConfigError(f"n_days must be >= {WINDOW_LEN + 2}")

    rng = np.random.default_rng(seed)
    mu = params.mu_mean + params.mu_spread * rng.standard_normal(n_series)
    beta = params.beta_mean + params.beta_spread * rng.standard_normal(n_series)
    shocks = rng.standard_normal((n_series, n_days))
    factor_shocks = rng.standard_normal(n_days)

    factor = np.zeros(n_days)
    log_vol = np.empty((n_series, n_days))
    log_vol[:, 0] = mu
    for t in range(1, n_days):
        factor[t] = params.factor_phi * factor[t - 1] + params.factor_sigma * factor_shocks[t]
        log_vol[:, t] = (
            mu
            + params.phi * (log_vol[:, t - 1] - mu)
            + beta * factor[t]
            + params.sigma * shocks[:, t]
        )

    dates = pd.bdate_range(params.start_date, periods=n_days).to_numpy()
    width = max(3, len(str(n_series)))
    return [
        VolatilitySeries(f"SYN{i + 1:0{width}d}", dates, np.exp(log_vol[i]))
        for i in range(n_series)
    ]
