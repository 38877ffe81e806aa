"""
Forecast evaluation: value errors (RMSE, SMAPE), direction scores
(accuracy, F1 on "up" moves) and cross-stock averaging.
"""
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, f1_score, mean_squared_error

MODELS = ("individual", "arima", "joint")
MODEL_LABELS = {"individual": "CNN Individual", "arima": "ARIMA", "joint": "CNN Joint"}
TABLE_ROWS = (("Value", "rmse", "RMSE"), ("Value", "smape", "SMAPE"),
              ("Direction", "accuracy", "Accuracy"), ("Direction", "f1", "F1"))


@dataclass(frozen=True)
class ForecastSeries:
    ticker: str
    dates: np.ndarray
    actual: np.ndarray
    predicted: np.ndarray
    previous_actual: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("actual", "predicted", "previous_actual"):
            arrays[name] = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arrays[name])
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        object.__setattr__(self, "dates", dates)
        n = dates.size
        if n < 1 or any(a.shape != (n,) for a in arrays.values()):
            raise ValueError(f"{self.ticker}: forecast arrays must be non-empty and of equal length")
        if n > 1 and not np.all(dates[1:] > dates[:-1]):
            raise ValueError(f"{self.ticker}: forecast dates must be strictly increasing")


@dataclass(frozen=True)
class MetricRow:
    rmse: float
    smape: float
    accuracy: float
    f1: float

    def as_dict(self):
        return asdict(self)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty input")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(actual, predicted):
    actual, predicted = _pair(actual, predicted)
    return float(np.sqrt(mean_squared_error(actual, predicted)))


def smape(actual, predicted):
    """Symmetric MAPE in percent, bounded by 200; terms with both values zero count as 0."""
    actual, predicted = _pair(actual, predicted)
    denom = (np.abs(actual) + np.abs(predicted)) / 2.0
    num = np.abs(predicted - actual)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(100.0 * np.mean(terms))


def directions(series):
    """(actual_up, predicted_up) relative to the previous realized value; no change is not up."""
    return series.actual > series.previous_actual, series.predicted > series.previous_actual


def _flags(actual_up, predicted_up):
    actual_up = np.asarray(actual_up, dtype=bool)
    predicted_up = np.asarray(predicted_up, dtype=bool)
    if actual_up.size == 0:
        raise ValueError("empty input")
    if actual_up.shape != predicted_up.shape:
        raise ValueError(f"length mismatch: {actual_up.shape} vs {predicted_up.shape}")
    return actual_up.astype(int), predicted_up.astype(int)


def accuracy(actual_up, predicted_up):
    actual_up, predicted_up = _flags(actual_up, predicted_up)
    return float(accuracy_score(actual_up, predicted_up))


def f1(actual_up, predicted_up):
    actual_up, predicted_up = _flags(actual_up, predicted_up)
    return float(f1_score(actual_up, predicted_up, pos_label=1, zero_division=0))


def score(series):
    actual_up, predicted_up = directions(series)
    return MetricRow(
        rmse=rmse(series.actual, series.predicted),
        smape=smape(series.actual, series.predicted),
        accuracy=accuracy(actual_up, predicted_up),
        f1=f1(actual_up, predicted_up),
    )


def aggregate(rows):
    """Unweighted mean of each metric across stocks."""
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate zero metric rows")
    return MetricRow(*(float(np.mean([getattr(r, name) for r in rows])) for name in ("rmse", "smape", "accuracy", "f1")))


def table_frame(averaged):
    """Averaged metrics as a (section, metric, <model>...) frame; ``averaged`` maps model -> MetricRow."""
    records = []
    for section, key, label in TABLE_ROWS:
        record = {"section": section, "metric": label}
        for model in MODELS:
            row = averaged.get(model)
            record[model] = getattr(row, key) if row is not None else np.nan
        records.append(record)
    return pd.DataFrame.from_records(records, columns=["section", "metric", *MODELS])


def render_table(averaged):
    frame = table_frame(averaged)
    headers = ["", "Metric"] + [MODEL_LABELS[m] for m in MODELS]
    body = []
    previous = None
    for _, row in frame.iterrows():
        section = row["section"] if row["section"] != previous else ""
        previous = row["section"]
        body.append([section, row["metric"]] + [f"{row[m]:.4f}" for m in MODELS])
    widths = [max(len(str(r[i])) for r in [headers] + body) for i in range(len(headers))]

    def line(cells):
        return "  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    rule = "-" * len(line(headers))
    return "\n".join([line(headers), rule, *(line(r) for r in body)])
