"""Shared fixtures for the test suite."""
import numpy as np
import pandas as pd
import pytest

from config import config_from_dict
from marketdata import VolatilitySeries, generate_synthetic_panel
from tcn import build_standard_tcn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def standard_model():
    return build_standard_tcn(seed=7)


@pytest.fixture
def small_panel():
    """Eight synthetic series over 400 business days."""
    return generate_synthetic_panel(8, 400, seed=3)


@pytest.fixture
def tiny_config(tmp_path):
    """6 stocks (5 held out), 300 days, 5 epochs: small enough for an end-to-end run."""
    return config_from_dict({
        "seed": 11,
        "holdout_count": 5,
        "output_dir": str(tmp_path / "out"),
        "generator": {"n_series": 6, "n_days": 300},
        "cnn": {"train": {"epochs": 5, "batch_size": 64}},
        "arima": {"max_p": 1, "max_q": 1},
    })


@pytest.fixture
def write_prices(tmp_path):
    """Write rows (date, ticker, close) to a prices CSV and return its path."""

    def _write(rows, name="prices.csv", header="date,ticker,close"):
        path = tmp_path / name
        lines = [header] + [",".join(str(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write


def price_rows(ticker, closes, start="2020-01-01"):
    dates = pd.bdate_range(start, periods=len(closes)).strftime("%Y-%m-%d")
    return [(d, ticker, c) for d, c in zip(dates, closes)]


def constant_series(ticker, value, n, start="2020-01-01"):
    return VolatilitySeries(ticker, pd.bdate_range(start, periods=n).to_numpy(), np.full(n, float(value)))
