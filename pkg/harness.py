"""
Experiment harness: pick holdout stocks, train the individual and joint
CNNs, fit auto-ARIMA per holdout, walk forward over the test period and
write the comparison report.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import joblib
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from arima import auto_arima, forecast_walk_forward
from config import config_digest, config_to_dict
from errors import ConfigError, DataError, NumericalError, StageError
from marketdata import (
    CSV_FLOAT_FORMAT,
    build_datasets,
    featurize_all,
    generate_synthetic_panel,
    ingest_prices,
    naive_persistence_loss,
    read_volatility_csv,
)
from metrics import MODELS, ForecastSeries, MetricRow, aggregate, render_table, score, table_frame
from tcn import build_standard_tcn, load_weights, predict_batch, save_weights, train
from tracking import experiment_params, tracked_run

logger = logging.getLogger(__name__)

FORECAST_COLUMNS = ["date", "actual", "individual", "joint", "arima"]
SCORE_COLUMNS = ["ticker", "individual", "joint", "arima"]
METRIC_NAMES = ("rmse", "smape", "accuracy", "f1")


@dataclass(frozen=True)
class ExperimentData:
    series: dict
    split: object
    holdouts: tuple


@dataclass(frozen=True)
class TrainedCnn:
    model: object
    mean: float
    std: float
    history: list
    naive_loss: float = float("nan")


@dataclass
class StockResult:
    ticker: str
    individual: Optional[TrainedCnn] = None
    arima: Optional[object] = None
    forecasts: Optional[pd.DataFrame] = None
    scores: dict = field(default_factory=dict)
    error: Optional[StageError] = None


@dataclass
class EvaluationReport:
    per_stock: dict
    averaged: dict
    forecasts: dict
    arima_models: dict
    loss_history: dict
    metadata: dict


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def derive_seed(master, *keys):
    """Stable per-task seed from the master seed and task labels (e.g. 'joint', 'AAPL', 'init')."""
    digest = hashlib.sha256("/".join(str(k) for k in keys).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return int(np.random.SeedSequence([int(master), *words]).generate_state(1)[0])


def _stage(name, ticker, fn, *args):
    logger.info("Stage %s%s started", name, f" [{ticker}]" if ticker else "")
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, ticker, e) from e


# --- Data ---

def load_series(cfg):
    data = cfg.data
    if data.source == "synthetic":
        g = cfg.generator
        series = generate_synthetic_panel(g.n_series, g.n_days, derive_seed(cfg.seed, "generator"), g)
    elif data.source == "volatility":
        series = read_volatility_csv(data.path)
    else:
        series = featurize_all(ingest_prices(data.path, data.max_missing), data.vol_window, data.annualization)
    if not series:
        raise DataError("no usable volatility series")
    return series


def select_holdouts(tickers, count, seed):
    """Uniform sample of ``count`` tickers without replacement, fixed by ``seed``."""
    pool = sorted(set(tickers))
    if not 0 <= count <= len(pool):
        raise ConfigError(f"cannot select {count} holdouts from {len(pool)} tickers")
    picks = np.random.default_rng(seed).choice(len(pool), size=count, replace=False)
    return frozenset(pool[i] for i in picks)


def prepare(cfg):
    series = load_series(cfg)
    tickers = sorted(s.ticker for s in series)
    holdouts = cfg.split.holdout_tickers
    if not holdouts:
        if cfg.holdout_count > len(tickers) - 1:
            raise ConfigError(
                f"holdout_count {cfg.holdout_count} leaves no stock for the joint model ({len(tickers)} available)"
            )
        holdouts = select_holdouts(tickers, cfg.holdout_count, cfg.split.seed)
    split = build_datasets(series, dataclasses.replace(cfg.split, holdout_tickers=holdouts), cfg.data.window_len)

    leaked = set(split.joint_train.tickers) & set(holdouts)
    if leaked:
        raise AssertionError(f"joint training windows include holdout tickers: {sorted(leaked)}")
    logger.info("Holdouts: %s", ", ".join(split.holdouts))
    return ExperimentData(series={s.ticker: s for s in series}, split=split, holdouts=split.holdouts)


# --- Stages ---

def train_cnn(dataset, cfg, name, on_epoch=None):
    model = build_standard_tcn(
        seed=derive_seed(cfg.seed, name, "init"),
        n_hidden=cfg.cnn.n_hidden,
        filters=cfg.cnn.filters,
        kernel=cfg.cnn.kernel,
        input_length=dataset.window_len,
    )
    train_cfg = dataclasses.replace(cfg.cnn.train, seed=derive_seed(cfg.seed, name, "shuffle"))
    model, history = train(model, dataset, train_cfg, on_epoch=on_epoch)
    naive = naive_persistence_loss(dataset)
    logger.info("%s: final training loss %.6g (naive persistence %.6g)", name, history[-1], naive)
    return TrainedCnn(model, dataset.mean, dataset.std, history, naive)


def train_joint(data, cfg, on_epoch=None):
    return train_cnn(data.split.joint_train, cfg, "joint", on_epoch=on_epoch)


def train_individual(data, ticker, cfg):
    return train_cnn(data.split.individual_train[ticker], cfg, ticker)


def fit_arima(data, ticker, cfg):
    if not cfg.arima.enabled:
        return None
    history = data.series[ticker].until(data.split.cut_date)
    return auto_arima(history, cfg.arima.max_p, cfg.arima.max_q, cfg.arima.max_d, name=ticker)


def evaluate(data, ticker, individual, joint, arima_model=None):
    """Walk forward over the ticker's test dates; every forecast sees realized values before its date only."""
    s = data.series[ticker]
    test = data.split.test[ticker]
    window_len = test.window_len
    positions = np.searchsorted(s.dates, test.end_dates)
    if not np.array_equal(s.dates[positions], test.end_dates):
        raise AssertionError(f"{ticker}: test dates are not on the series calendar")
    if np.any(test.input_end_dates >= test.end_dates) or not np.array_equal(
        s.dates[positions - 1], test.input_end_dates
    ):
        raise AssertionError(f"{ticker}: a forecast input reaches its own target date")
    if np.any(np.diff(positions) != 1):
        raise AssertionError(f"{ticker}: test dates skip days of the series")

    windows = np.stack([s.values[pos - window_len:pos] for pos in positions])
    actual = s.values[positions]
    previous = s.values[positions - 1]
    predictions = {
        "individual": predict_batch(individual.model, windows, individual.mean, individual.std),
        "joint": predict_batch(joint.model, windows, joint.mean, joint.std),
        "arima": (
            forecast_walk_forward(arima_model, s.values[:positions[-1] + 1], positions[0])
            if arima_model is not None
            else np.full(positions.size, np.nan)
        ),
    }

    forecasts = pd.DataFrame({
        "date": pd.DatetimeIndex(test.end_dates).strftime("%Y-%m-%d"),
        "actual": actual,
        **predictions,
    })[FORECAST_COLUMNS]
    scores = {}
    for model, predicted in predictions.items():
        if np.all(np.isfinite(predicted)):
            scores[model] = score(ForecastSeries(ticker, test.end_dates, actual, predicted, previous))
        else:
            scores[model] = None
    return forecasts, scores


def _fit_arima_or_skip(data, ticker, cfg):
    try:
        return _stage("fit_arima", ticker, fit_arima, data, ticker, cfg)
    except StageError as e:
        if cfg.allow_partial and isinstance(e.cause, (NumericalError, DataError)):
            logger.warning("%s: continuing without ARIMA (%s)", ticker, e.cause)
            return None
        raise


def _stock_task(data, ticker, joint, cfg):
    result = StockResult(ticker)
    try:
        result.individual = _stage("train_individual", ticker, train_individual, data, ticker, cfg)
        result.arima = _fit_arima_or_skip(data, ticker, cfg)
        result.forecasts, result.scores = _stage(
            "evaluate", ticker, evaluate, data, ticker, result.individual, joint, result.arima
        )
    except StageError as e:
        result.error = e
    return result


# --- Report ---

def assemble_report(cfg, data, joint, results, started_at):
    per_stock = {r.ticker: r.scores for r in results}
    averaged = {}
    for model in MODELS:
        rows = [scores[model] for scores in per_stock.values() if scores.get(model) is not None]
        if rows:
            averaged[model] = aggregate(rows)
    loss_history = {"joint": list(joint.history)}
    naive = {"joint": joint.naive_loss}
    for r in results:
        loss_history[r.ticker] = list(r.individual.history)
        naive[r.ticker] = r.individual.naive_loss
    return EvaluationReport(
        per_stock=per_stock,
        averaged=averaged,
        forecasts={r.ticker: r.forecasts for r in results},
        arima_models={r.ticker: r.arima for r in results},
        loss_history=loss_history,
        metadata={
            "seed": cfg.seed,
            "config_digest": config_digest(cfg),
            "config": config_to_dict(cfg),
            "holdouts": list(data.holdouts),
            "cut_date": str(data.split.cut_date),
            "n_series": len(data.series),
            "joint_train_windows": len(data.split.joint_train),
            "naive_persistence_loss": naive,
            "started_at": started_at,
            "finished_at": utc_now(),
        },
    )


def _csv(frame):
    return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def _score_frame(report, metric):
    records = []
    for ticker in sorted(report.per_stock):
        row = report.per_stock[ticker]
        records.append({
            "ticker": ticker,
            **{m: getattr(row[m], metric) if row.get(m) is not None else np.nan for m in SCORE_COLUMNS[1:]},
        })
    return pd.DataFrame.from_records(records, columns=SCORE_COLUMNS)


def _render_tables(report):
    """Every digested output file, relative path -> text."""
    files = {
        "metrics_table.csv": _csv(table_frame(report.averaged)),
        "metrics_table.txt": render_table(report.averaged) + "\n",
        "rmse_scores.csv": _csv(_score_frame(report, "rmse")),
        "accuracy_scores.csv": _csv(_score_frame(report, "accuracy")),
    }
    per_stock = [
        {"ticker": ticker, "model": model, **row.as_dict()}
        for ticker in sorted(report.per_stock)
        for model, row in sorted(report.per_stock[ticker].items())
        if row is not None
    ]
    files["per_stock_metrics.csv"] = _csv(pd.DataFrame(per_stock, columns=["ticker", "model", *METRIC_NAMES]))

    fitted = [m.to_record(t) for t, m in sorted(report.arima_models.items()) if m is not None]
    if fitted:
        files["arima_models.csv"] = _csv(pd.DataFrame(fitted))
    for ticker, frame in sorted(report.forecasts.items()):
        files[f"forecasts/{ticker}.csv"] = _csv(frame)
    for name, history in sorted(report.loss_history.items()):
        epochs = pd.DataFrame({"epoch": np.arange(1, len(history) + 1), "mean_loss": history})
        files[f"loss_history/{name}.csv"] = _csv(epochs)
    return files


def report_digest(report):
    """SHA-256 over the rendered report files; timestamps are not part of it."""
    h = hashlib.sha256()
    for name, text in sorted(_render_tables(report).items()):
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(text.encode("utf-8"))
    return h.hexdigest()


def emit_report(report, directory):
    directory = Path(directory)
    written = []
    for name, text in _render_tables(report).items():
        path = directory / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write {path}: {e}") from e
        written.append(path)

    manifest = {**report.metadata, "digest": report_digest(report), "files": sorted(str(p.relative_to(directory)) for p in written)}
    path = directory / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    written.append(path)
    logger.info("Report written to %s (%d files)", directory, len(written))
    return written


def load_report_tables(directory):
    directory = Path(directory)
    tables = {}
    for name in ("metrics_table", "per_stock_metrics", "rmse_scores", "accuracy_scores"):
        path = directory / f"{name}.csv"
        if not path.exists():
            raise DataError(f"missing report file {path}")
        tables[name] = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    return tables


def averaged_from_table(frame):
    """Rebuild the model -> MetricRow mapping from a metrics_table.csv frame."""
    by_metric = frame.set_index("metric")
    averaged = {}
    for model in MODELS:
        values = [by_metric.loc[label, model] for label in ("RMSE", "SMAPE", "Accuracy", "F1")]
        if not any(pd.isna(v) for v in values):
            averaged[model] = MetricRow(*(float(v) for v in values))
    return averaged


def _flush_partial(directory, error, joint, results):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if joint is not None:
        (directory / "loss_history").mkdir(exist_ok=True)
        pd.DataFrame({"epoch": np.arange(1, len(joint.history) + 1), "mean_loss": joint.history}).to_csv(
            directory / "loss_history" / "joint.csv", index=False, float_format=CSV_FLOAT_FORMAT
        )
    for r in results:
        if r.forecasts is not None:
            (directory / "forecasts").mkdir(exist_ok=True)
            r.forecasts.to_csv(directory / "forecasts" / f"{r.ticker}.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    failure = {
        "stage": error.stage,
        "ticker": error.ticker,
        "error": str(error.cause),
        "error_type": type(error.cause).__name__,
        "completed": sorted(r.ticker for r in results if r.error is None),
        "time": utc_now(),
    }
    (directory / "failure.json").write_text(json.dumps(failure, indent=2) + "\n", encoding="utf-8")
    logger.error("Run failed in stage %s%s; partial output in %s",
                 error.stage, f" [{error.ticker}]" if error.ticker else "", directory)


def _log_report(tracker, report):
    metrics = {}
    for model, row in report.averaged.items():
        metrics.update({f"{model}_{k}": v for k, v in row.as_dict().items()})
    for ticker, scores in report.per_stock.items():
        for model, row in scores.items():
            if row is not None:
                metrics[f"{ticker}_{model}_rmse"] = row.rmse
    tracker.log_metrics(metrics)
    for name, history in report.loss_history.items():
        tracker.log_loss_history(name, history)


def run_experiment(cfg):
    """Full experiment; writes the report to ``cfg.output_dir`` and returns it."""
    started_at = utc_now()
    joint, results = None, []
    with tracked_run(cfg) as tracker:
        tracker.log_params(experiment_params(cfg))
        try:
            data = _stage("prepare", None, prepare, cfg)
            joint = _stage("train_joint", None, train_joint, data, cfg)
            results = Parallel(n_jobs=cfg.n_jobs)(
                delayed(_stock_task)(data, ticker, joint, cfg) for ticker in data.holdouts
            )
            failed = [r.error for r in results if r.error is not None]
            if failed:
                raise failed[0]
        except StageError as e:
            _flush_partial(cfg.output_dir, e, joint, results)
            raise

        report = assemble_report(cfg, data, joint, results, started_at)
        emit_report(report, cfg.output_dir)
        _log_report(tracker, report)
        tracker.log_artifacts(cfg.output_dir)
    return report


# --- Persisted models ---

def save_trained(trained, directory, name):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(trained.model, directory / f"cnn_{name}.npz")
    joblib.dump(
        {"mean": trained.mean, "std": trained.std, "history": trained.history, "naive_loss": trained.naive_loss},
        directory / f"cnn_{name}.joblib",
    )


def load_trained(directory, name):
    directory = Path(directory)
    weights, meta = directory / f"cnn_{name}.npz", directory / f"cnn_{name}.joblib"
    if not weights.exists() or not meta.exists():
        raise DataError(f"no trained model '{name}' in {directory}")
    info = joblib.load(meta)
    return TrainedCnn(load_weights(weights), info["mean"], info["std"], info["history"], info["naive_loss"])


def save_arima_models(models, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    joblib.dump(models, directory / "arima.joblib")


def load_arima_models(directory):
    path = Path(directory) / "arima.joblib"
    if not path.exists():
        raise DataError(f"no fitted ARIMA models in {directory}")
    return joblib.load(path)
