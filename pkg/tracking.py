"""
MLflow experiment tracking for experiment runs.

Tracking is off unless ``tracking.enabled`` is set; the disabled tracker
accepts the same calls and does nothing.
"""
import logging
from contextlib import contextmanager
from datetime import datetime

import pandas as pd

logger = logging.getLogger(__name__)


class RunTracker:
    def __init__(self, mlflow=None):
        self._mlflow = mlflow

    @property
    def active(self):
        return self._mlflow is not None

    @property
    def run_id(self):
        if not self.active:
            return None
        return self._mlflow.active_run().info.run_id

    def log_params(self, params):
        if self.active:
            self._mlflow.log_params({k: str(v) for k, v in params.items()})

    def log_loss_history(self, name, history):
        if self.active:
            for epoch, loss in enumerate(history, start=1):
                self._mlflow.log_metric(f"{name}_train_loss", float(loss), step=epoch)

    def log_metrics(self, metrics):
        if self.active:
            self._mlflow.log_metrics({k: float(v) for k, v in metrics.items()})

    def log_artifacts(self, directory):
        if self.active:
            self._mlflow.log_artifacts(str(directory))


@contextmanager
def tracked_run(cfg, run_name=None):
    """Open an MLflow run when tracking is enabled, otherwise yield a no-op tracker."""
    if not cfg.tracking.enabled:
        yield RunTracker()
        return

    import mlflow

    if cfg.tracking.tracking_uri:
        mlflow.set_tracking_uri(cfg.tracking.tracking_uri)
    mlflow.set_experiment(cfg.tracking.experiment)
    run_name = run_name or f"experiment_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
    with mlflow.start_run(run_name=run_name):
        tracker = RunTracker(mlflow)
        logger.info("MLflow run %s started in experiment '%s'", tracker.run_id, cfg.tracking.experiment)
        yield tracker


def experiment_params(cfg):
    """Flat parameter dict for a run, one entry per tuned setting."""
    train = cfg.cnn.train
    return {
        "seed": cfg.seed,
        "data_source": cfg.data.source,
        "holdout_count": cfg.holdout_count,
        "train_fraction": cfg.split.train_fraction,
        "window_len": cfg.data.window_len,
        "epochs": train.epochs,
        "batch_size": train.batch_size,
        "target_mode": train.target_mode,
        "adadelta_rho": train.rho,
        "adadelta_epsilon": train.epsilon,
        "n_hidden": cfg.cnn.n_hidden,
        "filters": cfg.cnn.filters,
        "arima_enabled": cfg.arima.enabled,
    }


def list_runs(experiment, metric="joint_rmse", tracking_uri=None, limit=10):
    """Runs of ``experiment`` that recorded ``metric``, best (lowest) first."""
    from mlflow.tracking import MlflowClient

    client = MlflowClient(tracking_uri=tracking_uri)
    found = client.get_experiment_by_name(experiment)
    if found is None:
        return pd.DataFrame(columns=["run_id", "run_name", "status", "start_time", metric])

    rows = []
    for run in client.search_runs(experiment_ids=[found.experiment_id]):
        if metric not in run.data.metrics:
            continue
        rows.append({
            "run_id": run.info.run_id,
            "run_name": run.info.run_name,
            "status": run.info.status,
            "start_time": datetime.fromtimestamp(run.info.start_time / 1000).strftime("%Y-%m-%d %H:%M:%S"),
            metric: run.data.metrics[metric],
        })
    frame = pd.DataFrame(rows, columns=["run_id", "run_name", "status", "start_time", metric])
    return frame.sort_values(metric, kind="stable").head(limit).reset_index(drop=True)
