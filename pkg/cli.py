"""
Command-line entry point.

    python cli.py generate --out data/
    python cli.py run --config config.yaml --seed 7 --out output/
    python cli.py report --out output/
"""
import argparse
import logging
import sys
from pathlib import Path

import harness
from config import config_to_yaml, load_config, override
from errors import ConfigError, DataError, VolcastError
from marketdata import featurize_all, generate_synthetic_panel, ingest_prices, write_volatility_csv
from metrics import render_table
from tracking import list_runs

logger = logging.getLogger(__name__)

VOLATILITY_FILE = "volatility.csv"


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def banner(title):
    print("=" * 60)
    print(title)
    print("=" * 60)


def cmd_featurize(cfg, args):
    source = args.input or cfg.data.path
    if not source:
        raise ConfigError("featurize needs --input or data.path")
    series = featurize_all(ingest_prices(source, cfg.data.max_missing), cfg.data.vol_window, cfg.data.annualization)
    if not series:
        raise DataError(f"no ticker in {source} is long enough for a volatility window")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volatility_csv(series, out / VOLATILITY_FILE)
    print(f"✅ {len(series)} volatility series written to {out / VOLATILITY_FILE}")
    return 0


def cmd_generate(cfg, args):
    g = cfg.generator
    series = generate_synthetic_panel(g.n_series, g.n_days, harness.derive_seed(cfg.seed, "generator"), g)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volatility_csv(series, out / VOLATILITY_FILE)
    print(f"✅ {len(series)} synthetic series x {g.n_days} days written to {out / VOLATILITY_FILE}")
    return 0


def cmd_train_cnn(cfg, args):
    data = harness.prepare(cfg)
    models_dir = Path(cfg.output_dir) / "models"
    banner("Training joint CNN")
    joint = harness.train_joint(data, cfg)
    harness.save_trained(joint, models_dir, "joint")
    print(f"joint: final loss {joint.history[-1]:.6g} (naive persistence {joint.naive_loss:.6g})")
    for ticker in data.holdouts:
        trained = harness.train_individual(data, ticker, cfg)
        harness.save_trained(trained, models_dir, ticker)
        print(f"{ticker}: final loss {trained.history[-1]:.6g} (naive persistence {trained.naive_loss:.6g})")
    print(f"✅ Models saved to {models_dir}")
    return 0


def cmd_fit_arima(cfg, args):
    data = harness.prepare(cfg)
    models_dir = Path(cfg.output_dir) / "models"
    fitted = {}
    for ticker in data.holdouts:
        try:
            fitted[ticker] = harness.fit_arima(data, ticker, cfg)
        except VolcastError as e:
            if not cfg.allow_partial:
                raise
            logger.warning("%s: no ARIMA model (%s)", ticker, e)
            fitted[ticker] = None
    harness.save_arima_models(fitted, models_dir)
    for ticker, model in fitted.items():
        print(f"{ticker}: " + (f"ARIMA{model.order}  AIC {model.aic:.4f}" if model else "not fitted"))
    print(f"✅ ARIMA models saved to {models_dir}")
    return 0


def cmd_evaluate(cfg, args):
    started_at = harness.utc_now()
    data = harness.prepare(cfg)
    models_dir = Path(cfg.output_dir) / "models"
    joint = harness.load_trained(models_dir, "joint")
    arima_models = harness.load_arima_models(models_dir) if cfg.arima.enabled else {}
    results = []
    for ticker in data.holdouts:
        individual = harness.load_trained(models_dir, ticker)
        arima_model = arima_models.get(ticker)
        if cfg.arima.enabled and arima_model is None and not cfg.allow_partial:
            raise ConfigError(f"no ARIMA model for {ticker}; fit one or pass --allow-partial")
        forecasts, scores = harness.evaluate(data, ticker, individual, joint, arima_model)
        results.append(harness.StockResult(ticker, individual, arima_model, forecasts, scores))
    report = harness.assemble_report(cfg, data, joint, results, started_at)
    harness.emit_report(report, cfg.output_dir)
    banner("Evaluation metrics averaged over stocks")
    print(render_table(report.averaged))
    return 0


def cmd_run(cfg, args):
    banner(f"Volatility forecasting experiment (seed {cfg.seed})")
    report = harness.run_experiment(cfg)
    banner("Evaluation metrics averaged over stocks")
    print(render_table(report.averaged))
    print()
    print(f"Holdouts: {', '.join(report.metadata['holdouts'])}")
    print(f"Report digest: {harness.report_digest(report)}")
    print(f"✅ Output written to {cfg.output_dir}")
    return 0


def cmd_report(cfg, args):
    tables = harness.load_report_tables(cfg.output_dir)
    banner("Evaluation metrics averaged over stocks")
    print(render_table(harness.averaged_from_table(tables["metrics_table"])))
    print()
    print(tables["rmse_scores"].to_string(index=False))
    return 0


def cmd_runs(cfg, args):
    experiment = args.experiment or cfg.tracking.experiment
    frame = list_runs(experiment, args.metric, cfg.tracking.tracking_uri)
    banner(f"Runs of '{experiment}' by {args.metric}")
    if frame.empty:
        print(f"No runs have the metric '{args.metric}'.")
    else:
        print(frame.to_string(index=False))
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file (default: ./config.yaml if present)")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--allow-partial", action="store_true", help="continue when an ARIMA fit fails")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = ArgumentParser(description="Volatility forecasting with dilated causal CNNs and auto-ARIMA")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("featurize", parents=[common], help="prices CSV -> volatility CSV")
    p.add_argument("--input", default=None, help="date,ticker,close CSV (default: data.path)")
    p.set_defaults(handler=cmd_featurize)

    sub.add_parser("generate", parents=[common], help="synthetic panel -> volatility CSV").set_defaults(handler=cmd_generate)
    sub.add_parser("train-cnn", parents=[common], help="train joint and individual CNNs").set_defaults(handler=cmd_train_cnn)
    sub.add_parser("fit-arima", parents=[common], help="fit auto-ARIMA per holdout").set_defaults(handler=cmd_fit_arima)
    sub.add_parser("evaluate", parents=[common], help="walk-forward evaluation of saved models").set_defaults(handler=cmd_evaluate)
    sub.add_parser("run", parents=[common], help="full experiment").set_defaults(handler=cmd_run)
    sub.add_parser("report", parents=[common], help="print a written report").set_defaults(handler=cmd_report)

    p = sub.add_parser("runs", parents=[common], help="list tracked MLflow runs")
    p.add_argument("--experiment", default=None)
    p.add_argument("--metric", default="joint_rmse")
    p.set_defaults(handler=cmd_runs)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = override(load_config(args.config), seed=args.seed, output_dir=args.out, allow_partial=args.allow_partial)
        if args.print_config:
            print(config_to_yaml(cfg), end="")
            return 0
        return args.handler(cfg, args)
    except VolcastError as e:
        logger.debug("Failure details", exc_info=True)
        print(f"❌ Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
