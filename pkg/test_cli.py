import pandas as pd
import pytest
import yaml

from cli import main
from conftest import price_rows

TINY = {
    "seed": 11,
    "holdout_count": 2,
    "generator": {"n_series": 3, "n_days": 250},
    "cnn": {"train": {"epochs": 3, "batch_size": 64}},
    "arima": {"max_p": 1, "max_q": 1},
}


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    return str(path)


def test_print_config_exits_zero(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "--print-config", "--seed", "5"]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert printed["seed"] == 5
    assert printed["split"]["seed"] == 5


@pytest.mark.parametrize("argv", [[], ["run", "--seed", "abc"], ["explode"]])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    assert excinfo.value.code == 1


def test_missing_config_file_exits_one(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 1
    assert "Error" in capsys.readouterr().err


def test_missing_price_file_exits_two(tmp_path):
    assert main(["featurize", "--input", str(tmp_path / "absent.csv"), "--out", str(tmp_path)]) == 2


def test_featurize_writes_volatility_csv(tmp_path, write_prices):
    closes = [100.0 * (1.01 if i % 3 else 0.99) ** i for i in range(60)]
    prices = write_prices(price_rows("AAA", closes) + price_rows("BBB", closes[::-1]))
    assert main(["featurize", "--input", str(prices), "--out", str(tmp_path / "vol")]) == 0
    frame = pd.read_csv(tmp_path / "vol" / "volatility.csv")
    assert list(frame.columns) == ["date", "ticker", "volatility"]
    assert frame.groupby("ticker").size().to_dict() == {"AAA": 39, "BBB": 39}


def test_featurize_skips_ticker_too_short_for_a_window(tmp_path, write_prices, caplog):
    closes = [100.0 * (1.01 if i % 3 else 0.99) ** i for i in range(60)]
    prices = write_prices(price_rows("AAA", closes) + price_rows("NEW", closes[:15]))
    assert main(["featurize", "--input", str(prices), "--out", str(tmp_path / "vol")]) == 0
    frame = pd.read_csv(tmp_path / "vol" / "volatility.csv")
    assert frame.groupby("ticker").size().to_dict() == {"AAA": 39}
    assert any("Skipping NEW" in r.getMessage() for r in caplog.records)


def test_featurize_with_no_usable_ticker_exits_two(tmp_path, write_prices):
    prices = write_prices(price_rows("NEW", [100.0 + i for i in range(15)]))
    assert main(["featurize", "--input", str(prices), "--out", str(tmp_path / "vol")]) == 2
    assert not (tmp_path / "vol" / "volatility.csv").exists()


def test_generate(tmp_path, tiny_yaml):
    assert main(["generate", "--config", tiny_yaml, "--out", str(tmp_path / "gen")]) == 0
    frame = pd.read_csv(tmp_path / "gen" / "volatility.csv")
    assert frame["ticker"].nunique() == 3
    assert len(frame) == 3 * 250


def test_run_then_report(tmp_path, tiny_yaml, capsys):
    out = str(tmp_path / "run")
    assert main(["run", "--config", tiny_yaml, "--out", out]) == 0
    assert "CNN Joint" in capsys.readouterr().out
    assert main(["report", "--config", tiny_yaml, "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "Direction" in printed and "ticker" in printed


def test_report_without_run_exits_two(tmp_path, tiny_yaml):
    assert main(["report", "--config", tiny_yaml, "--out", str(tmp_path / "empty")]) == 2


def test_staged_commands_match_full_run(tmp_path, tiny_yaml):
    staged, full = tmp_path / "staged", tmp_path / "full"
    for command in ("train-cnn", "fit-arima", "evaluate"):
        assert main([command, "--config", tiny_yaml, "--out", str(staged)]) == 0
    assert main(["run", "--config", tiny_yaml, "--out", str(full)]) == 0
    for name in ("rmse_scores.csv", "accuracy_scores.csv", "metrics_table.csv"):
        assert (staged / name).read_bytes() == (full / name).read_bytes()


def test_evaluate_without_models_exits_two(tmp_path, tiny_yaml):
    assert main(["evaluate", "--config", tiny_yaml, "--out", str(tmp_path / "none")]) == 2
