"""Tests for main application entry point."""
import csv
import json
import logging
from pathlib import Path
from typing import List
from unittest.mock import MagicMock, patch

import pytest
import yaml

from src.dataio import parse_dataset
from src.diffcore import NumericError
from src.main import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    TEXT_FORMAT,
    UsageError,
    build_parser,
    run,
    setup_logging,
)

TINY = [
    "data.synth.num_users=8",
    "data.synth.num_items_a=12",
    "data.synth.num_items_b=6",
    "data.synth.mean_len_b=2",
    "data.synth.density_ratio=3",
    "data.synth.sequences_per_user=2",
    "train.epochs=1",
    "train.batch_size=8",
    "train.embedding_size=4",
    "train.layers=1",
    "experiment.seeds=[1]",
]


def _args(tmp_path: Path, command: str, *extra: str) -> List[str]:
    argv = [command, "--set", f"output.dir={tmp_path}"]
    for override in TINY:
        argv += ["--set", override]
    return argv + list(extra)


class TestSetupLogging:
    """Test setup_logging function."""

    def test_setup_logging_text_format(self, caplog: pytest.LogCaptureFixture) -> None:
        """Test text format logging setup."""
        setup_logging("INFO", "text")

        logger = logging.getLogger("test")
        logger.info("Test message")

        assert logging.root.level == logging.INFO
        assert "Test message" in caplog.text

    def test_text_format_installs_handler_on_bare_root(self) -> None:
        """Test text format installs one formatted handler when root has none."""
        with patch.object(logging.root, "handlers", []):
            setup_logging("WARNING", "text")
            handlers = list(logging.root.handlers)

        assert len(handlers) == 1
        assert handlers[0].formatter is not None
        assert handlers[0].formatter._fmt == TEXT_FORMAT
        assert logging.root.level == logging.WARNING

    def test_text_format_keeps_existing_handlers(self) -> None:
        """Test text format leaves already configured handlers in place."""
        existing = logging.NullHandler()
        with patch.object(logging.root, "handlers", [existing]):
            setup_logging("INFO", "text")
            handlers = list(logging.root.handlers)

        assert handlers == [existing]

    def test_setup_logging_json_format(self, capsys: pytest.CaptureFixture) -> None:
        """Test JSON format logging setup."""
        setup_logging("DEBUG", "json")

        logger = logging.getLogger("test")
        logger.debug("Test JSON message")

        assert logging.root.level == logging.DEBUG
        captured = capsys.readouterr()
        lines = [line for line in captured.err.strip().split("\n") if line]
        log_entry = json.loads(lines[-1])
        assert log_entry["message"] == "Test JSON message"
        assert log_entry["level"] == "DEBUG"
        assert log_entry["logger"] == "test"

    def test_json_formatter_with_exception(self, capsys: pytest.CaptureFixture) -> None:
        """Test JSON formatter handles exceptions."""
        setup_logging("ERROR", "json")

        logger = logging.getLogger("test")
        try:
            raise ValueError("Test error")
        except ValueError:
            logger.error("Error occurred", exc_info=True)

        captured = capsys.readouterr()
        lines = [line for line in captured.err.strip().split("\n") if line]
        log_entry = json.loads(lines[-1])
        assert log_entry["message"] == "Error occurred"
        assert "ValueError: Test error" in log_entry["exception"]


class TestParser:
    """Test build_parser function."""

    def test_overrides_accumulate(self) -> None:
        """Test repeated --set options are kept in order."""
        args = build_parser().parse_args(
            ["train", "--set", "train.lr=0.01", "--set", "train.lr=0.02"]
        )
        assert args.command == "train"
        assert args.overrides == ["train.lr=0.01", "train.lr=0.02"]

    def test_gradcheck_defaults(self) -> None:
        """Test gradcheck tolerance and step defaults."""
        args = build_parser().parse_args(["gradcheck"])
        assert (args.tol, args.step) == (1e-4, 1e-5)

    def test_invalid_usage_raises(self) -> None:
        """Test parse errors raise instead of exiting."""
        with pytest.raises(UsageError):
            build_parser().parse_args(["sweep", "--param", "tau"])


class TestRun:
    """Test run function and exit codes."""

    def test_missing_command(self, capsys: pytest.CaptureFixture) -> None:
        """Test a missing subcommand is a usage error."""
        assert run([]) == EXIT_USAGE
        assert "usage error" in capsys.readouterr().err

    def test_unknown_key(self) -> None:
        """Test an unknown override key is a configuration error."""
        assert run(["gradcheck", "--set", "train.learning_rate=0.1"]) == EXIT_USAGE

    def test_invalid_value(self, tmp_path: Path) -> None:
        """Test an out-of-range value is a configuration error."""
        assert run(_args(tmp_path, "train", "--set", "train.alpha=1.5")) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path: Path) -> None:
        """Test a missing configuration file is a configuration error."""
        assert run(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_USAGE

    def test_gradcheck(self, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
        """Test gradcheck passes and writes its report and manifest."""
        assert run(["gradcheck", "--set", f"output.dir={tmp_path}"]) == EXIT_OK
        with open(tmp_path / "gradcheck.yaml", encoding="utf-8") as f:
            report = yaml.safe_load(f)
        assert report["passed"] is True
        with open(tmp_path / "manifest.yaml", encoding="utf-8") as f:
            manifest = yaml.safe_load(f)
        assert manifest["command"] == "gradcheck"
        assert manifest["gradcheck_train"]["embedding_size"] == 4
        assert "gradcheck passed" in capsys.readouterr().out

    def test_gradcheck_failure(self, tmp_path: Path) -> None:
        """Test a failed gradient check exits with the numeric status."""
        report = MagicMock(passed=False, max_rel_error=0.5, checked=10)
        report.to_dict.return_value = {"passed": False}
        with patch("src.main.grad_check", return_value=report):
            assert run(["gradcheck", "--set", f"output.dir={tmp_path}"]) == EXIT_NUMERIC

    def test_gradcheck_dead_parameter_fails(self, tmp_path: Path) -> None:
        """Test a parameter without gradient fails the check despite matching gradients."""
        report = MagicMock(passed=True, max_rel_error=0.0, checked=10, dead_parameters=["ea_b.b"])
        report.to_dict.return_value = {"passed": True}
        with patch("src.main.grad_check", return_value=report):
            assert run(["gradcheck", "--set", f"output.dir={tmp_path}"]) == EXIT_NUMERIC
        with open(tmp_path / "manifest.yaml", encoding="utf-8") as f:
            assert yaml.safe_load(f)["passed"] is False

    def test_gen_data(self, tmp_path: Path) -> None:
        """Test gen-data writes a dataset that parses back."""
        assert run(_args(tmp_path, "gen-data")) == EXIT_OK
        dataset = parse_dataset(tmp_path / "dataset.tsv")
        assert len(dataset.sequences) == 16
        assert (tmp_path / "manifest.yaml").exists()

    def test_train_then_eval(self, tmp_path: Path) -> None:
        """Test train writes its artifacts and eval reads the checkpoint back."""
        assert run(_args(tmp_path, "train")) == EXIT_OK
        for name in ("checkpoint/params.npz", "loss_trace.csv", "metrics.csv", "manifest.yaml"):
            assert (tmp_path / name).exists(), name

        assert run(_args(tmp_path, "eval")) == EXIT_OK
        with open(tmp_path / "eval_metrics.csv", encoding="utf-8") as f:
            variants = {row["variant"] for row in csv.DictReader(f)}
        assert variants == {"EA-GCL", "Popularity"}
        assert (tmp_path / "eval_metrics.txt").exists()

    def test_metrics_textfile(self, tmp_path: Path) -> None:
        """Test enabled metrics are written after the command."""
        argv = _args(tmp_path, "train", "--set", "metrics.enabled=true")
        assert run(argv) == EXIT_OK
        text = (tmp_path / "metrics.prom").read_text(encoding="utf-8")
        assert "eagcl_optimizer_steps_total" in text

    def test_eval_missing_checkpoint(self, tmp_path: Path) -> None:
        """Test a missing checkpoint is a data error."""
        argv = _args(tmp_path, "eval", "--checkpoint", str(tmp_path / "nowhere"))
        assert run(argv) == EXIT_DATA

    def test_missing_dataset(self, tmp_path: Path) -> None:
        """Test a missing dataset file is a data error."""
        argv = _args(tmp_path, "train", "--set", f"data.path={tmp_path / 'missing.tsv'}")
        assert run(argv) == EXIT_DATA

    def test_malformed_dataset(self, tmp_path: Path) -> None:
        """Test a malformed dataset file is a data error."""
        path = tmp_path / "bad.tsv"
        path.write_text("1\t5:A,5:B\n2\t6:A\n", encoding="utf-8")
        assert run(_args(tmp_path, "train", "--set", f"data.path={path}")) == EXIT_DATA

    def test_numeric_failure(self, tmp_path: Path) -> None:
        """Test a non-finite loss exits with the numeric status."""
        with patch("src.main.run_experiment", side_effect=NumericError("loss is nan")):
            assert run(_args(tmp_path, "train")) == EXIT_NUMERIC
