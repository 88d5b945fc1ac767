"""Tests for the fifo-desk command line."""

from pathlib import Path
from unittest.mock import patch

import pytest

from fifo_desk import __version__, main
from fifo_desk.config import save_config
from fifo_desk.errors import TrainingAborted
from fifo_desk.verification import CaseResult
from tests.conftest import micro_config


def _config_file(tmp_path: Path, root: Path | None = None, **changes: object) -> Path:
    path = tmp_path / "config.yaml"
    save_config(micro_config(root, **changes), path)
    return path


def _exit_code(argv: list[str]) -> int:
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


def test_version() -> None:
    """Test that version is set and follows semver format."""
    parts = __version__.split(".")
    assert len(parts) >= 2, f"Version {__version__} should have at least major.minor"
    assert all(p.isdigit() for p in parts[:2]), f"Version {__version__} should be numeric"


class TestInit:
    """Test the init command."""

    def test_creates_config(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test init writes the commented default config."""
        path = tmp_path / "fifo" / "config.yaml"
        main(["--config", str(path), "init"])
        assert path.exists()
        assert "Created config file" in capsys.readouterr().out

    def test_existing_config(self, tmp_path: Path) -> None:
        """Test init refuses to overwrite without --force."""
        path = tmp_path / "config.yaml"
        path.write_text("master_seed: 3\n")
        assert _exit_code(["--config", str(path), "init"]) == 1
        assert path.read_text() == "master_seed: 3\n"
        main(["--config", str(path), "init", "--force"])
        assert path.read_text() != "master_seed: 3\n"


class TestCommands:
    """Test the data, evaluation and analysis commands end to end."""

    def test_gen_data(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test gen-data writes the dataset and prints its census."""
        config = _config_file(tmp_path)
        out = tmp_path / "data"
        main(["--config", str(config), "gen-data", "--out", str(out)])
        assert (out / "manifest.csv").exists()
        printed = capsys.readouterr().out
        assert "Wrote 18 samples" in printed
        assert "train/SF=4" in printed

    def test_eval(
        self,
        tmp_path: Path,
        micro_run: Path,
        micro_data: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """Test eval prints the table and writes the CSV."""
        config = _config_file(tmp_path, micro_data)
        out = tmp_path / "eval.csv"
        checkpoint = str(micro_run / "final")
        main(["--config", str(config), "eval", "--checkpoint", checkpoint, "--out", str(out)])
        assert out.read_text().startswith("split,domain,class,iou")
        assert "eval RF mIoU" in capsys.readouterr().out

    def test_analyze(self, tmp_path: Path, micro_run: Path, micro_data: Path) -> None:
        """Test analyze writes analysis.csv into --out."""
        config = _config_file(tmp_path, micro_data)
        out = tmp_path / "report"
        main(
            [
                "--config",
                str(config),
                "analyze",
                "--checkpoint",
                str(micro_run / "final"),
                "--baseline",
                str(micro_run / "pretrained"),
                "--out",
                str(out),
            ]
        )
        assert (out / "analysis.csv").exists()

    def test_grad_check_passes(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a passing battery returns without exiting."""
        config = _config_file(tmp_path)
        with patch(
            "fifo_desk.verification.run_battery",
            return_value=[CaseResult("matmul", "primitive", 1e-9)],
        ):
            main(["--config", str(config), "grad-check"])
        assert "1/1 cases passed" in capsys.readouterr().out


class TestExitCodes:
    """Test error categories map to exit codes."""

    def test_config_error(self, tmp_path: Path) -> None:
        """Test an unknown config key exits with 2."""
        path = tmp_path / "config.yaml"
        path.write_text("not_a_setting: 1\n")
        assert _exit_code(["--config", str(path), "grad-check"]) == 2

    def test_bad_flag_value(self, tmp_path: Path) -> None:
        """Test an invalid override exits with 2."""
        config = _config_file(tmp_path)
        run = str(tmp_path / "run")
        argv = ["--config", str(config), "train", "--out", run, "--fsm-direction", "sideways"]
        assert _exit_code(argv) == 2

    def test_missing_dataset(self, tmp_path: Path, micro_run: Path) -> None:
        """Test a missing dataset exits with 3."""
        config = _config_file(tmp_path, tmp_path / "missing")
        argv = ["--config", str(config), "eval", "--checkpoint", str(micro_run / "final")]
        assert _exit_code(argv) == 3

    def test_training_aborted(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test an aborted run exits with 4 and names the last checkpoint."""
        config = _config_file(tmp_path)
        aborted = TrainingAborted("loss is nan", 3, "fifo", "run/iter_2")
        with patch("fifo_desk.trainer.train", side_effect=aborted):
            code = _exit_code(["--config", str(config), "train", "--out", str(tmp_path / "run")])
        assert code == 4
        assert "run/iter_2" in capsys.readouterr().err

    def test_verification_failed(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a failing battery prints the report, names the error and exits with 5."""
        config = _config_file(tmp_path)
        with patch(
            "fifo_desk.verification.run_battery",
            return_value=[CaseResult("matmul", "primitive", 1.0)],
        ):
            assert _exit_code(["--config", str(config), "grad-check"]) == 5
        captured = capsys.readouterr()
        assert "0/1 cases passed" in captured.out
        assert "matmul (1.000e+00)" in captured.err
