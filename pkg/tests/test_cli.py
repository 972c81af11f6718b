"""Tests for the command line interface."""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from nrtr import __version__
from nrtr.cli import DATA_EXIT, USAGE_EXIT, cli
from nrtr.network import PointSetTransformer, save_checkpoint
from nrtr.swc import read_swc, save_swc

from .fixtures import (
    TWO_NODE_SWC,
    chain_forest,
    tiny_synth_config,
    tiny_train_config,
    write_constant_volume,
)


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


class TestCliBasics:
    """Help, version and usage errors."""

    def test_help(self, runner: CliRunner) -> None:
        """Every command is listed."""
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in ("synth", "train", "infer", "eval", "blockify", "swc"):
            assert command in result.output

    def test_version(self, runner: CliRunner) -> None:
        """--version prints the package version."""
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_unknown_option(self, runner: CliRunner) -> None:
        """Unknown options are usage errors."""
        assert runner.invoke(cli, ["--bogus"]).exit_code == USAGE_EXIT
        assert runner.invoke(cli, ["synth", "--bogus"]).exit_code == USAGE_EXIT

    def test_missing_required_option(self, runner: CliRunner) -> None:
        """synth needs --out."""
        result = runner.invoke(cli, ["synth"])
        assert result.exit_code == USAGE_EXIT
        assert "--out" in result.output

    def test_missing_input_file(self, runner: CliRunner, tmp_path: Path) -> None:
        """Nonexistent inputs are rejected before running."""
        result = runner.invoke(cli, ["eval", str(tmp_path / "a.swc"), str(tmp_path / "b.swc"), "--dims", "4", "4", "4"])
        assert result.exit_code == USAGE_EXIT


class TestSwcCheck:
    """swc check."""

    def test_valid(self, runner: CliRunner, tmp_path: Path) -> None:
        """Valid files print OK and exit 0."""
        path = tmp_path / "ok.swc"
        path.write_text(TWO_NODE_SWC)
        result = runner.invoke(cli, ["swc", "check", str(path)])
        assert result.exit_code == 0
        assert f"{path}: OK" in result.output

    def test_invalid(self, runner: CliRunner, tmp_path: Path) -> None:
        """Any invalid file makes the command fail with the data exit code."""
        good = tmp_path / "ok.swc"
        good.write_text(TWO_NODE_SWC)
        bad = tmp_path / "bad.swc"
        bad.write_text("1 1 0 0 0 1 -1\n1 3 1 0 0 1 -1\n")
        result = runner.invoke(cli, ["swc", "check", str(good), str(bad)])
        assert result.exit_code == DATA_EXIT
        assert f"{good}: OK" in result.output
        assert f"{bad}: INVALID" in result.output
        assert "duplicate-id" in result.output

    def test_no_files(self, runner: CliRunner) -> None:
        """At least one file is required."""
        assert runner.invoke(cli, ["swc", "check"]).exit_code == USAGE_EXIT


class TestBlockify:
    """blockify."""

    def test_origins(self, runner: CliRunner, tmp_path: Path) -> None:
        """A 100-voxel axis needs a second, inward-shifted block."""
        write_constant_volume(tmp_path / "vol", (100, 64, 64), 1000.0)
        result = runner.invoke(cli, ["blockify", str(tmp_path / "vol.json")])
        assert result.exit_code == 0, result.output
        assert json.loads(result.output) == [[0, 0, 0], [36, 0, 0]]

    def test_overlap(self, runner: CliRunner, tmp_path: Path) -> None:
        """Overlap shortens the stride."""
        write_constant_volume(tmp_path / "vol", (40, 16, 16), 1000.0)
        result = runner.invoke(
            cli, ["blockify", str(tmp_path / "vol.json"), "--block", "16", "--overlap", "4"]
        )
        assert result.exit_code == 0, result.output
        assert [o[0] for o in json.loads(result.output)] == [0, 12, 24]

    def test_too_small(self, runner: CliRunner, tmp_path: Path) -> None:
        """A volume smaller than a block is a data error."""
        write_constant_volume(tmp_path / "vol", (32, 32, 32), 1000.0)
        result = runner.invoke(cli, ["blockify", str(tmp_path / "vol.json")])
        assert result.exit_code == DATA_EXIT
        assert "Error:" in result.output

    def test_overlap_not_below_block(self, runner: CliRunner, tmp_path: Path) -> None:
        """Overlap must be smaller than the block."""
        write_constant_volume(tmp_path / "vol", (16, 16, 16), 1000.0)
        result = runner.invoke(
            cli, ["blockify", str(tmp_path / "vol.json"), "--block", "16", "--overlap", "16"]
        )
        assert result.exit_code == DATA_EXIT


class TestCommands:
    """synth, train, infer and eval end to end on tiny inputs."""

    def test_synth(self, runner: CliRunner, tmp_path: Path) -> None:
        """synth writes the dataset and its manifest."""
        config = tmp_path / "synth.json"
        config.write_text(tiny_synth_config().model_dump_json())
        out = tmp_path / "data"
        result = runner.invoke(cli, ["synth", "--config", str(config), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "Wrote 2 samples" in result.output
        assert (out / "manifest.json").exists()
        assert (out / "sample_0001.swc").exists()

    def test_bad_config(self, runner: CliRunner, tmp_path: Path) -> None:
        """An invalid config is a data error."""
        config = tmp_path / "synth.json"
        config.write_text(json.dumps({"n_samples": -1}))
        result = runner.invoke(cli, ["synth", "--config", str(config), "--out", str(tmp_path / "o")])
        assert result.exit_code == DATA_EXIT
        assert "n_samples" in result.output

    def test_eval(self, runner: CliRunner, tmp_path: Path) -> None:
        """eval prints the score report."""
        path = tmp_path / "gt.swc"
        save_swc(chain_forest(), path)
        result = runner.invoke(cli, ["eval", str(path), str(path), "--dims", "16", "12", "12"])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        assert report["precision"] == 1.0
        assert report["fn"] == 0

    def test_infer(
        self, runner: CliRunner, tmp_path: Path, tiny_model: PointSetTransformer
    ) -> None:
        """infer writes a valid SWC for a one-block volume."""
        ckpt = tmp_path / "model.bin"
        save_checkpoint(tiny_model, ckpt)
        write_constant_volume(tmp_path / "vol", (16, 16, 16), 3000.0)
        out = tmp_path / "pred.swc"
        result = runner.invoke(
            cli,
            ["infer", str(ckpt), str(tmp_path / "vol.json"), "--out", str(out), "--block", "16"],
        )
        assert result.exit_code == 0, result.output
        assert "x1, 1 blocks" in result.output
        read_swc(out)

    def test_train(self, runner: CliRunner, tmp_path: Path, synth_dataset: Path) -> None:
        """train runs the schedule and reports the checkpoint."""
        config = tmp_path / "train.json"
        config.write_text(tiny_train_config().model_dump_json())
        out = tmp_path / "run"
        result = runner.invoke(
            cli,
            ["train", str(synth_dataset), "--config", str(config), "--out", str(out), "--epochs", "2"],
        )
        assert result.exit_code == 0, result.output
        assert "Checkpoint:" in result.output
        assert (out / "model.bin").exists()
        assert (out / "loss.csv").exists()

    def test_train_invalid_warmup(self, runner: CliRunner, tmp_path: Path, synth_dataset: Path) -> None:
        """Warmup must be shorter than training."""
        result = runner.invoke(
            cli,
            ["train", str(synth_dataset), "--out", str(tmp_path / "run"), "--epochs", "2", "--warmup", "2"],
        )
        assert result.exit_code == DATA_EXIT
