"""CLI interface for the NRTR toolkit."""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import click
from dotenv import load_dotenv

from . import __version__
from .config import ConnectConfig, load_config
from .errors import NrtrError
from .pipeline import check_swc_files, run_eval, run_infer, run_synth, run_train
from .volume import blockify, load_volume

logger = logging.getLogger(__name__)

USAGE_EXIT = 1
DATA_EXIT = 2

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

PathArg = click.Path(path_type=Path)
ExistingPath = click.Path(exists=True, path_type=Path)


class DataError(click.ClickException):
    """A toolkit error surfaced as a non-usage CLI failure."""

    exit_code = DATA_EXIT


class NrtrGroup(click.Group):
    """Group mapping usage errors to exit 1 and toolkit errors to exit 2."""

    group_class = type

    def make_context(
        self,
        info_name: str | None,
        args: list[str],
        parent: click.Context | None = None,
        **extra: Any,
    ) -> click.Context:
        try:
            return super().make_context(info_name, args, parent, **extra)
        except click.UsageError as e:
            e.exit_code = USAGE_EXIT
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = USAGE_EXIT
            raise
        except NrtrError as e:
            logger.debug("Command failed", exc_info=True)
            raise DataError(str(e)) from e


def _log_level(verbose: bool) -> int | str:
    if verbose:
        return logging.DEBUG
    name = os.getenv("NRTR_LOG_LEVEL", "INFO").upper()
    return name if name in logging.getLevelNamesMapping() else logging.INFO


@click.group(cls=NrtrGroup)
@click.version_option(version=__version__)
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level")
def cli(verbose: bool) -> None:
    """NRTR - reconstruct neurons from 3D image stacks as point sets."""
    load_dotenv()
    logging.basicConfig(level=_log_level(verbose), format=LOG_FORMAT, stream=sys.stderr)


@cli.command()
@click.option("--config", "config_path", type=ExistingPath, help="SynthConfig JSON file")
@click.option("--seed", type=int, help="Override the generator seed")
@click.option("--out", "out_dir", type=PathArg, required=True, help="Dataset directory")
def synth(config_path: Path | None, seed: int | None, out_dir: Path) -> None:
    """Generate a synthetic dataset of volumes and SWC ground truth."""
    index = run_synth(config_path, out_dir, seed)
    click.echo(
        f"Wrote {len(index.samples)} samples to {out_dir} "
        f"({len(index.train)} train, {len(index.test)} test)"
    )


@cli.command()
@click.argument("dataset", type=ExistingPath)
@click.option("--config", "config_path", type=ExistingPath, help="TrainConfig JSON file")
@click.option("--seed", type=int, help="Override the training seed")
@click.option("--out", "out_dir", type=PathArg, required=True, help="Run directory")
@click.option("--resume", type=ExistingPath, help="Epoch checkpoint to resume from")
@click.option("--epochs", type=int, help="Override the number of epochs")
@click.option("--warmup", type=int, help="Override the number of warmup epochs")
@click.option("--upsample", type=click.IntRange(min=1), help="Magnify training volumes by this factor")
def train(
    dataset: Path,
    config_path: Path | None,
    seed: int | None,
    out_dir: Path,
    resume: Path | None,
    epochs: int | None,
    warmup: int | None,
    upsample: int | None,
) -> None:
    """Train a point-set transformer on the train split of DATASET."""
    result = run_train(
        config_path,
        dataset,
        out_dir,
        seed=seed,
        resume=resume,
        overrides={"epochs": epochs, "warmup_epochs": warmup, "upsample": upsample},
    )
    click.echo(f"Final loss {result.losses[-1]:.6f}" if result.losses else "No steps run")
    click.echo(f"Checkpoint: {result.checkpoint}")


@cli.command()
@click.argument("checkpoint", type=ExistingPath)
@click.argument("volume", type=ExistingPath)
@click.option("--out", "out_swc", type=PathArg, required=True, help="Output SWC file")
@click.option("--config", "config_path", type=ExistingPath, help="ConnectConfig JSON file")
@click.option("--upsample", type=click.IntRange(min=1), help="Magnification factor")
@click.option(
    "--auto-upsample/--no-auto-upsample",
    default=None,
    help="Magnify volumes smaller than one block",
)
@click.option("--block", "block_size", type=click.IntRange(min=1), help="Block size")
@click.option("--overlap", type=click.IntRange(min=0), help="Block overlap in voxels")
@click.option("--threshold", type=float, help="Keep points with cls >= threshold")
@click.option("--tau", type=float, help="Edge pruning factor")
def infer(
    checkpoint: Path,
    volume: Path,
    out_swc: Path,
    config_path: Path | None,
    upsample: int | None,
    auto_upsample: bool | None,
    block_size: int | None,
    overlap: int | None,
    threshold: float | None,
    tau: float | None,
) -> None:
    """Reconstruct VOLUME with CHECKPOINT and write the SWC forest."""
    result = run_infer(
        checkpoint,
        volume,
        out_swc,
        config_path,
        overrides={
            "upsample": upsample,
            "auto_upsample": auto_upsample,
            "block_size": block_size,
            "overlap": overlap,
            "threshold": threshold,
            "tau": tau,
        },
    )
    click.echo(
        f"Wrote {len(result.forest)} nodes in {len(result.forest.roots)} trees "
        f"to {out_swc} (x{result.factor}, {len(result.origins)} blocks)"
    )


@cli.command("eval")
@click.argument("pred", type=ExistingPath)
@click.argument("gt", type=ExistingPath)
@click.option(
    "--dims",
    nargs=3,
    type=click.IntRange(min=1),
    required=True,
    help="Volume dimensions W H D",
)
@click.option("--out", "out_json", type=PathArg, help="Write the score report here")
def evaluate(pred: Path, gt: Path, dims: tuple[int, int, int], out_json: Path | None) -> None:
    """Score PRED against GT by voxel overlap."""
    report = run_eval(pred, gt, dims, out_json)
    click.echo(report.model_dump_json(indent=2))


@cli.command("blockify")
@click.argument("volume", type=ExistingPath)
@click.option("--block", "block_size", type=click.IntRange(min=1), help="Block size")
@click.option("--overlap", type=click.IntRange(min=0), help="Block overlap in voxels")
def blockify_command(volume: Path, block_size: int | None, overlap: int | None) -> None:
    """Print the block origins covering VOLUME as JSON."""
    cfg = load_config(None, ConnectConfig, {"block_size": block_size, "overlap": overlap})
    origins = blockify(load_volume(volume), cfg.block_size, cfg.overlap)
    click.echo(json.dumps([list(o) for o in origins]))


@cli.group()
def swc() -> None:
    """SWC file utilities."""


@swc.command()
@click.argument("files", nargs=-1, required=True, type=PathArg)
@click.pass_context
def check(ctx: click.Context, files: tuple[Path, ...]) -> None:
    """Validate SWC FILES; exits with status 2 if any is invalid."""
    reports = check_swc_files(files)
    for path, problems in reports.items():
        if problems:
            click.echo(f"{path}: INVALID")
            for problem in problems:
                click.echo(f"  {problem}")
        else:
            click.echo(f"{path}: OK")
    if any(reports.values()):
        ctx.exit(DATA_EXIT)


def main() -> None:
    """Main CLI entry point."""
    cli()


if __name__ == "__main__":
    main()
