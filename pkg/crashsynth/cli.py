"""
Command-line interface: one subcommand per pipeline stage, sharing one run config.

Per-stage overrides follow the subcommand as ``--stage.key=value``:

    crashsynth --config run.toml train-vae --vae.epochs=50
"""

import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import click

from .app_core import PipelineWorkflow
from .config import get_env_config, load_run_config, output_layout
from .errors import ConfigError, CrashSynthError

log = logging.getLogger(__name__)

STAGE_HELP = {
    "simulate": "Write a zero-inflated Poisson dataset.",
    "split": "Partition the dataset into train and test tables.",
    "train-vae": "Train the tokenized VAE on non-zero training rows.",
    "train-diffusion": "Train the latent diffusion model on the VAE's latents.",
    "generate": "Sample synthetic non-zero rows.",
    "rebalance": "Append synthetic rows to the training split.",
    "eval-quality": "Score synthetic rows against real non-zero rows.",
    "fit-predictor": "Grid-search and fit boosted trees on original and rebalanced data.",
    "fit-zip": "Fit the zero-inflated Poisson baseline.",
    "evaluate": "Score every fitted predictor on the test split.",
    "explain": "Export Shapley attributions for a fitted predictor.",
}


def configure_logging(level: Optional[str] = None) -> None:
    """Single stderr handler; data never goes to standard output."""
    level = (level or get_env_config()["log_level"]).upper()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))


def parse_overrides(args: Sequence[str]) -> Dict[str, str]:
    """
    Collect ``--stage.key=value`` arguments.

    Raises:
        ConfigError: For any other leftover argument
    """
    overrides = {}
    for arg in args:
        body = arg[2:] if arg.startswith("--") else None
        if not body or "=" not in body or "." not in body.split("=", 1)[0]:
            raise ConfigError(f"Unrecognized argument '{arg}'; per-stage overrides look like --stage.key=value")
        key, value = body.split("=", 1)
        overrides[key] = value
    return overrides


def _run(ctx: click.Context, stages: Sequence[str]) -> None:
    options = ctx.obj
    try:
        config = load_run_config(options["config"], seed=options["seed"], out_dir=options["out"],
                                 overrides=parse_overrides(ctx.args))
        workflow = PipelineWorkflow(config)
        if len(stages) == 1:
            workflow.run_stage(stages[0])
        else:
            workflow.run_pipeline(stages)
    except CrashSynthError as e:
        click.echo(f"error[{e.category}]: {e}", err=True)
        ctx.exit(e.exit_code)
    except Exception as e:
        log.debug("Uncategorized failure", exc_info=True)
        click.echo(f"error[{CrashSynthError.category}]: {type(e).__name__}: {e}", err=True)
        ctx.exit(CrashSynthError.exit_code)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="TOML run file (default: $CRASHSYNTH_CONFIG, else built-in defaults).")
@click.option("--seed", type=int, default=None, help="Replace every named seed.")
@click.option("--out", type=str, default=None, help="Output directory (paths.out_dir).")
@click.option("--log-level", type=str, default=None, help="Logging level (default: $CRASHSYNTH_LOG_LEVEL or INFO).")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: Optional[int], out: Optional[str],
        log_level: Optional[str]) -> None:
    """Crash-frequency data synthesis, rebalancing and evaluation."""
    configure_logging(log_level)
    ctx.obj = {"config": config_path, "seed": seed, "out": out}


OVERRIDE_SETTINGS = {"ignore_unknown_options": True, "allow_extra_args": True}


def _stage_command(stage: str) -> click.Command:
    @click.pass_context
    def command(ctx: click.Context) -> None:
        _run(ctx, [stage])

    return click.command(stage, help=STAGE_HELP[stage], context_settings=OVERRIDE_SETTINGS)(command)


for _stage in output_layout.STAGES:
    cli.add_command(_stage_command(_stage))


@cli.command("pipeline", context_settings=OVERRIDE_SETTINGS)
@click.pass_context
def pipeline(ctx: click.Context) -> None:
    """Run every stage in order."""
    _run(ctx, output_layout.STAGES)


def main() -> None:
    cli(prog_name="crashsynth")
