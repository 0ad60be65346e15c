"""Command-line front end: one subcommand per pipeline stage."""

from __future__ import annotations

import logging
import sys

import click

from .config import STAGES, ConfigError, load_config
from .evidence import DatasetError
from .factuality import EvidenceConfig, EvidenceConfigError
from .http import NotFoundError, TransportError
from .ingest import ValidationError
from .pipeline import Context, DependencyError, RunOptions, run_stage

logger = logging.getLogger("entityfact")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_TRANSPORT = 0, 2, 3, 4


def _execute(obj: dict, stages: list[str]) -> None:
    try:
        loaded = load_config(obj["config"], {"seed": obj["seed"], "out_dir": obj["out"]})
        ctx = Context(loaded, RunOptions(
            replay=obj["replay"], force=obj["force"], classes=obj["classes"] or None,
            languages=obj["langs"] or None, evidence=obj["evidence"] or None,
            transport=obj.get("transport"),
        ))
        for stage in stages:
            run_stage(ctx, stage)
    except (ConfigError, EvidenceConfigError, ValidationError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (DependencyError, DatasetError) as exc:
        click.echo(f"dependency error: {exc}", err=True)
        sys.exit(EXIT_DEPENDENCY)
    except (TransportError, NotFoundError) as exc:
        click.echo(f"transport error: {exc}", err=True)
        sys.exit(EXIT_TRANSPORT)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
              help="YAML run configuration.")
@click.option("--replay", is_flag=True, help="Serve every HTTP request from the cache; a miss is an error.")
@click.option("--seed", type=int, default=None, help="Override plan.seed.")
@click.option("--class", "classes", multiple=True, help="Restrict to a configured class (repeatable).")
@click.option("--lang", "langs", multiple=True, help="Restrict to a configured language (repeatable).")
@click.option("--evidence", multiple=True, type=click.Choice([e.value for e in EvidenceConfig]),
              help="Evidence configuration(s) to evaluate/report (repeatable).")
@click.option("--out", default=None, type=click.Path(file_okay=False), help="Override out_dir.")
@click.option("--force", is_flag=True, help="Accept upstream artifacts built with a different config.")
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logging.")
@click.pass_context
def cli(ctx, config, replay, seed, classes, langs, evidence, out, force, verbose):
    """Build popularity-tiered entity datasets and evaluate LLM factuality, stage by stage."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(config=config, replay=replay, seed=seed, classes=list(classes), langs=list(langs),
                   evidence=list(evidence), out=out, force=force)


def _stage_command(stage: str):
    @cli.command(name=stage, help=f"Run the `{stage}` stage.")
    @click.pass_obj
    def command(obj):
        _execute(obj, [stage])

    return command


for _stage in STAGES:
    _stage_command(_stage)


@cli.command(name="all")
@click.pass_obj
def run_all(obj):
    """Run every stage in order, ingest through report."""
    _execute(obj, list(STAGES))


def main(argv: list[str] | None = None) -> None:
    cli.main(args=argv, prog_name="entityfact")
