"""Command line: ``lacecp run CONFIG``, ``lacecp validate CONFIG``, ``lacecp cache gc``."""

import json
import logging
import sys

import click

from .cli_io import ExperimentConfig, ResultCache, exit_code, run_experiment


def _fail(exc):
    code = exit_code(exc)
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Lace-expansion numerics for the spread-out contact process."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config entry; may be repeated.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default from [output] dir).")
def run(config, overrides, out_dir):
    """Run the experiment described in CONFIG."""
    try:
        cfg = ExperimentConfig.from_file(config, overrides)
        summary = run_experiment(cfg, out_dir)
    except Exception as exc:  # mapped to exit codes, anything else re-raised
        _fail(exc)
    click.echo(json.dumps({"config_hash": summary["config_hash"], "kind": summary["kind"]}))


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
def validate(config, overrides):
    """Check CONFIG without running it; prints the config hash."""
    try:
        cfg = ExperimentConfig.from_file(config, overrides)
    except Exception as exc:
        _fail(exc)
    click.echo(cfg.hash)


@main.group()
def cache():
    """Result cache maintenance."""


@cache.command()
@click.option("--all", "everything", is_flag=True, help="Remove every entry.")
@click.option("--root", type=click.Path(file_okay=False), default=None,
              help="Store root (default: $LACECP_CACHE or ~/.cache/lacecp).")
def gc(everything, root):
    """Drop corrupt and unfinished cache entries."""
    n = ResultCache(root).gc(everything)
    click.echo(f"removed {n} entries")


if __name__ == "__main__":
    main()
