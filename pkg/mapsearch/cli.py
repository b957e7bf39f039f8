"""mapsearch command line.

Exit codes: 0 success, 2 configuration or usage error, 3 any other failure.
"""
import functools
import logging
import os
import sys

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from mapsearch import __version__, jobs
from mapsearch.config import ExperimentConfig, load_config
from mapsearch.errors import ConfigError, MapSearchError

logger = logging.getLogger(__name__)
console = Console()
err_console = Console(stderr=True)


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(console=err_console, show_path=False)], force=True)


def handled(fn):
    """Map library errors onto exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            err_console.print(f"[red]Config error:[/red] {e}")
            sys.exit(2)
        except (MapSearchError, OSError) as e:
            err_console.print(f"[red]Error:[/red] {e}")
            sys.exit(3)
    return wrapper


def _config(ctx: click.Context) -> ExperimentConfig:
    return load_config(ctx.obj["config_path"], ctx.obj["overrides"])


def _table(title: str, df) -> Table:
    table = Table(title=title)
    for column in df.columns:
        table.add_column(str(column))
    for row in df.itertuples(index=False):
        table.add_row(*(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    return table


@click.group()
@click.version_option(__version__, prog_name="mapsearch")
@click.option("--config", "-c", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Experiment config file (flat key = value).")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key; repeatable.")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.option("--quiet", "-q", is_flag=True, help="Warnings and errors only.")
@click.option("--no-timing", is_flag=True, help="Write zero wall-clock columns so outputs are byte-identical.")
@click.pass_context
def main(ctx, config_path, overrides, verbose, quiet, no_timing):
    """Mapping search for tensor accelerators: datasets, surrogate training and search comparisons."""
    _setup_logging(verbose, quiet)
    ctx.obj = {"config_path": config_path, "overrides": overrides, "timing": not no_timing}


@main.command("gen-dataset")
@click.option("--overwrite", is_flag=True, help="Replace an existing dataset file.")
@click.pass_context
@handled
def gen_dataset(ctx, overwrite):
    """Sample random valid mappings and their costs into a dataset file."""
    path = jobs.gen_dataset(_config(ctx), overwrite=overwrite)
    console.print(f"Dataset written to [cyan]{path}[/cyan]")


@main.command()
@click.pass_context
@handled
def train(ctx):
    """Train the surrogate MLP on the configured dataset."""
    model_path, curve_path = jobs.train_model(_config(ctx))
    console.print(f"Model written to [cyan]{model_path}[/cyan], loss curve to [cyan]{curve_path}[/cyan]")


@main.command()
@click.pass_context
@handled
def search(ctx):
    """Run every configured method on every configured problem."""
    for path in jobs.run_search(_config(ctx), timing=ctx.obj["timing"]):
        console.print(f"Wrote [cyan]{path}[/cyan]")


@main.command()
@click.pass_context
@handled
def compare(ctx):
    """Search with every method, then aggregate iso-iteration and iso-time tables."""
    report, paths = jobs.compare(_config(ctx), timing=ctx.obj["timing"])
    console.print(_table("Mean best EDP / algorithmic minimum (final checkpoint)", report.final()))
    if not report.ratios.empty:
        console.print(_table("Pairwise ratios over problems", report.ratios))
    for path in paths:
        console.print(f"Wrote [cyan]{path}[/cyan]")


@main.command()
@click.pass_context
@handled
def surface(ctx):
    """Sweep EDP over two tile-size axes (surface.x, surface.y)."""
    path = jobs.surface(_config(ctx))
    console.print(f"Surface written to [cyan]{path}[/cyan]")


@main.command("lower-bound")
@click.pass_context
@handled
def lower_bound(ctx):
    """Print the algorithmic minimum of every configured problem."""
    console.print(_table("Algorithmic minimum", jobs.lower_bounds(_config(ctx))))


@main.command()
@click.pass_context
@handled
def characterize(ctx):
    """Energy statistics of uniformly sampled mappings."""
    path = jobs.characterize(_config(ctx))
    console.print(f"Characterization written to [cyan]{path}[/cyan]")


@main.command("loss-compare")
@click.pass_context
@handled
def loss_compare(ctx):
    """Train the same topology under each loss and compare held-out quality."""
    console.print(_table("Loss comparison", jobs.loss_compare(_config(ctx))))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--model", "model_path", default=None, type=click.Path(dir_okay=False),
              help="Surrogate used by /api/search?method=mm.")
def serve(host, port, model_path):
    """Run the HTTP service."""
    import uvicorn

    if model_path:
        os.environ["MAPSEARCH_MODEL"] = model_path
    uvicorn.run("mapsearch.index:app", host=host, port=port)


if __name__ == "__main__":
    main()
