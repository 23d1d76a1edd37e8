"""Command-line interface: ``community-storage {value,allocate,compare,synth}``.

Every command writes its results under ``--out`` and exits with status 0 on
success, 1 when a solve or allocation fails, and 2 for invalid input.
"""

import json
import logging
import os
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import click

from community_storage import installed_version
from community_storage.allocation import AllocationResult
from community_storage.allocation import nucleolus
from community_storage.allocation import proportional
from community_storage.allocation import shapley
from community_storage.app_settings import CONFIG_ENV_VAR
from community_storage.app_settings import SHAPLEY_MAX_PLAYERS
from community_storage.choices import AllocationMethod
from community_storage.choices import SharingMode
from community_storage.coalition_value import CharacteristicCache
from community_storage.coalition_value import evaluate_coalition
from community_storage.coalition_value import outcome_summary
from community_storage.coalition_value import write_schedule
from community_storage.exceptions import CoalitionError
from community_storage.exceptions import CommunityStorageError
from community_storage.exceptions import ModelMismatchError
from community_storage.exceptions import ModelValidationError
from community_storage.games import StorageGame
from community_storage.games import TabularGame
from community_storage.helpers import atomic_write_text
from community_storage.metrics import build_report
from community_storage.metrics import write_report
from community_storage.model import CommunityModel
from community_storage.model import load_community
from community_storage.synthetic import write_synthetic_community


logger = logging.getLogger("community_storage")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
INPUT_ERRORS = (ModelValidationError, CoalitionError, ModelMismatchError)
ALL_METHODS = "all"
VERBOSITY_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


@dataclass(frozen=True)
class RunConfig:
    """Options shared by the subcommands."""

    subcommand: str
    profiles: Path | None = None
    config: Path | None = None
    method: str = ALL_METHODS
    sharing_mode: SharingMode | None = None
    out: Path = Path("out")
    seed: int = 0
    threads: int = 1
    force: bool = False
    verbosity: int = 0

    def methods(self) -> list[AllocationMethod]:
        if self.method == ALL_METHODS:
            return list(AllocationMethod)
        return [AllocationMethod(self.method)]

    def load_model(self) -> CommunityModel:
        model = load_community(self.profiles, self.config)
        if self.sharing_mode is not None:
            model = model.with_sharing_mode(self.sharing_mode)
        return model


def _guarded(run: Callable[[], int]) -> int:
    """Run a command body and map package errors to exit codes."""
    try:
        return run()
    except INPUT_ERRORS as err:
        click.secho(f"Error: {err}", fg="red", err=True)
        return EXIT_USAGE
    except CommunityStorageError as err:
        logger.exception("Command failed: %s", {"error": type(err).__name__})
        click.secho(f"Error: {err}", fg="red", err=True)
        return EXIT_FAILURE


def _write_json(path: Path, payload) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def _write_allocation(result: AllocationResult, out: Path):
    method = result.method.value
    _write_json(out / f"allocation_{method}.json", result.to_dict())
    trace = "".join(json.dumps(record.to_dict()) + "\n" for record in result.trace)
    atomic_write_text(out / f"trace_{method}.jsonl", trace)


def _echo_allocation(result: AllocationResult):
    flag = click.style("Y", fg="green") if result.satisfied else click.style("N", fg="yellow")
    click.secho(f"{result.method.value}", bold=True)
    for label, share in zip(result.labels, result.allocation.x, strict=True):
        click.echo(f"  {label}: {share:.6f}")
    click.echo(f"  total: {result.allocation.total():.6f} (grand coalition {result.grand_value:.6f})")
    click.echo(f"  DSAT: {result.dsat:.6g} [{flag}]")
    click.echo(f"  coalitions queried: {result.coalitions_queried}, episodes: {result.episodes}")


def _shapley_blocked(run: RunConfig, n_players: int, methods) -> bool:
    if AllocationMethod.SHAPLEY in methods and n_players > SHAPLEY_MAX_PLAYERS and not run.force:
        click.secho(
            f"Error: the Shapley value of {n_players} players needs {2 ** n_players - 1} coalition values; "
            f"the limit is {SHAPLEY_MAX_PLAYERS}. Pass --force to compute it anyway.",
            fg="red",
            err=True,
        )
        return True
    return False


def _allocate_community(model: CommunityModel, method: AllocationMethod, cache, run: RunConfig) -> AllocationResult:
    if method is AllocationMethod.PROPORTIONAL:
        return proportional(model, cache, threads=run.threads)
    game = StorageGame(model, cache, run.threads)
    if method is AllocationMethod.SHAPLEY:
        return shapley(game, force=run.force)
    return nucleolus(game)


def cmd_value(run: RunConfig, coalition_spec: str) -> int:
    """Evaluate one coalition and write ``value.json`` and ``schedule.csv``."""

    def body():
        model = run.load_model()
        coalition = model.parse_coalition(coalition_spec)
        outcome = evaluate_coalition(model, coalition, CharacteristicCache())
        write_schedule(outcome, model, run.out)
        click.echo(json.dumps(outcome_summary(model, outcome), indent=2))
        return EXIT_OK

    return _guarded(body)


def cmd_allocate(run: RunConfig, game_path: Path | None = None) -> int:
    """Allocate the grand coalition's cost with the selected methods.

    Each method runs against a fresh characteristic-function cache so that its
    ``coalitions_queried`` counts only its own evaluations.
    """

    def body():
        methods = run.methods()
        if game_path is not None:
            if AllocationMethod.PROPORTIONAL in methods:
                if run.method != ALL_METHODS:
                    click.secho("Error: the proportional method needs a community, not a game file", fg="red", err=True)
                    return EXIT_USAGE
                methods.remove(AllocationMethod.PROPORTIONAL)
            n_players = TabularGame.from_json(game_path).n_players
            if _shapley_blocked(run, n_players, methods):
                return EXIT_USAGE
            results = []
            for method in methods:
                game = TabularGame.from_json(game_path)
                if method is AllocationMethod.SHAPLEY:
                    results.append(shapley(game, force=run.force))
                else:
                    results.append(nucleolus(game))
        else:
            model = run.load_model()
            if _shapley_blocked(run, model.n_buildings, methods):
                return EXIT_USAGE
            results = [_allocate_community(model, method, CharacteristicCache(), run) for method in methods]
        for result in results:
            _write_allocation(result, run.out)
            _echo_allocation(result)
        return EXIT_OK

    return _guarded(body)


def cmd_compare(run: RunConfig) -> int:
    """Write ``report.csv`` and ``report.json`` comparing no storage, IES, CES and CES+Share."""

    def body():
        model = run.load_model().with_sharing_mode(SharingMode.PER_BUILDING)
        pooled_model = model.with_sharing_mode(SharingMode.POOLED)
        methods = run.methods()
        if _shapley_blocked(run, model.n_buildings, methods):
            return EXIT_USAGE
        cache = CharacteristicCache()
        allocations = {method: _allocate_community(model, method, cache, run) for method in methods}
        pooled = {method: _allocate_community(pooled_model, method, cache, run) for method in methods}
        report = build_report(model, cache, allocations, pooled_allocations=pooled)
        write_report(report, run.out)
        community = report.community
        click.echo(f"no storage:  {community.baseline_no_es:.6f}")
        click.echo(f"IES:         {community.ies_total:.6f}")
        click.echo(f"CES:         {community.ces_total:.6f}")
        click.echo(f"CES+Share:   {community.pooled_total:.6f}")
        if not report.dominance_holds():
            click.secho("Warning: community costs are out of dominance order", fg="yellow", err=True)
        return EXIT_OK

    return _guarded(body)


def cmd_synth(run: RunConfig, n_buildings: int, n_scenarios: int, n_periods: int) -> int:
    """Write a seeded synthetic community under ``--out``."""

    def body():
        paths = write_synthetic_community(
            run.out, n_buildings, n_scenarios, n_periods, run.seed, config_path=run.config
        )
        for path in paths.values():
            click.echo(str(path))
        return EXIT_OK

    return _guarded(body)


def _community_options(command):
    options = [
        click.option(
            "--profiles",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            required=True,
            help="Long-format profile CSV.",
        ),
        click.option(
            "--config",
            type=click.Path(dir_okay=False, path_type=Path),
            envvar=CONFIG_ENV_VAR,
            default=None,
            help=f"Community TOML config; falls back to ${CONFIG_ENV_VAR}, then the packaged default.",
        ),
        click.option(
            "--sharing",
            type=click.Choice([mode.value for mode in SharingMode]),
            default=None,
            help="Override the config's sharing mode.",
        ),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _output_options(command):
    command = click.option(
        "--threads",
        type=click.IntRange(min=1),
        default=lambda: os.cpu_count() or 1,
        show_default="machine parallelism",
        help="Coalitions evaluated in parallel.",
    )(command)
    return click.option(
        "--out",
        type=click.Path(file_okay=False, path_type=Path),
        default=Path("out"),
        show_default=True,
        help="Output directory.",
    )(command)


def _method_option(command):
    command = click.option(
        "--force", is_flag=True, help=f"Allow the Shapley value beyond {SHAPLEY_MAX_PLAYERS} players."
    )(command)
    return click.option(
        "--method",
        type=click.Choice([method.value for method in AllocationMethod] + [ALL_METHODS]),
        default=ALL_METHODS,
        show_default=True,
        help="Allocation method.",
    )(command)


@click.group()
@click.version_option(installed_version(), prog_name="community-storage")
@click.option("-v", "--verbose", count=True, help="Log progress; repeat for debug output.")
@click.pass_context
def main(ctx, verbose):
    """Size, operate and share the cost of a community energy storage."""
    level = VERBOSITY_LEVELS[min(verbose, len(VERBOSITY_LEVELS) - 1)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    ctx.obj = verbose


@main.command()
@_community_options
@_output_options
@click.option("--coalition", default="grand", show_default=True, help='Comma-separated building ids or "grand".')
@click.pass_context
def value(ctx, profiles, config, sharing, threads, out, coalition):
    """Evaluate the optimal sizing and cost of one coalition."""
    run = RunConfig("value", profiles, config, sharing_mode=sharing, out=out, threads=threads, verbosity=ctx.obj)
    ctx.exit(cmd_value(run, coalition))


@main.command()
@click.option(
    "--profiles",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Long-format profile CSV.",
)
@click.option(
    "--config",
    type=click.Path(dir_okay=False, path_type=Path),
    envvar=CONFIG_ENV_VAR,
    default=None,
    help=f"Community TOML config; falls back to ${CONFIG_ENV_VAR}, then the packaged default.",
)
@click.option(
    "--sharing",
    type=click.Choice([mode.value for mode in SharingMode]),
    default=None,
    help="Override the config's sharing mode.",
)
@click.option(
    "--game",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Explicit cost game as JSON, instead of a community.",
)
@_method_option
@_output_options
@click.pass_context
def allocate(ctx, profiles, config, sharing, game, method, force, threads, out):
    """Allocate the grand coalition's cost among the buildings."""
    if (profiles is None) == (game is None):
        raise click.UsageError("Pass exactly one of --profiles or --game.")
    run = RunConfig(
        "allocate",
        profiles,
        config,
        method=method,
        sharing_mode=sharing,
        out=out,
        threads=threads,
        force=force,
        verbosity=ctx.obj,
    )
    ctx.exit(cmd_allocate(run, game))


@main.command()
@_community_options
@_method_option
@_output_options
@click.pass_context
def compare(ctx, profiles, config, sharing, method, force, threads, out):
    """Compare no storage, individual storage, shared storage and shared storage with pooled energy."""
    run = RunConfig(
        "compare",
        profiles,
        config,
        method=method,
        sharing_mode=sharing,
        out=out,
        threads=threads,
        force=force,
        verbosity=ctx.obj,
    )
    ctx.exit(cmd_compare(run))


@main.command()
@click.option("-n", "--buildings", type=int, default=5, show_default=True, help="Number of buildings.")
@click.option("--scenarios", type=int, default=10, show_default=True, help="Number of representative days.")
@click.option("--periods", type=int, default=24, show_default=True, help="Periods per day.")
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
@click.option(
    "--config",
    type=click.Path(dir_okay=False, path_type=Path),
    envvar=CONFIG_ENV_VAR,
    default=None,
    help="Config providing the tariff and storage economics.",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("out"),
    show_default=True,
    help="Output directory.",
)
@click.pass_context
def synth(ctx, buildings, scenarios, periods, seed, config, out):
    """Generate a synthetic community of complementary buildings."""
    run = RunConfig("synth", config=config, out=out, seed=seed, verbosity=ctx.obj)
    ctx.exit(cmd_synth(run, buildings, scenarios, periods))
