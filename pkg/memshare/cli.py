#!/usr/bin/env python3.9
"""Command line interface: replay traces, generate workloads, compare runs, serve.

Exit codes are 0 on success, 1 on usage errors and 2 on data errors (unreadable
or malformed configuration, trace or workload files, and traces naming an
unconfigured application or an item larger than a segment).
"""
# Imports from standard library.
from pathlib import Path
import sys
from typing import Callable, Optional, TypeVar
# Imports from third-party modules.
import click
from loguru import logger
import typer
# Imports from local modules.
from memshare.config import EngineConfig, load_config, with_overrides
from memshare.errors import (ConfigError, InvalidSpec, OversizeObject, TraceError, UnknownApp,
                             UsageError)
from memshare.experiment import (bench_clean, bundled_config, ReplayOptions, run_experiment,
                                 sweep_private_fraction)
from memshare.report import (clean_bench_table, compare as compare_rows, load_summary, report,
                             summary_rows, summary_table, write_clean_bench, write_comparison)
from memshare.server import run_server
from memshare.trace import parse_trace, TraceRecord, write_trace
from memshare.workload import bundled_workload, generate, load_spec, WorkloadSpec

app = typer.Typer(add_completion=False,
                  help='Multi-tenant log-structured cache: simulator, harness and server.')

T = TypeVar('T')

_DATA_ERRORS = (ConfigError, InvalidSpec, TraceError, UnknownApp, OversizeObject, OSError)


def _guarded(action: Callable[[], T]) -> T:
    """Run ``action``, turning data errors into exit code 2."""
    try:
        return action()
    except _DATA_ERRORS as error:
        logger.error(str(error))
        raise typer.Exit(code=2) from error


def _config(path: Optional[Path], **overrides: object) -> EngineConfig:
    config: EngineConfig = load_config(path) if path is not None else bundled_config()
    changes = {k: v for k, v in overrides.items() if v is not None}
    return with_overrides(config, **changes) if changes else config


def _records(trace: Optional[Path], spec: Optional[Path], seed: Optional[int],
             duration: float) -> tuple[list[TraceRecord], bool]:
    """Return the requests to replay and whether they are synthetic."""
    if trace is not None:
        return list(parse_trace(trace)), False
    workload: WorkloadSpec = load_spec(spec) if spec is not None else bundled_workload(duration)
    return list(generate(workload, seed)), True


@app.callback()
def configure(log_level: str = typer.Option('WARNING', help='loguru level for stderr.')) -> None:
    """Set up logging for every command."""
    logger.remove()
    logger.add(sys.stderr, level=log_level.upper())


@app.command()
def replay(engine: Optional[str] = typer.Option(None, help='memshare, slab_partitioned or '
                                                             'slab_greedy.'),
           config: Optional[Path] = typer.Option(None, help='key = value configuration file.'),
           trace: Optional[Path] = typer.Option(None, help='Trace to replay.'),
           spec: Optional[Path] = typer.Option(None, help='Workload spec to generate from.'),
           out: Path = typer.Option(..., help='Directory for series and summary files.'),
           seed: Optional[int] = typer.Option(None, help='Workload and engine seed.'),
           fill_on_miss: Optional[bool] = typer.Option(
               None, '--fill-on-miss/--no-fill-on-miss',
               help='SET after GET misses (default: on for synthetic workloads).'),
           duration: float = typer.Option(300.0, help='Bundled workload length in seconds.'),
           policy: Optional[str] = typer.Option(None, help='partitioned, shared or idle_tax.'),
           auto_private_window: Optional[float] = typer.Option(
               None, help='Seconds of shared policy before automatic private memory.'),
           progress: bool = typer.Option(False, help='Show a progress bar.')) -> None:
    """Replay a trace (or a generated workload) through one engine."""
    def action() -> None:
        settings: EngineConfig = _config(config, engine=engine, policy=policy, rng_seed=seed)
        records, synthetic = _records(trace, spec, seed, duration)
        fill: bool = synthetic if fill_on_miss is None else fill_on_miss
        result = run_experiment(settings, records, ReplayOptions(
            fill_on_miss=fill, auto_private_window=auto_private_window, progress=progress))
        report([result], out)
        typer.echo(summary_table(summary_rows(result)))
    _guarded(action)


@app.command()
def gen(spec: Optional[Path] = typer.Option(None, help='Workload spec (JSON); default is '
                                                         'the bundled corpus.'),
        seed: Optional[int] = typer.Option(None, help='Overrides the spec seed.'),
        out: Path = typer.Option(..., help='Trace file to write.'),
        duration: float = typer.Option(300.0, help='Bundled workload length in seconds.')) -> None:
    """Generate a trace from a workload spec."""
    def action() -> None:
        workload: WorkloadSpec = (load_spec(spec) if spec is not None
                                  else bundled_workload(duration))
        count: int = write_trace(generate(workload, seed), out)
        typer.echo(f'{count} records written to {out}')
    _guarded(action)


@app.command()
def compare(baseline: Path = typer.Option(..., help='Baseline summary.csv or its directory.'),
            candidate: Path = typer.Option(..., help='Candidate summary.csv or its directory.'),
            out: Path = typer.Option(..., help='Directory for the comparison.')) -> None:
    """Compute the candidate's miss reduction against a baseline run."""
    def summary_path(path: Path) -> Path:
        return path / 'summary.csv' if path.is_dir() else path

    def action() -> None:
        try:
            rows = compare_rows(load_summary(summary_path(baseline)),
                                load_summary(summary_path(candidate)))
        except (KeyError, ValueError) as error:
            if isinstance(error, UsageError):
                raise
            raise ConfigError(f'malformed summary: {error!r}') from error
        write_comparison(rows, out)
        typer.echo(summary_table(rows))
    try:
        _guarded(action)
    except UsageError as error:
        logger.error(str(error))
        raise typer.Exit(code=1) from error


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError as error:
        raise typer.BadParameter(f'expected comma-separated integers, got {text!r}') from error


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError as error:
        raise typer.BadParameter(f'expected comma-separated numbers, got {text!r}') from error


@app.command('bench-clean')
def bench_clean_command(n_list: str = typer.Option('1,2,10,20', help='Segments per pass.'),
                        config: Optional[Path] = typer.Option(None),
                        trace: Optional[Path] = typer.Option(None),
                        spec: Optional[Path] = typer.Option(None),
                        seed: Optional[int] = typer.Option(None),
                        duration: float = typer.Option(300.0),
                        out: Optional[Path] = typer.Option(None, help='Directory for tables.')
                        ) -> None:
    """Measure cleaning cost for several segments-per-pass values."""
    sizes: list[int] = _int_list(n_list)

    def action() -> None:
        settings: EngineConfig = _config(config, rng_seed=seed)
        records, synthetic = _records(trace, spec, seed, duration)
        rows = bench_clean(settings, records, sizes, ReplayOptions(fill_on_miss=synthetic))
        if out is not None:
            write_clean_bench(rows, out)
        typer.echo(clean_bench_table(rows))
    _guarded(action)


@app.command()
def sweep(fractions: str = typer.Option('0,0.25,0.5,0.75,1', help='Private memory fractions.'),
          config: Optional[Path] = typer.Option(None),
          trace: Optional[Path] = typer.Option(None),
          spec: Optional[Path] = typer.Option(None),
          seed: Optional[int] = typer.Option(None),
          duration: float = typer.Option(300.0),
          out: Path = typer.Option(..., help='Directory for series and summary files.')) -> None:
    """Replay one workload under several private memory fractions (shared policy)."""
    values: list[float] = _float_list(fractions)

    def action() -> None:
        settings: EngineConfig = _config(config, policy='shared', engine='memshare',
                                         rng_seed=seed)
        records, synthetic = _records(trace, spec, seed, duration)
        results = sweep_private_fraction(settings, records, values,
                                         ReplayOptions(fill_on_miss=synthetic))
        report(results, out)
        typer.echo(summary_table([row for r in results for row in summary_rows(r)]))
    _guarded(action)


@app.command()
def serve(config: Optional[Path] = typer.Option(None),
          host: Optional[str] = typer.Option(None),
          port: Optional[int] = typer.Option(None)) -> None:
    """Serve the engine over the memcached ASCII protocol."""
    settings: EngineConfig = _guarded(lambda: _config(config, host=host, port=port))
    run_server(settings)


def main() -> int:
    """Entry point of the ``memshare`` console script."""
    try:
        outcome = typer.main.get_command(app).main(standalone_mode=False)
    except click.exceptions.Exit as done:
        return done.exit_code
    except click.UsageError as error:
        error.show()
        return 1
    except click.Abort:
        return 1
    return outcome if isinstance(outcome, int) else 0


if __name__ == '__main__':
    sys.exit(main())
