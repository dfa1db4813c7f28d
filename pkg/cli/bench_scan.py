"""
CLI module for benchmarking scan time against sequence length
"""
import click
from pydantic_core import to_json

from cli import exit_on_error
from client.runtime import RuntimeClient
from services.benchmark_service import DEFAULT_LENGTHS, BenchImpl, bench_scan as run_bench
from services.benchmark_service import parse_lengths

BENCH_STREAM = 3


@click.command("bench-scan")  # type: ignore[misc]
@click.option("--lengths", type=str, default=",".join(str(n) for n in DEFAULT_LENGTHS), show_default=True)  # type: ignore[misc]
@click.option("--repeat", type=click.IntRange(min=1), default=3, show_default=True)  # type: ignore[misc]
@click.option("--impl", type=click.Choice([i.value for i in BenchImpl]), default=BenchImpl.SEQUENTIAL.value, show_default=True)  # type: ignore[misc]
@click.option("--channels", type=click.IntRange(min=1), default=4, show_default=True)  # type: ignore[misc]
@click.option("--d-state", type=click.IntRange(min=1), default=4, show_default=True)  # type: ignore[misc]
@click.option("--assert-linear", is_flag=True, help="Exit 1 unless the log-log slope lies in [0.8, 1.3]")  # type: ignore[misc]
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON")  # type: ignore[misc]
@click.pass_obj  # type: ignore[misc]
def bench_scan(
    runtime: RuntimeClient,
    lengths: str,
    repeat: int,
    impl: str,
    channels: int,
    d_state: int,
    assert_linear: bool,
    as_json: bool,
) -> None:
    """Report per-length median wall time and the log-log slope."""
    with exit_on_error():
        report = run_bench(
            parse_lengths(lengths),
            runtime.rng(BENCH_STREAM),
            impl=BenchImpl(impl),
            repeat=repeat,
            channels=channels,
            d_state=d_state,
            threads=runtime.threads,
            progress=True,
            map_fn=runtime.map,
        )
        click.echo(to_json(report.to_dict(), indent=2).decode() if as_json else report.to_table())
        if assert_linear:
            report.check_linear()
