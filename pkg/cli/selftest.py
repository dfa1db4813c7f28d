"""
CLI module for the built-in invariant suite
"""
import click

from cli import EXIT_TOLERANCE, exit_on_error, fail
from client.runtime import RuntimeClient
from services.verification_service import GOLDEN_DIR, format_matrix, run_selftest

SELFTEST_STREAM = 4


@click.command("selftest")  # type: ignore[misc]
@click.option("--golden-dir", type=str, default=GOLDEN_DIR, show_default=True, help="Golden files, local directory or URI")  # type: ignore[misc]
@click.pass_obj  # type: ignore[misc]
def selftest(runtime: RuntimeClient, golden_dir: str) -> None:
    """Run scan equivalences, oracle checks and format round-trips; exit 0 iff all pass."""
    with exit_on_error():
        results = run_selftest(runtime.rng(SELFTEST_STREAM), golden_dir, progress=True)
        click.echo(format_matrix(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        fail(f"{len(failed)} check(s) failed: {', '.join(failed)}", EXIT_TOLERANCE)
