"""
CLI module for checking the analytic scan gradients against finite differences
"""
import click

from cli import exit_on_error
from client.runtime import RuntimeClient
from services.verification_service import gradcheck as run_gradcheck
from services.verification_service import parse_shapes, random_shapes

GRADCHECK_STREAM = 2


@click.command("gradcheck")  # type: ignore[misc]
@click.option("--shapes", type=str, default=None, help="Semicolon separated L,C,N triples; random tiny shapes when omitted")  # type: ignore[misc]
@click.option("--configs", type=click.IntRange(min=1), default=50, show_default=True, help="Number of random shapes")  # type: ignore[misc]
@click.option("--eps", type=float, default=1e-5, show_default=True, help="Central-difference step")  # type: ignore[misc]
@click.option("--tol", type=float, default=1e-5, show_default=True, help="Maximum relative error")  # type: ignore[misc]
@click.pass_obj  # type: ignore[misc]
def gradcheck(runtime: RuntimeClient, shapes: str | None, configs: int, eps: float, tol: float) -> None:
    """Compare scan_backward with central differences in double precision."""
    with exit_on_error():
        rng = runtime.rng(GRADCHECK_STREAM)
        cases = parse_shapes(shapes) if shapes else random_shapes(rng, configs)
        report = run_gradcheck(cases, rng, eps=eps, tol=tol, progress=len(cases) > 1)
        for case in report.cases:
            length, channels, d_state = case.shape
            click.echo(f"L={length:<3} C={channels:<2} N={d_state:<2} max rel err {case.max_error:.3e}")
        click.echo(f"max relative error {report.max_error:.3e} (tol {tol:.1e})")
        report.raise_for_tolerance()
        click.echo("PASS")
