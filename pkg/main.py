#!/usr/bin/env python3
"""
Main entry point for the stereo-ssm CLI
"""
import logging

import click

from cli import exit_on_error
from cli.bench_scan import bench_scan
from cli.evaluate import evaluate
from cli.gradcheck import gradcheck
from cli.infer import infer
from cli.selftest import selftest
from cli.synth import synth
from client.runtime import Precision, RuntimeClient


@click.group()  # type: ignore[misc]
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True, help="Master seed")  # type: ignore[misc]
@click.option(
    "--precision",
    type=click.Choice([p.value for p in Precision]),
    default=Precision.F32.value,
    show_default=True,
    help="Storage precision of written disparity maps; computation always runs in f64",
)  # type: ignore[misc]
@click.option("--threads", type=int, default=0, show_default=True, help="Worker threads, 0 = $SSA2_THREADS or CPU count")  # type: ignore[misc]
@click.option("--verbose", is_flag=True, help="Log progress at INFO level")  # type: ignore[misc]
@click.pass_context  # type: ignore[misc]
def cli(ctx: click.Context, seed: int, precision: str, threads: int, verbose: bool) -> None:
    """Selective state-space stereo refinement toolkit"""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    with exit_on_error():
        runtime = RuntimeClient(seed=seed, precision=Precision(precision), threads=threads)
    ctx.obj = runtime
    ctx.call_on_close(runtime.close)


cli.add_command(synth)
cli.add_command(infer)
cli.add_command(evaluate)
cli.add_command(gradcheck)
cli.add_command(bench_scan)
cli.add_command(selftest)

if __name__ == "__main__":
    cli()
