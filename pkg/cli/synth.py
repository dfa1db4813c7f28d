"""
CLI module for rendering synthetic stereo datasets
"""
import click

from cli import exit_on_error
from client.runtime import RuntimeClient
from tools.synth_scenes import SynthOptions, dataset_emit


@click.command("synth")  # type: ignore[misc]
@click.option("--n", "count", type=click.IntRange(min=0), default=1, show_default=True, help="Number of scenes")  # type: ignore[misc]
@click.option("--out", "out_dir", type=str, required=True, help="Output directory (local path or s3:// URI)")  # type: ignore[misc]
@click.option("--baseline", type=float, default=None, help="Fixed baseline in metres; sampled from {0.2, 0.3, 0.4, 0.5} when omitted")  # type: ignore[misc]
@click.option("--underwater", is_flag=True, help="Apply attenuation and backscatter")  # type: ignore[misc]
@click.option("--integer-disp/--continuous-disp", default=True, show_default=True, help="Restrict disparities to multiples of 4 px")  # type: ignore[misc]
@click.option("--layers", type=click.IntRange(min=0), default=1, show_default=True, help="Foreground planes per scene")  # type: ignore[misc]
@click.option("--width", type=int, default=640, show_default=True)  # type: ignore[misc]
@click.option("--height", type=int, default=480, show_default=True)  # type: ignore[misc]
@click.pass_obj  # type: ignore[misc]
def synth(
    runtime: RuntimeClient,
    count: int,
    out_dir: str,
    baseline: float | None,
    underwater: bool,
    integer_disp: bool,
    layers: int,
    width: int,
    height: int,
) -> None:
    """Render N synthetic stereo scenes with exact ground-truth disparity."""
    with exit_on_error():
        opts = SynthOptions(
            seed=runtime.seed,
            baseline_m=baseline,
            underwater=underwater,
            integer_disparity=integer_disp,
            num_layers=layers,
            width=width,
            height=height,
        )
        manifest = dataset_emit(count, out_dir, opts, map_fn=runtime.map)
        click.echo(f"Wrote {len(manifest['scenes'])} scenes to {out_dir}")
