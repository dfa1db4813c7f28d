"""
CLI module for scoring predicted disparity maps against ground truth
"""
import click
from pydantic_core import to_json

from cli import exit_on_error
from client.runtime import RuntimeClient
from services.evaluation_service import evaluate_directories


@click.command("eval")  # type: ignore[misc]
@click.option("--pred-dir", type=str, required=True, help="Directory of predicted disparity PFMs")  # type: ignore[misc]
@click.option("--gt-dir", type=str, required=True, help="Directory of ground-truth disparity PFMs")  # type: ignore[misc]
@click.option("--focal", type=float, default=None, help="Focal length in pixels")  # type: ignore[misc]
@click.option("--baseline", type=float, default=None, help="Baseline in metres; read from the manifest when omitted")  # type: ignore[misc]
@click.option("--format", "output_format", type=click.Choice(["json", "table"]), default="table", show_default=True)  # type: ignore[misc]
@click.pass_obj  # type: ignore[misc]
def evaluate(
    runtime: RuntimeClient,
    pred_dir: str,
    gt_dir: str,
    focal: float | None,
    baseline: float | None,
    output_format: str,
) -> None:
    """
    Compute AbsRel, SqRel, RMSE, Log RMSE and threshold accuracies in depth space.

    Per-image metrics are averaged with pixel-count weights.
    """
    with exit_on_error():
        result = evaluate_directories(pred_dir, gt_dir, focal, baseline, map_fn=runtime.map)
        if output_format == "json":
            click.echo(to_json(result.to_dict(), indent=2).decode())
        else:
            click.echo(result.to_table())
