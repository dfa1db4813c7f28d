"""
CLI module for running iterative disparity refinement on a stereo pair
"""
import logging

import click

from cli import exit_on_error
from client.runtime import RuntimeClient
from tools.config import RefineConfig, ScanConfig, ScanImpl, ScanPattern
from tools.features import ExtractorConfig, ExtractorMode, ExtractorWeights
from tools.refine import RefineMode, UpdateWeights, run_refinement
from tools.tensor_io import ensure_dir, join_path, load_archive, parent_dir, pfm_read, pfm_write, ppm_read, save_archive

logger = logging.getLogger(__name__)

# rng streams drawn from the master seed
WEIGHTS_STREAM = 1


def load_weights(
    path: str | None,
    extractor: ExtractorConfig,
    cfg: RefineConfig,
    runtime: RuntimeClient,
) -> tuple[UpdateWeights, ExtractorWeights | None]:
    """Weights from an archive, or seeded initialization when no archive is given."""
    if path is not None:
        tensors = load_archive(path)
        feat = ExtractorWeights.from_tensors(tensors) if any(k.startswith("feat.") for k in tensors) else None
        return UpdateWeights.from_tensors(tensors), feat

    feat = (
        ExtractorWeights.initialize(extractor.channels, extractor.seed)
        if extractor.mode is ExtractorMode.LEARNED
        else None
    )
    return UpdateWeights.initialize(extractor.out_channels, runtime.rng(WEIGHTS_STREAM), cfg), feat


@click.command("infer")  # type: ignore[misc]
@click.option("--left", "left_path", type=str, required=True, help="Left image (PPM)")  # type: ignore[misc]
@click.option("--right", "right_path", type=str, required=True, help="Right image (PPM)")  # type: ignore[misc]
@click.option("--weights", "weights_path", type=str, default=None, help="Weight archive; seeded initialization when omitted")  # type: ignore[misc]
@click.option("--iters", type=click.IntRange(min=0), default=RefineConfig().iters_infer, show_default=True)  # type: ignore[misc]
@click.option("--mono-init", "mono_path", type=str, default=None, help="Monocular disparity PFM, full or quarter resolution")  # type: ignore[misc]
@click.option("--mode", type=click.Choice([m.value for m in RefineMode]), default=RefineMode.LEARNED.value, show_default=True)  # type: ignore[misc]
@click.option("--features", "feature_mode", type=click.Choice([m.value for m in ExtractorMode]), default=ExtractorMode.PATCH.value, show_default=True)  # type: ignore[misc]
@click.option("--normalize-features", is_flag=True, help="Zero-mean, unit-L2 feature vectors (normalized cross-correlation)")  # type: ignore[misc]
@click.option("--subpixel/--no-subpixel", default=True, show_default=True, help="Parabolic sub-pixel fit in oracle mode")  # type: ignore[misc]
@click.option("--scan-pattern", type=click.Choice([p.value for p in ScanPattern]), default=ScanPattern.CROSS.value, show_default=True)  # type: ignore[misc]
@click.option("--scan-impl", type=click.Choice([i.value for i in ScanImpl]), default=ScanImpl.SEQUENTIAL.value, show_default=True)  # type: ignore[misc]
@click.option("--full-sequence", is_flag=True, help="Scan the whole flattened map instead of resetting at every row/column")  # type: ignore[misc]
@click.option("--dump-iters", is_flag=True, help="Write iters/{t}.pfm next to --out")  # type: ignore[misc]
@click.option("--dump-corr", "dump_corr_path", type=str, default=None, help="Write the correlation pyramid to an archive")  # type: ignore[misc]
@click.option("--save-weights", "save_weights_path", type=str, default=None, help="Write the weights used to an archive")  # type: ignore[misc]
@click.option("--out", "out_path", type=str, required=True, help="Output disparity PFM")  # type: ignore[misc]
@click.pass_obj  # type: ignore[misc]
def infer(
    runtime: RuntimeClient,
    left_path: str,
    right_path: str,
    weights_path: str | None,
    iters: int,
    mono_path: str | None,
    mode: str,
    feature_mode: str,
    normalize_features: bool,
    subpixel: bool,
    scan_pattern: str,
    scan_impl: str,
    full_sequence: bool,
    dump_iters: bool,
    dump_corr_path: str | None,
    save_weights_path: str | None,
    out_path: str,
) -> None:
    """Estimate full-resolution disparity for a rectified stereo pair."""
    with exit_on_error():
        cfg = RefineConfig(
            iters_infer=iters,
            subpixel=subpixel,
            scan=ScanConfig(
                pattern=ScanPattern(scan_pattern),
                line_reset=not full_sequence,
                impl=ScanImpl(scan_impl),
            ),
        )
        extractor = ExtractorConfig(
            mode=ExtractorMode(feature_mode), seed=runtime.seed % 2**32, normalize=normalize_features
        )
        refine_mode = RefineMode(mode)

        weights, feat_weights = load_weights(weights_path, extractor, cfg, runtime)
        if save_weights_path is not None:
            tensors = weights.to_tensors()
            if feat_weights is not None:
                tensors.update(feat_weights.to_tensors())
            save_archive(save_weights_path, tensors, convert_doubles=True)

        left = ppm_read(left_path)
        right = ppm_read(right_path)
        mono = pfm_read(mono_path) if mono_path is not None else None

        result = run_refinement(
            left,
            right,
            weights,
            iters=iters,
            cfg=cfg,
            mode=refine_mode,
            extractor=extractor,
            extractor_weights=feat_weights,
            mono_init=mono,
            return_snapshots=dump_iters,
            map_fn=runtime.map,
            progress=logger.isEnabledFor(logging.INFO),
        )

        pfm_write(out_path, runtime.cast(result.disparity))
        if dump_corr_path is not None and result.pyramid is not None:
            save_archive(dump_corr_path, result.pyramid.to_tensors())
        if dump_iters:
            iters_dir = join_path(parent_dir(out_path), "iters")
            ensure_dir(iters_dir)
            for t, snapshot in enumerate(result.snapshots, start=1):
                pfm_write(join_path(iters_dir, f"{t}.pfm"), runtime.cast(snapshot))
        click.echo(
            f"Wrote {result.disparity.shape[1]}x{result.disparity.shape[0]} disparity to {out_path}"
            f" ({iters} iterations, {refine_mode.value} mode)"
        )
