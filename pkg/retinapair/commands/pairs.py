from pathlib import Path

import click

from retinapair.commands import echo_json
from retinapair.data.ingest import (
    build_pair_index,
    build_pair_templates,
    describe_pairs,
    load_manifest,
)


@click.command("pairs-stats")
@click.option(
    "--manifest",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
    help="Image manifest CSV.",
)
@click.option(
    "--per-patient",
    is_flag=True,
    default=False,
    help="Include pair counts per patient.",
)
def pairs_stats(manifest: str, per_patient: bool) -> None:
    """Report how many same-patient pairs a manifest yields."""
    records = load_manifest(Path(manifest), compute_masks=False)
    stats = describe_pairs(build_pair_templates(records))
    body = {
        "patients": len(records),
        "images": sum(len(r.images) for r in records),
        "pairs": stats["pairs"],
        "cross_laterality": stats["cross_laterality"],
        "same_scanner": stats["same_scanner"],
        "single_image_patients": sum(1 for r in records if len(r.images) == 1),
    }
    if per_patient:
        body["per_patient"] = build_pair_index(records).counts
    echo_json(body)
