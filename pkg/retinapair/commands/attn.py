import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click

from retinapair.commands import echo_json, input_paths, seed_option
from retinapair.data.ingest import decode_image, load_manifest
from retinapair.evaluation.attention import (
    consistency_gap,
    export_attention,
    mean_retina_attention,
)
from retinapair.models.checkpoint import load_checkpoint, model_from_checkpoint
from retinapair.models.network import TokenSlot
from retinapair.models.records import Eye, FundusImage
from retinapair.runlog import recorded_run
from retinapair.settings import resolve_output

DIAGNOSTICS_FILE = "diagnostics.json"
EXISTING_FILE = click.Path(exists=True, dir_okay=False)


@click.command("attn")
@click.option(
    "--checkpoint", type=EXISTING_FILE, required=True, help="Pretraining checkpoint."
)
@click.option(
    "--image", type=EXISTING_FILE, required=True, help="Fundus image to visualize."
)
@click.option(
    "--token",
    "tokens",
    type=click.Choice([t.value for t in TokenSlot]),
    multiple=True,
    help="Token to export; repeatable (default: every token the model has).",
)
@click.option(
    "--layer",
    type=int,
    default=-1,
    show_default=True,
    help="Encoder layer; negative counts from the last.",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    required=True,
    help="Directory for .npy arrays and overlays.",
)
@click.option(
    "--manifest",
    type=EXISTING_FILE,
    default=None,
    help="Also report retina attention and consistency gap over this manifest.",
)
@click.option(
    "--max-pairs",
    type=click.IntRange(min=1),
    default=200,
    show_default=True,
    help="Pairs sampled for the consistency gap.",
)
@seed_option(0)
def attn(
    checkpoint: str,
    image: str,
    tokens: Tuple[str, ...],
    layer: int,
    out: str,
    manifest: Optional[str],
    max_pairs: int,
    seed: int,
) -> None:
    """Export attention maps of the CLS and metadata tokens."""
    out_dir = resolve_output(out)
    model = model_from_checkpoint(load_checkpoint(Path(checkpoint)))
    slots = [TokenSlot(t) for t in tokens] or list(model.config.layout)
    fundus = FundusImage(
        patient_id="",
        eye=Eye.LEFT,
        scanner_id="",
        pixels=decode_image(Path(image)),
        source=image,
    )
    config: Dict[str, Any] = {
        **input_paths(checkpoint=checkpoint, image=image, manifest=manifest),
        "tokens": [s.value for s in slots],
        "layer": layer,
    }
    with recorded_run(out_dir, "attn", config, seed) as run:
        exports = export_attention(
            model, fundus, slots, layer, out_dir, stem=Path(image).stem
        )
        summary: Dict[str, Any] = {}
        for e in exports:
            summary[e.token.value] = {
                "array": str(e.array_path),
                "overlay": str(e.overlay_path),
                "patch_mass": e.patch_mass,
            }
            run.add_output(f"{e.token.value}_array", e.array_path)
        if manifest:
            records = load_manifest(Path(manifest))
            images = [img for record in records for img in record.images]
            gap = consistency_gap(model, records, seed=seed, max_pairs=max_pairs)
            diagnostics = {
                "retina_attention": {
                    slot.value: mean_retina_attention(model, images, slot, layer)
                    for slot in slots
                },
                "consistency": gap.to_dict(),
            }
            path = out_dir / DIAGNOSTICS_FILE
            path.write_text(json.dumps(diagnostics, indent=2), encoding="utf-8")
            run.add_output("diagnostics", path)
            summary["diagnostics"] = diagnostics
    echo_json(summary)
