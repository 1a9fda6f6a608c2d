import json
from pathlib import Path
from typing import Any, Dict, Optional

import click

from retinapair.commands import (
    build_config,
    echo_json,
    input_paths,
    workers_option,
)
from retinapair.data.ingest import load_manifest
from retinapair.evaluation.probe import load_labels
from retinapair.models.network import DecoderPreset, EncoderPreset
from retinapair.runlog import recorded_run
from retinapair.settings import resolve_output
from retinapair.training.engine import TrainConfig, run_pretraining

EXISTING_FILE = click.Path(exists=True, dir_okay=False)


def _overrides(
    config_path: Optional[str],
    seed: Optional[int],
    epochs: Optional[int],
    batch_size: Optional[int],
    encoder: Optional[str],
    decoder: Optional[str],
    workers: int,
) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "workers": workers,
    }
    if encoder or decoder:
        model: Dict[str, Any] = {}
        if config_path:
            try:
                body = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                body = None
            if isinstance(body, dict) and isinstance(body.get("model"), dict):
                model = dict(body["model"])
        if encoder:
            model["encoder"] = encoder
        if decoder:
            model["decoder"] = decoder
        overrides["model"] = model
    return overrides


@click.command("pretrain")
@click.option(
    "--manifest", type=EXISTING_FILE, required=True, help="Image manifest CSV."
)
@click.option(
    "--config",
    "config_path",
    type=EXISTING_FILE,
    default=None,
    help="TrainConfig JSON (defaults when omitted).",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    required=True,
    help="Run directory for checkpoints and logs.",
)
@click.option(
    "--resume",
    type=EXISTING_FILE,
    default=None,
    help="Epoch checkpoint to resume from.",
)
@click.option(
    "--stop-after",
    type=click.IntRange(min=1),
    default=None,
    help="Stop after this many completed epochs.",
)
@click.option(
    "--labels",
    type=EXISTING_FILE,
    default=None,
    help="labels.csv used to restrict patients to --split.",
)
@click.option(
    "--split",
    type=click.Choice(["train", "val", "test"]),
    default="train",
    show_default=True,
    help="Split kept when --labels is given.",
)
@click.option(
    "--seed",
    type=click.IntRange(min=0),
    default=None,
    help="Overrides the config seed.",
)
@click.option(
    "--epochs",
    type=click.IntRange(min=1),
    default=None,
    help="Overrides the config epochs.",
)
@click.option(
    "--batch-size",
    type=click.IntRange(min=2),
    default=None,
    help="Overrides the config batch size.",
)
@click.option(
    "--encoder",
    type=click.Choice([p.value for p in EncoderPreset]),
    default=None,
    help="Overrides the encoder preset.",
)
@click.option(
    "--decoder",
    type=click.Choice([p.value for p in DecoderPreset]),
    default=None,
    help="Overrides the decoder preset.",
)
@workers_option
def pretrain(
    manifest: str,
    config_path: Optional[str],
    out: str,
    resume: Optional[str],
    stop_after: Optional[int],
    labels: Optional[str],
    split: str,
    seed: Optional[int],
    epochs: Optional[int],
    batch_size: Optional[int],
    encoder: Optional[str],
    decoder: Optional[str],
    workers: int,
) -> None:
    """Pretrain the siamese encoder on patient-level pairs."""
    out_dir = resolve_output(out)
    config = build_config(
        TrainConfig,
        Path(config_path) if config_path else None,
        _overrides(config_path, seed, epochs, batch_size, encoder, decoder, workers),
    )
    body = config.model_dump(mode="json")
    body["inputs"] = {
        **input_paths(
            manifest=manifest, config=config_path, labels=labels, resume=resume
        ),
        "split": split if labels else None,
        "stop_after": stop_after,
    }
    with recorded_run(out_dir, "pretrain", body, config.seed) as run:
        records = load_manifest(
            Path(manifest), compute_masks=config.retina_aware_masking
        )
        if labels:
            rows = load_labels(Path(labels))
            keep = {pid for pid, row in rows.items() if row.split == split}
            records = [r for r in records if r.patient_id in keep]
        result = run_pretraining(
            Path(manifest),
            config,
            out_dir,
            resume_from=Path(resume) if resume else None,
            stop_after_epoch=stop_after,
            records=records,
        )
        run.add_output("checkpoint_last", result.last_checkpoint)
        if result.final_checkpoint is not None:
            run.add_output("checkpoint_final", result.final_checkpoint)
        run.add_output("losses", result.losses_path)
        run.add_output("schedule", result.schedule_path)
    echo_json(
        {
            "checkpoint_final": (
                str(result.final_checkpoint) if result.final_checkpoint else None
            ),
            "checkpoint_last": str(result.last_checkpoint),
            "epochs_completed": result.epochs_completed,
        }
    )
