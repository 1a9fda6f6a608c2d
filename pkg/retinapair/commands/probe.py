from pathlib import Path
from typing import Optional

import click

from retinapair.commands import build_config, echo_json, input_paths, seed_option
from retinapair.evaluation.probe import (
    METRICS_FILE,
    FeatureKind,
    ProbeConfig,
    ProbeMode,
    ProbeTask,
    run_probe,
)
from retinapair.runlog import recorded_run
from retinapair.settings import resolve_output

EXISTING_FILE = click.Path(exists=True, dir_okay=False)


@click.command("probe")
@click.option(
    "--checkpoint", type=EXISTING_FILE, required=True, help="Pretraining checkpoint."
)
@click.option(
    "--manifest", type=EXISTING_FILE, required=True, help="Image manifest CSV."
)
@click.option(
    "--labels",
    type=EXISTING_FILE,
    required=True,
    help="labels.csv with patient splits.",
)
@click.option(
    "--task",
    type=click.Choice([t.value for t in ProbeTask]),
    default=ProbeTask.DISEASE.value,
    show_default=True,
    help="Downstream target.",
)
@click.option(
    "--mode",
    type=click.Choice([m.value for m in ProbeMode]),
    default=ProbeMode.PROBE.value,
    show_default=True,
    help="Frozen-encoder probe or full fine-tune.",
)
@click.option(
    "--feature",
    type=click.Choice([f.value for f in FeatureKind]),
    default=FeatureKind.CLS.value,
    show_default=True,
    help="Encoder output used as the feature.",
)
@click.option(
    "--epochs",
    type=click.IntRange(min=1),
    default=50,
    show_default=True,
    help="Training epochs.",
)
@click.option(
    "--batch-size",
    type=click.IntRange(min=1),
    default=16,
    show_default=True,
    help="Batch size.",
)
@click.option(
    "--lr",
    type=click.FloatRange(min=0.0, min_open=True),
    default=None,
    help="Learning rate (1e-3 probe, 5e-5 fine-tune when omitted).",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    required=True,
    help="Directory for metrics.json.",
)
@seed_option(0)
def probe(
    checkpoint: str,
    manifest: str,
    labels: str,
    task: str,
    mode: str,
    feature: str,
    epochs: int,
    batch_size: int,
    lr: Optional[float],
    out: str,
    seed: int,
) -> None:
    """Evaluate a checkpoint with a linear probe or fine-tune."""
    out_dir = resolve_output(out)
    config = build_config(
        ProbeConfig,
        None,
        {
            "task": task,
            "mode": mode,
            "feature": feature,
            "epochs": epochs,
            "batch_size": batch_size,
            "lr": lr,
            "seed": seed,
        },
    )
    body = config.model_dump(mode="json")
    body["inputs"] = input_paths(
        checkpoint=checkpoint, manifest=manifest, labels=labels
    )
    with recorded_run(out_dir, "probe", body, config.seed) as run:
        metrics = run_probe(
            Path(checkpoint), Path(manifest), Path(labels), config, out_dir
        )
        run.add_output("metrics", out_dir / METRICS_FILE)
    echo_json({"best_epoch": metrics["best_epoch"], "splits": metrics["splits"]})
