from pathlib import Path
from typing import Optional

import click

from retinapair.commands import build_config, echo_json, seed_option, workers_option
from retinapair.data.synth import (
    SynthSpec,
    generate_dataset,
    require_empty_dir,
    summarize,
)
from retinapair.runlog import RUN_MANIFEST, recorded_run
from retinapair.settings import resolve_output


@click.command("synth-gen")
@click.option(
    "--n",
    "n_patients",
    type=click.IntRange(min=1),
    default=None,
    help="Number of patients; overrides the config (200 when neither is set).",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    required=True,
    help="Output directory (must be empty).",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="SynthSpec JSON; --n and --seed override it.",
)
@seed_option(None, help="Overrides the config seed (7 when neither is set).")
@workers_option
def synth_gen(
    n_patients: Optional[int],
    out: str,
    config_path: Optional[str],
    seed: Optional[int],
    workers: int,
) -> None:
    """Generate a synthetic fundus cohort with manifest and labels."""
    out_dir = resolve_output(out)
    spec = build_config(
        SynthSpec,
        Path(config_path) if config_path else None,
        {"n_patients": n_patients, "seed": seed},
    )
    ignore = (RUN_MANIFEST, RUN_MANIFEST + ".tmp")
    require_empty_dir(out_dir, ignore)
    config = spec.model_dump(mode="json")
    with recorded_run(out_dir, "synth-gen", config, spec.seed) as run:
        dataset = generate_dataset(spec, out_dir, workers=workers, ignore=ignore)
        run.add_output("manifest", dataset.manifest)
        run.add_output("labels", dataset.labels)
        run.add_output("truth", dataset.truth)
    echo_json(summarize(dataset.patients, dataset.splits))
