from typing import Optional

import click

from retinapair.data.masking import MaskSchedule, schedule_tsv
from retinapair.settings import resolve_output

RATIO = click.FloatRange(0.0, 1.0, min_open=True, max_open=True)


@click.command("schedule")
@click.option(
    "--r0",
    type=RATIO,
    default=0.985,
    show_default=True,
    help="Masking ratio at epoch 0.",
)
@click.option(
    "--rT",
    "r_t",
    type=RATIO,
    default=0.85,
    show_default=True,
    help="Masking ratio at the final epoch.",
)
@click.option(
    "--T",
    "horizon",
    type=click.IntRange(min=1),
    default=300,
    show_default=True,
    help="Number of epochs.",
)
@click.option(
    "--out",
    type=click.Path(dir_okay=False),
    default=None,
    help="Write the TSV here instead of stdout.",
)
def schedule(r0: float, r_t: float, horizon: int, out: Optional[str]) -> None:
    """Print the per-epoch masking ratio as TSV (one row per epoch 0..T)."""
    table = schedule_tsv(MaskSchedule(r0=r0, rT=r_t, T=horizon))
    if out is None:
        click.echo(table, nl=False)
        return
    path = resolve_output(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table, encoding="utf-8")
