__version__ = "0.1.0"

import click  # noqa: E402
from dotenv import load_dotenv  # noqa: E402

from retinapair.commands import RetinaPairGroup  # noqa: E402
from retinapair.commands.attn import attn  # noqa: E402
from retinapair.commands.pairs import pairs_stats  # noqa: E402
from retinapair.commands.pretrain import pretrain  # noqa: E402
from retinapair.commands.probe import probe  # noqa: E402
from retinapair.commands.schedule import schedule  # noqa: E402
from retinapair.commands.synth import synth_gen  # noqa: E402


def create_cli() -> click.Group:
    load_dotenv()

    @click.group(cls=RetinaPairGroup)
    @click.version_option(__version__, prog_name="retinapair")
    def cli() -> None:
        """Paired-view masked pretraining for fundus images."""

    for command in (synth_gen, pretrain, probe, attn, schedule, pairs_stats):
        cli.add_command(command)
    return cli
