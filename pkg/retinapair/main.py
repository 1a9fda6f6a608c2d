import logging
from typing import List, Optional

from retinapair import create_cli
from retinapair.settings import Settings, load_settings

# ----------------------------------------
# Logging setup
# ----------------------------------------
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(settings: Settings) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]  # stderr
    if settings.log_file:
        handlers.append(logging.FileHandler(settings.log_file))
    logging.basicConfig(
        level=settings.log_level,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


cli = create_cli()


def run(argv: Optional[List[str]] = None) -> None:
    """Console entry point."""
    configure_logging(load_settings())
    logging.getLogger(__name__).debug("Starting retinapair")
    cli.main(args=argv, prog_name="retinapair")


if __name__ == "__main__":
    run()
