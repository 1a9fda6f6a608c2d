import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from retinapair.errors import ValidationError


@dataclass(frozen=True)
class Settings:
    log_level: str
    log_file: Optional[str]
    output_root: Optional[Path]
    workers: int


def load_settings() -> Settings:
    """Read process settings from the environment (and a local .env)."""
    load_dotenv()
    log_file = os.getenv("LOG_FILE", "retinapair.log") or None
    output_root = os.getenv("RETINAPAIR_OUTPUT_ROOT") or None
    workers_env = os.getenv("RETINAPAIR_WORKERS", "0")
    try:
        workers = int(workers_env)
    except ValueError:
        raise ValidationError(
            f"Invalid RETINAPAIR_WORKERS value: {workers_env!r}. Must be integer."
        )
    return Settings(
        log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
        log_file=log_file,
        output_root=Path(output_root) if output_root else None,
        workers=max(0, workers),
    )


def resolve_output(path: str, settings: Optional[Settings] = None) -> Path:
    """Relative output paths are placed under RETINAPAIR_OUTPUT_ROOT when set."""
    settings = settings or load_settings()
    out = Path(path)
    if not out.is_absolute() and settings.output_root is not None:
        out = settings.output_root / out
    return out
