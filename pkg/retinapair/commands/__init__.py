"""Click plumbing shared by every subcommand."""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Type, TypeVar

import click
from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from retinapair.errors import RetinaPairError, ValidationError

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class RetinaPairGroup(click.Group):
    """Maps package errors to a JSON body on stderr and the error's exit code."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except RetinaPairError as e:
            logger.error(f"{e.category} error: {e.message}")
            click.echo(json.dumps(e.to_dict()), err=True)
            ctx.exit(e.exit_code)


def workers_option(func: Callable) -> Callable:
    return click.option(
        "--workers",
        type=click.IntRange(min=0),
        default=0,
        envvar="RETINAPAIR_WORKERS",
        show_default=True,
        show_envvar=True,
        help="Data-pipeline worker threads (0 = inline).",
    )(func)


def seed_option(
    default: Optional[int],
    help: str = "Single source of all randomness for the run.",
) -> Callable[[Callable], Callable]:
    return click.option(
        "--seed",
        type=click.IntRange(min=0),
        default=default,
        show_default=default is not None,
        help=help,
    )


def echo_json(body: Dict[str, Any]) -> None:
    click.echo(json.dumps(body, indent=2, sort_keys=True))


def input_paths(**paths: Optional[str]) -> Dict[str, Optional[str]]:
    """Absolute input paths for the run manifest; unset inputs stay None."""
    return {k: str(Path(v).resolve()) if v else None for k, v in paths.items()}


def build_config(
    model: Type[ConfigT], path: Optional[Path], overrides: Dict[str, Any]
) -> ConfigT:
    """Validate a JSON config file (or defaults) with non-None overrides applied."""
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        if not isinstance(body, dict):
            raise ValidationError(
                f"config {path} must hold a JSON object, got {type(body).__name__}"
            )
        body.update({k: v for k, v in overrides.items() if v is not None})
        return model.model_validate(body)
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}")
    except PydanticValidationError as e:
        raise ValidationError(f"invalid {model.__name__}: {e}")
