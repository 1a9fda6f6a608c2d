"""Run manifests: a JSON record of every subcommand run, written before and after."""

import json
import logging
import os
import platform
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import numpy as np
import torch

from retinapair.errors import RetinaPairError

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"


def code_version() -> str:
    from retinapair import __version__

    return (
        f"retinapair {__version__}; torch {torch.__version__}; "
        f"numpy {np.__version__}; python {platform.python_version()}"
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    subcommand: str
    config: Dict[str, Any]
    seed: Optional[int]
    code_version: str
    started_at: str
    finished_at: Optional[str] = None
    status: str = "running"
    outputs: Dict[str, str] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, body: Dict[str, Any]) -> "RunManifest":
        return cls(**body)

    def add_output(self, name: str, path: Path) -> None:
        self.outputs[name] = str(path)


def write_manifest(path: Path, manifest: RunManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    body = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    tmp.write_text(body, encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_manifest(path: Path) -> RunManifest:
    return RunManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@contextmanager
def recorded_run(
    out_dir: Path, subcommand: str, config: Dict[str, Any], seed: Optional[int]
) -> Iterator[RunManifest]:
    """Write the manifest on entry, then again with status and outputs on exit."""
    path = Path(out_dir) / RUN_MANIFEST
    manifest = RunManifest(
        subcommand=subcommand,
        config=config,
        seed=seed,
        code_version=code_version(),
        started_at=_now(),
    )
    write_manifest(path, manifest)
    try:
        yield manifest
    except RetinaPairError as e:
        manifest.status = "failed"
        manifest.error = e.to_dict()
        raise
    except Exception as e:
        manifest.status = "failed"
        manifest.error = {"error": type(e).__name__, "message": str(e)}
        raise
    else:
        manifest.status = "ok"
    finally:
        manifest.finished_at = _now()
        write_manifest(path, manifest)
        logger.info(f"Run manifest written to {path} ({manifest.status})")
