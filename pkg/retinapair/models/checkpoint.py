"""Single-file checkpoint archive with a schema version.

Contents: config echo, parameter tensors keyed by stable names, optimizer
moments, epoch counter, global step and torch RNG state.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch

from retinapair.errors import CheckpointError
from retinapair.models.network import ModelConfig, SiameseMaskedViT

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
RESUME_EXEMPT_KEYS = ("workers",)


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    model_state: Dict[str, torch.Tensor]
    epoch: int
    global_step: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None
    rng_state: Optional[torch.Tensor] = None
    schema_version: int = CHECKPOINT_SCHEMA_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.model_validate(self.config.get("model", {}))

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def config_hash(config: Dict[str, Any]) -> str:
    relevant = {k: v for k, v in config.items() if k not in RESUME_EXEMPT_KEYS}
    payload = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def config_diff(stored: Any, requested: Any, prefix: str = "") -> List[str]:
    """Flattened list of ``key: stored -> requested`` differences."""
    if isinstance(stored, dict) and isinstance(requested, dict):
        diffs: List[str] = []
        for key in sorted(set(stored) | set(requested)):
            if not prefix and key in RESUME_EXEMPT_KEYS:
                continue
            path = f"{prefix}.{key}" if prefix else str(key)
            diffs.extend(config_diff(stored.get(key), requested.get(key), path))
        return diffs
    if stored != requested:
        return [f"{prefix}: {stored!r} -> {requested!r}"]
    return []


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    """Write atomically: a temporary file is renamed over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": checkpoint.schema_version,
        "config": checkpoint.config,
        "config_hash": checkpoint.config_hash,
        "model": checkpoint.model_state,
        "optimizer": checkpoint.optimizer_state,
        "epoch": checkpoint.epoch,
        "global_step": checkpoint.global_step,
        "rng_state": checkpoint.rng_state,
        "extra": checkpoint.extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint {path} (epoch {checkpoint.epoch})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}")
    if not isinstance(payload, dict) or "model" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing model tensors")

    version = payload.get("schema_version")
    if not isinstance(version, int) or version > CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {version!r} is newer than supported "
            f"{CHECKPOINT_SCHEMA_VERSION}"
        )
    checkpoint = Checkpoint(
        config=payload.get("config") or {},
        model_state=payload["model"],
        epoch=int(payload.get("epoch", 0)),
        global_step=int(payload.get("global_step", 0)),
        optimizer_state=payload.get("optimizer"),
        rng_state=payload.get("rng_state"),
        schema_version=version,
        extra=payload.get("extra") or {},
    )
    stored_hash = payload.get("config_hash")
    if stored_hash is not None and stored_hash != checkpoint.config_hash:
        raise CheckpointError(f"corrupt checkpoint {path}: config hash mismatch")
    return checkpoint


def model_from_checkpoint(checkpoint: Checkpoint) -> SiameseMaskedViT:
    try:
        model = SiameseMaskedViT(checkpoint.model_config)
    except ValueError as e:
        raise CheckpointError(f"checkpoint carries an invalid model config: {e}")
    model.to(next(iter(checkpoint.model_state.values())).dtype)
    try:
        model.load_state_dict(checkpoint.model_state)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint tensors do not fit the model: {e}")
    model.eval()
    return model
