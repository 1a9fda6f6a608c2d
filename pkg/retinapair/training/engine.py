"""Pretraining loop: pairing, masking schedule, model, objectives, checkpoints.

All randomness is a function of (seed, epoch, index), so a run resumed from
an epoch checkpoint reproduces the uninterrupted loss stream exactly.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from retinapair.data.ingest import (
    PairTemplate,
    assign_roles,
    build_pair_templates,
    load_manifest,
    require_pairs,
)
from retinapair.data.masking import (
    MaskSchedule,
    ScheduleConfig,
    masking_ratio,
    schedule_tsv,
)
from retinapair.errors import ConfigMismatchError, TrainingAbortedError
from retinapair.models.checkpoint import (
    Checkpoint,
    config_diff,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)
from retinapair.models.network import (
    ModelConfig,
    SiameseMaskedViT,
    load_pretrained_encoder,
    patchify,
    unpatchify,
)
from retinapair.models.records import PairSample, PatientRecord
from retinapair.seeding import ORDER_STREAM, item_rng
from retinapair.training.batching import (
    PreparationSettings,
    PreparedBatch,
    collate,
    prepare_pairs,
)
from retinapair.training.objectives import (
    LossReport,
    LossTerms,
    LossWeights,
    PerceptualExtractor,
    compose_reconstruction,
    consistency_loss,
    meta_loss,
    perceptual_loss,
    recon_pixel_loss,
    total_loss,
)

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "checkpoint_final.pt"
LOSSES_FILE = "losses.jsonl"
SCHEDULE_FILE = "schedule.tsv"
ABORT_FILE = "abort.json"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(30, ge=1)
    warmup_epochs: int = Field(3, ge=0)
    base_lr: float = Field(5e-5, gt=0.0)
    batch_size: int = Field(16, ge=2)
    weight_decay: float = Field(0.05, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.95)
    grad_clip: Optional[float] = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)
    schedule: ScheduleConfig = ScheduleConfig()
    weights: LossWeights = LossWeights()
    model: ModelConfig = ModelConfig()
    retina_aware_masking: bool = True
    fixed_mask_ratio: float = Field(0.9, gt=0.0, lt=1.0)
    coverage_threshold: float = Field(0.5, gt=0.0, le=1.0)
    augment: bool = True
    crop_scale: Tuple[float, float] = (0.6, 1.0)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    extractor_seed: int = Field(0, ge=0)
    precision: Literal["float32", "float64"] = "float32"
    deterministic: bool = True
    workers: int = Field(0, ge=0)
    init_checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _check_warmup(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be below epochs "
                f"({self.epochs})"
            )
        low, high = self.crop_scale
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(
                f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}"
            )
        return self

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def mask_schedule(self) -> MaskSchedule:
        return MaskSchedule.from_config(self.schedule, self.epochs)

    def preparation(self) -> PreparationSettings:
        return PreparationSettings(
            seed=self.seed,
            patch_size=self.model.patch_size,
            coverage_threshold=self.coverage_threshold,
            retina_aware=self.retina_aware_masking,
            augment=self.augment,
            crop_scale=self.crop_scale,
            flip_probability=self.flip_probability,
        )


def load_train_config(path: Path) -> TrainConfig:
    return TrainConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def epoch_mask_ratio(config: TrainConfig, epoch: int) -> float:
    if not config.retina_aware_masking:
        return config.fixed_mask_ratio
    return masking_ratio(epoch, config.mask_schedule)


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the last step.

    Steps are zero-based: the last optimizer step is ``epochs * steps_per_epoch - 1``.
    """
    warmup = config.warmup_epochs * steps_per_epoch
    last = config.epochs * steps_per_epoch - 1
    if step < warmup:
        return config.base_lr * step / warmup
    progress = min(1.0, (step - warmup) / max(1, last - warmup))
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------
# State
# ----------------------------------------


@dataclass
class TrainState:
    model: SiameseMaskedViT
    optimizer: torch.optim.Optimizer
    extractor: PerceptualExtractor
    steps_per_epoch: int
    epoch: int = 0
    global_step: int = 0


def _optimizer_groups(model: nn.Module, weight_decay: float) -> List[Dict]:
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim < 2 or name.endswith(("_token", "_tokens", "slot_embed")):
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_state(config: TrainConfig, steps_per_epoch: int) -> TrainState:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    model = SiameseMaskedViT(config.model).to(config.dtype)
    if config.init_checkpoint:
        load_pretrained_encoder(model, Path(config.init_checkpoint))
    optimizer = torch.optim.AdamW(
        _optimizer_groups(model, config.weight_decay),
        lr=config.base_lr,
        betas=config.betas,
    )
    extractor = PerceptualExtractor(seed=config.extractor_seed).to(config.dtype)
    return TrainState(
        model=model,
        optimizer=optimizer,
        extractor=extractor,
        steps_per_epoch=max(1, steps_per_epoch),
    )


# ----------------------------------------
# Step
# ----------------------------------------


def compute_losses(
    model: SiameseMaskedViT, extractor: nn.Module, batch: PreparedBatch
) -> LossTerms:
    patch = model.config.patch_size
    visible = model.encode(batch.visible_images)
    masked = model.encode(batch.masked_images, visible=batch.layout)
    pred = model.decode_cross(masked.patches, visible.patches, batch.layout)

    target = patchify(batch.masked_images, patch)
    recon = recon_pixel_loss(pred, target, batch.targets)
    composed = unpatchify(
        compose_reconstruction(pred, target, batch.masked_grid), patch
    )
    perceptual = perceptual_loss(composed, batch.masked_images, extractor)

    assert masked.padding is not None
    consistency = consistency_loss(
        masked.patches, masked.padding, visible.patches, batch.counterparts
    )

    zero = pred.new_zeros(())
    rmse, ce = zero, zero
    if model.config.uses_meta_tokens:
        rmse_terms, ce_terms = [], []
        for output in (visible, masked):
            assert output.meta_age is not None and output.meta_gender is not None
            age, logits = model.predict_meta(output.meta_age, output.meta_gender)
            view_rmse, view_ce = meta_loss(age, logits, batch.age, batch.gender)
            rmse_terms.append(view_rmse)
            ce_terms.append(view_ce)
        rmse = torch.stack(rmse_terms).mean()
        ce = torch.stack(ce_terms).mean()

    return LossTerms(
        recon_pixel=recon,
        recon_perceptual=perceptual,
        consistency=consistency,
        meta_age_rmse=rmse,
        meta_gender_ce=ce,
        masked_retinal_patches=int(batch.targets.sum()),
        consistency_pairs=int((~masked.padding).sum()),
    )


def prepare_batch(
    pairs: Sequence[PairSample], epoch: int, config: TrainConfig
) -> PreparedBatch:
    prepared = prepare_pairs(
        pairs,
        epoch,
        epoch_mask_ratio(config, epoch),
        config.preparation(),
        workers=config.workers,
    )
    return collate(prepared).to(config.dtype)


def gradient_norms(model: SiameseMaskedViT) -> Dict[str, float]:
    norms = {}
    for name, params in model.parameter_groups().items():
        squared = sum(
            float(p.grad.detach().double().pow(2).sum())
            for p in params
            if p.grad is not None
        )
        norms[name] = math.sqrt(squared)
    return norms


def train_step(
    pairs: Sequence[PairSample], epoch: int, state: TrainState, config: TrainConfig
) -> Tuple[TrainState, LossReport]:
    """One optimizer step on the weighted total loss of a batch of pairs."""
    batch = prepare_batch(pairs, epoch, config)
    lr = lr_at(state.global_step, config, state.steps_per_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    terms = compute_losses(state.model, state.extractor, batch)
    total = total_loss(terms, config.weights)
    total.backward()

    norms = gradient_norms(state.model)
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.global_step += 1

    report = LossReport.from_terms(terms, total, config.weights)
    report.extra = {
        "epoch": epoch,
        "global_step": state.global_step,
        "lr": lr,
        "mask_ratio": epoch_mask_ratio(config, epoch),
        "grad_norms": norms,
    }
    return state, report


# ----------------------------------------
# Run
# ----------------------------------------


@dataclass
class PretrainResult:
    final_checkpoint: Optional[Path]
    last_checkpoint: Path
    losses_path: Path
    schedule_path: Path
    epochs_completed: int


def epoch_batches(
    templates: Sequence[PairTemplate], config: TrainConfig, epoch: int
) -> List[List[int]]:
    """Seeded permutation of pair indices, chunked into batches."""
    order = item_rng(config.seed, epoch, 0, ORDER_STREAM).permutation(len(templates))
    return [
        [int(i) for i in order[start : start + config.batch_size]]
        for start in range(0, len(order), config.batch_size)
    ]


def write_schedule(path: Path, schedule: MaskSchedule) -> Path:
    path.write_text(schedule_tsv(schedule), encoding="utf-8")
    return path


def truncate_losses(path: Path, epoch: int) -> int:
    """Keep only the loss records of epochs before ``epoch``; returns how many."""
    if not path.exists():
        return 0
    kept: List[str] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            logger.warning(f"Dropping unreadable line in {path}")
            continue
        if record["epoch"] < epoch:
            kept.append(line + "\n")
    path.write_text("".join(kept), encoding="utf-8")
    return len(kept)


def _checkpoint(state: TrainState, config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        config=config.model_dump(mode="json"),
        model_state=state.model.state_dict(),
        epoch=state.epoch,
        global_step=state.global_step,
        optimizer_state=state.optimizer.state_dict(),
        rng_state=torch.get_rng_state(),
    )


def restore_state(
    state: TrainState, checkpoint: Checkpoint, config: TrainConfig
) -> None:
    requested = config.model_dump(mode="json")
    if checkpoint.config_hash != config_hash(requested):
        raise ConfigMismatchError(config_diff(checkpoint.config, requested))
    state.model.load_state_dict(checkpoint.model_state)
    if checkpoint.optimizer_state is not None:
        state.optimizer.load_state_dict(checkpoint.optimizer_state)
    if checkpoint.rng_state is not None:
        torch.set_rng_state(checkpoint.rng_state)
    state.epoch = checkpoint.epoch
    state.global_step = checkpoint.global_step


def run_pretraining(
    manifest: Path,
    config: TrainConfig,
    out_dir: Path,
    resume_from: Optional[Path] = None,
    stop_after_epoch: Optional[int] = None,
    records: Optional[List[PatientRecord]] = None,
) -> PretrainResult:
    """Train from a manifest, writing checkpoints, losses.jsonl and schedule.tsv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if records is None:
        records = load_manifest(Path(manifest))
    templates = build_pair_templates(records)
    require_pairs(templates)
    logger.info(f"Pretraining on {len(templates)} pairs from {len(records)} patients")

    steps_per_epoch = math.ceil(len(templates) / config.batch_size)
    state = build_state(config, steps_per_epoch)
    if resume_from is not None:
        restore_state(state, load_checkpoint(Path(resume_from)), config)
        logger.info(f"Resumed from {resume_from} at epoch {state.epoch}")

    schedule_path = write_schedule(out_dir / SCHEDULE_FILE, config.mask_schedule)
    losses_path = out_dir / LOSSES_FILE
    last_epoch = config.epochs
    if stop_after_epoch is not None:
        last_epoch = min(config.epochs, stop_after_epoch)
    mode = "w"
    if resume_from is not None:
        kept = truncate_losses(losses_path, state.epoch)
        logger.info(f"Kept {kept} loss records before epoch {state.epoch}")
        mode = "a"

    with losses_path.open(mode, encoding="utf-8") as log:
        for epoch in range(state.epoch, last_epoch):
            ratio = epoch_mask_ratio(config, epoch)
            totals: List[float] = []
            batches = epoch_batches(templates, config, epoch)
            for step, indices in enumerate(
                tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=None)
            ):
                pairs = [
                    assign_roles(templates[i], config.seed, epoch) for i in indices
                ]
                try:
                    state, report = train_step(pairs, epoch, state, config)
                except TrainingAbortedError as e:
                    e.diagnostics.update(
                        {"epoch": epoch, "step": step, "pairs": indices}
                    )
                    (out_dir / ABORT_FILE).write_text(
                        json.dumps(e.to_dict(), indent=2), encoding="utf-8"
                    )
                    logger.error(f"Training aborted at epoch {epoch} step {step}: {e}")
                    raise
                record = {"step": step, **report.to_dict()}
                log.write(json.dumps(record, sort_keys=True) + "\n")
                totals.append(report.total)
            log.flush()
            state.epoch = epoch + 1
            logger.info(
                f"Epoch {epoch}: mask_ratio={ratio:.4f} "
                f"mean_total={sum(totals) / max(1, len(totals)):.5f}"
            )
            save_checkpoint(
                out_dir / f"checkpoint_epoch{state.epoch:03d}.pt",
                _checkpoint(state, config),
            )

    last = out_dir / f"checkpoint_epoch{state.epoch:03d}.pt"
    if not last.exists():
        save_checkpoint(last, _checkpoint(state, config))
    final: Optional[Path] = None
    if state.epoch >= config.epochs:
        final = save_checkpoint(out_dir / FINAL_CHECKPOINT, _checkpoint(state, config))
    else:
        logger.info(
            f"Stopped after epoch {state.epoch} of {config.epochs}; "
            f"{FINAL_CHECKPOINT} is written only by a complete run"
        )
    return PretrainResult(
        final_checkpoint=final,
        last_checkpoint=last,
        losses_path=losses_path,
        schedule_path=schedule_path,
        epochs_completed=state.epoch,
    )
