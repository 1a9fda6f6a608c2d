"""Downstream evaluation of a pretrained encoder: linear probe or fine-tune."""

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from retinapair.data.ingest import load_manifest
from retinapair.data.synth import LABELS_HEADER, SPLITS
from retinapair.errors import ManifestError, ValidationError
from retinapair.evaluation.metrics import auprc, auroc, regression_errors
from retinapair.models.checkpoint import load_checkpoint, model_from_checkpoint
from retinapair.models.network import SiameseMaskedViT
from retinapair.models.records import (
    AGE_DIVISOR,
    FundusImage,
    Gender,
    PatientRecord,
    normalize_age,
)
from retinapair.seeding import PROBE_STREAM, item_rng

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"


class ProbeMode(str, Enum):
    PROBE = "probe"
    FINETUNE = "finetune"


class ProbeTask(str, Enum):
    DISEASE = "disease"
    GENDER = "gender"
    AGE = "age"

    @property
    def is_classification(self) -> bool:
        return self is not ProbeTask.AGE


class FeatureKind(str, Enum):
    CLS = "cls"
    MEAN_PATCH = "mean_patch"


class ProbeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task: ProbeTask = ProbeTask.DISEASE
    mode: ProbeMode = ProbeMode.PROBE
    feature: FeatureKind = FeatureKind.CLS
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: Optional[float] = Field(None, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    seed: int = Field(0, ge=0)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.mode is ProbeMode.PROBE else 5e-5


# ----------------------------------------
# Labels
# ----------------------------------------


@dataclass(frozen=True)
class LabelRow:
    patient_id: str
    split: str
    age_years: float
    gender: Gender
    disease: int

    def target(self, task: ProbeTask) -> float:
        if task is ProbeTask.DISEASE:
            return float(self.disease)
        if task is ProbeTask.GENDER:
            return float(self.gender.index)
        return normalize_age(self.age_years)


def load_labels(path: Path) -> Dict[str, LabelRow]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"labels file not found: {path}")
    rows: Dict[str, LabelRow] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = [name.strip() for name in reader.fieldnames or []]
        if header != LABELS_HEADER:
            raise ManifestError(
                f"header {header} does not match {LABELS_HEADER}", row=1
            )
        for line, row in enumerate(reader, start=2):
            try:
                split = row["split"].strip()
                if split not in SPLITS:
                    raise ManifestError(f"unknown split {split!r}", row=line)
                disease = int(row["disease"])
                if disease not in (0, 1):
                    raise ManifestError(
                        f"disease must be 0 or 1, got {disease}", row=line
                    )
                label = LabelRow(
                    patient_id=row["patient_id"].strip(),
                    split=split,
                    age_years=float(row["age_years"]),
                    gender=Gender.parse(row["gender"]),
                    disease=disease,
                )
            except ManifestError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"malformed label row: {e}", row=line)
            if label.patient_id in rows:
                raise ManifestError(f"duplicate patient {label.patient_id}", row=line)
            rows[label.patient_id] = label
    return rows


@dataclass
class SplitData:
    images: List[FundusImage] = field(default_factory=list)
    rows: List[LabelRow] = field(default_factory=list)

    def targets(self, task: ProbeTask) -> np.ndarray:
        return np.array([row.target(task) for row in self.rows], dtype=np.float64)

    def ages(self) -> np.ndarray:
        return np.array([row.age_years for row in self.rows], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.images)


def split_images(
    records: Sequence[PatientRecord], labels: Dict[str, LabelRow]
) -> Dict[str, SplitData]:
    """One row per image; each image inherits its patient's labels and split."""
    data = {name: SplitData() for name in SPLITS}
    missing = 0
    for record in records:
        row = labels.get(record.patient_id)
        if row is None:
            missing += 1
            continue
        for image in record.images:
            data[row.split].images.append(image)
            data[row.split].rows.append(row)
    if missing:
        logger.warning(
            f"{missing} patients in the manifest have no labels and were skipped"
        )
    return data


# ----------------------------------------
# Features
# ----------------------------------------


def images_to_tensor(images: Sequence[FundusImage]) -> torch.Tensor:
    return torch.stack(
        [
            torch.from_numpy(np.ascontiguousarray(image.pixels)).permute(2, 0, 1)
            for image in images
        ]
    )


def _check_image_size(model: SiameseMaskedViT, images: Sequence[FundusImage]) -> None:
    expected = model.config.image_size
    for image in images:
        if image.pixels.shape[0] != expected:
            raise ValidationError(
                f"image size {image.pixels.shape[0]} does not match "
                f"checkpoint size {expected}"
            )


def _pool(
    model: SiameseMaskedViT, batch: torch.Tensor, feature: FeatureKind
) -> torch.Tensor:
    output = model.encode(batch)
    if feature is FeatureKind.MEAN_PATCH:
        return output.patches.mean(dim=1)
    return output.cls


def extract_features(
    model: SiameseMaskedViT,
    images: Sequence[FundusImage],
    feature: FeatureKind = FeatureKind.CLS,
    batch_size: int = 32,
) -> np.ndarray:
    """Full-visibility encoder output per image, shape (n, dim)."""
    _check_image_size(model, images)
    dim = model.config.encoder_shape.dim
    if not images:
        return np.zeros((0, dim))
    dtype = next(model.parameters()).dtype
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images_to_tensor(images[start : start + batch_size]).to(dtype)
            chunks.append(_pool(model, batch, feature).double().numpy())
    return np.concatenate(chunks, axis=0)


def predict_meta_ages(
    model: SiameseMaskedViT, images: Sequence[FundusImage], batch_size: int = 32
) -> np.ndarray:
    """Age-head predictions in years."""
    if not model.config.uses_meta_tokens:
        raise ValidationError("model has no metadata tokens")
    _check_image_size(model, images)
    dtype = next(model.parameters()).dtype
    model.eval()
    ages = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images_to_tensor(images[start : start + batch_size]).to(dtype)
            output = model.encode(batch)
            assert output.meta_age is not None and output.meta_gender is not None
            age, _ = model.predict_meta(output.meta_age, output.meta_gender)
            ages.append(age.double().numpy())
    return AGE_DIVISOR * np.concatenate(ages)


# ----------------------------------------
# Training
# ----------------------------------------


@dataclass
class ProbeResult:
    best_epoch: int
    best_score: float
    history: List[Dict[str, float]]
    predictions: Dict[str, np.ndarray]


def _require_classes(targets: np.ndarray, split: str) -> None:
    present = set(np.unique(targets).tolist())
    if len(present) < 2:
        raise ValidationError(f"{split} split has a single class {sorted(present)}")


def selection_score(
    task: ProbeTask, predictions: np.ndarray, targets: np.ndarray
) -> float:
    """Higher is better: validation AUROC, or negative age MAE in years."""
    if task.is_classification:
        return auroc(predictions, targets)
    return -regression_errors(AGE_DIVISOR * predictions, AGE_DIVISOR * targets)["mae"]


def _loss(task: ProbeTask, output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if task.is_classification:
        return F.binary_cross_entropy_with_logits(output, target)
    return F.mse_loss(output, target)


def _activate(task: ProbeTask, output: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(output) if task.is_classification else output


def _check_splits(task: ProbeTask, targets: Dict[str, np.ndarray]) -> None:
    for split in ("train", "val"):
        if split not in targets or len(targets[split]) == 0:
            raise ValidationError(f"{split} split is empty")
        if task.is_classification:
            _require_classes(targets[split], split)


def train_probe(
    features: Dict[str, np.ndarray], targets: Dict[str, np.ndarray], config: ProbeConfig
) -> ProbeResult:
    """Logistic (or linear, for age) head on z-scored frozen features.

    Full-batch Adam; every epoch runs ceil(n_train / batch_size) iterations.
    The epoch with the best validation score wins, ties going to the earlier one.
    """
    _check_splits(config.task, targets)
    train = features["train"]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std < 1e-12] = 1.0

    def standardize(x: np.ndarray) -> torch.Tensor:
        return torch.from_numpy((x - mean) / std)

    x_train = standardize(train)
    y_train = torch.from_numpy(targets["train"])
    x_val = standardize(features["val"])

    head = nn.Linear(train.shape[1], 1).double()
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    optimizer = torch.optim.Adam(
        head.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    iterations = math.ceil(len(train) / config.batch_size)

    best_state: Optional[Dict[str, torch.Tensor]] = None
    best_epoch, best_score = 0, -math.inf
    history = []
    for epoch in range(1, config.epochs + 1):
        head.train()
        for _ in range(iterations):
            optimizer.zero_grad()
            loss = _loss(config.task, head(x_train).squeeze(-1), y_train)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            val_pred = _activate(config.task, head(x_val).squeeze(-1)).numpy()
        score = selection_score(config.task, val_pred, targets["val"])
        history.append(
            {"epoch": epoch, "train_loss": float(loss.detach()), "val_score": score}
        )
        if score > best_score:
            best_epoch, best_score = epoch, score
            best_state = copy.deepcopy(head.state_dict())

    assert best_state is not None
    head.load_state_dict(best_state)
    with torch.no_grad():
        predictions = {
            split: _activate(config.task, head(standardize(x)).squeeze(-1)).numpy()
            for split, x in features.items()
            if len(x)
        }
    logger.info(f"Probe selected epoch {best_epoch} (val score {best_score:.4f})")
    return ProbeResult(best_epoch, best_score, history, predictions)


def fine_tune(
    model: SiameseMaskedViT, data: Dict[str, SplitData], config: ProbeConfig
) -> ProbeResult:
    """Minibatch AdamW over the encoder and a fresh head.

    The model and head are restored to the epoch with the best validation score.
    """
    targets = {split: d.targets(config.task) for split, d in data.items()}
    _check_splits(config.task, targets)
    dtype = next(model.parameters()).dtype
    torch.manual_seed(config.seed)
    head = nn.Linear(model.config.encoder_shape.dim, 1).to(dtype)
    optimizer = torch.optim.AdamW(
        list(model.parameters()) + list(head.parameters()),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    train = data["train"]

    def predict(split: SplitData) -> np.ndarray:
        model.eval()
        outputs = []
        with torch.no_grad():
            for start in range(0, len(split), config.batch_size):
                chunk = split.images[start : start + config.batch_size]
                pooled = _pool(model, images_to_tensor(chunk).to(dtype), config.feature)
                scores = _activate(config.task, head(pooled).squeeze(-1))
                outputs.append(scores.double().numpy())
        return np.concatenate(outputs)

    best_state = None
    best_epoch, best_score = 0, -math.inf
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        head.train()
        order = item_rng(config.seed, epoch, 0, PROBE_STREAM).permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            index = order[start : start + config.batch_size]
            batch = images_to_tensor([train.images[i] for i in index]).to(dtype)
            target = torch.from_numpy(targets["train"][index]).to(dtype)
            optimizer.zero_grad()
            logits = head(_pool(model, batch, config.feature)).squeeze(-1)
            loss = _loss(config.task, logits, target)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        score = selection_score(config.task, predict(data["val"]), targets["val"])
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_score": score}
        )
        if score > best_score:
            best_epoch, best_score = epoch, score
            best_state = (
                copy.deepcopy(model.state_dict()),
                copy.deepcopy(head.state_dict()),
            )

    assert best_state is not None
    model.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    predictions = {split: predict(d) for split, d in data.items() if len(d)}
    logger.info(f"Fine-tune selected epoch {best_epoch} (val score {best_score:.4f})")
    return ProbeResult(best_epoch, best_score, history, predictions)


# ----------------------------------------
# Reporting
# ----------------------------------------


def split_metrics(
    task: ProbeTask, predictions: Dict[str, np.ndarray], targets: Dict[str, np.ndarray]
) -> Dict[str, Dict[str, Optional[float]]]:
    report: Dict[str, Dict[str, Optional[float]]] = {}
    for split, predicted in predictions.items():
        target = targets[split]
        if task.is_classification:
            if len(np.unique(target)) < 2:
                report[split] = {"auroc": None, "auprc": None, "n": float(len(target))}
                continue
            report[split] = {
                "auroc": auroc(predicted, target),
                "auprc": auprc(predicted, target),
                "n": float(len(target)),
            }
        else:
            errors = regression_errors(
                AGE_DIVISOR * predicted, AGE_DIVISOR * target
            )
            report[split] = {**errors, "n": float(len(target))}
    return report


def meta_age_report(
    model: SiameseMaskedViT, data: Dict[str, SplitData]
) -> Dict[str, Any]:
    """Age-head MAE against the predict-the-train-mean baseline, on test (or val)."""
    split = "test" if len(data["test"]) else "val"
    ages = data[split].ages()
    if len(ages) == 0:
        raise ValidationError("no held-out images for the age-head report")
    predicted = predict_meta_ages(model, data[split].images)
    baseline = float(data["train"].ages().mean())
    mae = float(np.mean(np.abs(predicted - ages)))
    baseline_mae = float(np.mean(np.abs(baseline - ages)))
    return {
        "split": split,
        "mae": mae,
        "baseline_mae": baseline_mae,
        "relative_improvement": 1.0 - mae / baseline_mae if baseline_mae > 0 else 0.0,
    }


def run_probe(
    checkpoint: Path,
    manifest: Path,
    labels: Path,
    config: ProbeConfig,
    out_dir: Path,
) -> Dict[str, Any]:
    """Evaluate a pretrained checkpoint on a labelled task and write metrics.json."""
    model = model_from_checkpoint(load_checkpoint(checkpoint))
    records = load_manifest(manifest, compute_masks=False)
    data = split_images(records, load_labels(labels))
    targets = {split: d.targets(config.task) for split, d in data.items()}

    metrics: Dict[str, Any] = {
        "task": config.task.value,
        "mode": config.mode.value,
        "feature": config.feature.value,
        "config": config.model_dump(mode="json"),
    }
    if model.config.uses_meta_tokens:
        metrics["meta_head_age"] = meta_age_report(model, data)

    if config.mode is ProbeMode.PROBE:
        features = {
            split: extract_features(model, d.images, config.feature)
            for split, d in data.items()
        }
        result = train_probe(features, targets, config)
    else:
        result = fine_tune(model, data, config)

    metrics.update(
        {
            "best_epoch": result.best_epoch,
            "best_val_score": result.best_score,
            "splits": split_metrics(config.task, result.predictions, targets),
            "history": result.history,
        }
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / METRICS_FILE).write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    logger.info(f"Wrote {out_dir / METRICS_FILE}")
    return metrics
