"""Tests for the training step, the pretraining run and checkpoint resume."""

import json

import pytest
import torch

from retinapair.data.ingest import assign_roles, build_pair_templates
from retinapair.data.masking import schedule_tsv
from retinapair.errors import (
    CheckpointError,
    ConfigMismatchError,
    TrainingAbortedError,
    ValidationError,
)
from retinapair.models.checkpoint import load_checkpoint, model_from_checkpoint
from retinapair.models.records import Eye
from retinapair.training.engine import (
    ABORT_FILE,
    FINAL_CHECKPOINT,
    LOSSES_FILE,
    SCHEDULE_FILE,
    TrainConfig,
    build_state,
    epoch_batches,
    epoch_mask_ratio,
    load_train_config,
    lr_at,
    run_pretraining,
    train_step,
    truncate_losses,
)

LOSS_KEYS = {
    "step",
    "epoch",
    "global_step",
    "lr",
    "mask_ratio",
    "grad_norms",
    "recon_pixel",
    "recon_perceptual",
    "consistency",
    "meta_age_rmse",
    "meta_gender_ce",
    "total",
    "weights",
    "masked_retinal_patches",
    "consistency_pairs",
}


def first_pairs(records, count=4, seed=0):
    templates = build_pair_templates(records)
    return [assign_roles(t, seed) for t in templates[:count]]


def read_losses(path):
    return path.read_text(encoding="utf-8").splitlines()


class TestTrainConfig:
    """Validation and derived values."""

    def test_defaults(self):
        config = TrainConfig()
        assert (config.epochs, config.warmup_epochs, config.base_lr) == (30, 3, 5e-5)
        assert config.mask_schedule.T == 30

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 3, "warmup_epochs": 3},
            {"batch_size": 1},
            {"crop_scale": (0.8, 0.5)},
            {"fixed_mask_ratio": 1.0},
            {"unknown": 1},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_loads_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(
            json.dumps({"epochs": 5, "warmup_epochs": 1, "model": {"encoder": "tiny"}}),
            encoding="utf-8",
        )
        config = load_train_config(path)
        assert config.epochs == 5
        assert config.model.encoder.value == "tiny"

    def test_fixed_ratio_without_retina_masking(self):
        config = TrainConfig(retina_aware_masking=False, fixed_mask_ratio=0.75)
        assert epoch_mask_ratio(config, 0) == 0.75
        assert epoch_mask_ratio(TrainConfig(), 0) == pytest.approx(0.985)


class TestLearningRate:
    """Linear warmup then cosine decay."""

    @pytest.fixture
    def config(self):
        return TrainConfig(epochs=30, warmup_epochs=3, base_lr=5e-5)

    def test_ramp_start(self, config):
        assert lr_at(0, config, steps_per_epoch=10) == 0.0

    def test_peak(self, config):
        assert lr_at(30, config, steps_per_epoch=10) == pytest.approx(5e-5, abs=1e-15)

    def test_mid_warmup(self, config):
        assert lr_at(15, config, steps_per_epoch=10) == pytest.approx(2.5e-5)

    def test_final_step(self, config):
        assert abs(lr_at(299, config, steps_per_epoch=10)) <= 1e-12

    def test_last_but_one_step_nonzero(self, config):
        assert lr_at(298, config, steps_per_epoch=10) > 0.0

    def test_monotone_after_warmup(self, config):
        rates = [lr_at(s, config, steps_per_epoch=10) for s in range(30, 300)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))


class TestEpochBatches:
    """Seeded batch order."""

    def test_covers_every_pair_once(self, cohort_records, tiny_train_config):
        templates = build_pair_templates(cohort_records)
        batches = epoch_batches(templates, tiny_train_config, epoch=1)
        flat = sorted(i for batch in batches for i in batch)
        assert flat == list(range(len(templates)))
        assert all(len(batch) == 4 for batch in batches[:-1])

    def test_epoch_reorders(self, cohort_records, tiny_train_config):
        templates = build_pair_templates(cohort_records)
        assert epoch_batches(templates, tiny_train_config, 0) != epoch_batches(
            templates, tiny_train_config, 1
        )


class TestTrainStep:
    """Single optimizer steps."""

    def test_reports_every_group(self, cohort_records, tiny_train_config):
        state = build_state(tiny_train_config, steps_per_epoch=1)
        _, report = train_step(first_pairs(cohort_records), 0, state, tiny_train_config)
        assert report.extra["mask_ratio"] == pytest.approx(0.985)
        norms = report.extra["grad_norms"]
        assert set(norms) >= {"patch_embed", "cls_token", "meta_tokens", "meta_heads"}
        assert all(value > 0 for value in norms.values())
        assert report.masked_retinal_patches > 0
        assert state.global_step == 1

    def test_meta_path_dead_without_weight(self, cohort_records, tiny_train_config):
        weights = tiny_train_config.weights.model_copy(update={"lambda_meta": 0.0})
        config = tiny_train_config.model_copy(update={"weights": weights})
        state = build_state(config, steps_per_epoch=1)
        before = state.model.meta_tokens.detach().clone()
        _, report = train_step(first_pairs(cohort_records), 0, state, config)
        assert report.extra["grad_norms"]["meta_tokens"] == 0.0
        assert report.extra["grad_norms"]["meta_heads"] == 0.0
        assert torch.equal(state.model.meta_tokens, before)

    def test_no_meta_tokens(self, cohort_records, tiny_train_config):
        model = tiny_train_config.model.model_copy(update={"meta_token_count": 0})
        config = tiny_train_config.model_copy(update={"model": model})
        state = build_state(config, steps_per_epoch=1)
        _, report = train_step(first_pairs(cohort_records), 0, state, config)
        assert report.meta_age_rmse == 0.0 and report.meta_gender_ce == 0.0
        assert "meta_tokens" not in report.extra["grad_norms"]

    def test_identical_runs(self, cohort_records, tiny_train_config):
        reports = []
        for _ in range(2):
            state = build_state(tiny_train_config, steps_per_epoch=2)
            stream = []
            for step in range(2):
                pairs = first_pairs(cohort_records, seed=step)
                state, report = train_step(pairs, 0, state, tiny_train_config)
                stream.append(json.dumps(report.to_dict(), sort_keys=True))
            reports.append(stream)
        assert reports[0] == reports[1]

    def test_loss_falls_on_fixed_batch(self, cohort_records, tiny_train_config):
        config = tiny_train_config.model_copy(update={"epochs": 20, "warmup_epochs": 0})
        state = build_state(config, steps_per_epoch=1)
        pairs = first_pairs(cohort_records)
        totals = [train_step(pairs, 0, state, config)[1].total for _ in range(20)]
        assert totals[-1] < totals[0]

    @pytest.mark.slow
    def test_overfit_one_batch(self, cohort_records, tiny_train_config):
        config = tiny_train_config.model_copy(
            update={"epochs": 200, "warmup_epochs": 0}
        )
        state = build_state(config, steps_per_epoch=1)
        pairs = first_pairs(cohort_records)
        totals = [train_step(pairs, 0, state, config)[1].total for _ in range(200)]
        assert all(torch.isfinite(torch.tensor(totals)))
        assert totals[-1] <= 0.5 * totals[0]


class TestTruncateLosses:
    """Loss log rewind before a resume."""

    def test_keeps_earlier_epochs(self, tmp_path):
        path = tmp_path / LOSSES_FILE
        lines = [
            json.dumps({"epoch": e, "step": s}) for e in range(3) for s in range(2)
        ]
        torn = '{"epoch": 2, "st'
        path.write_text("\n".join(lines) + "\n" + torn, encoding="utf-8")
        assert truncate_losses(path, 2) == 4
        assert read_losses(path) == lines[:4]

    def test_missing_file(self, tmp_path):
        assert truncate_losses(tmp_path / LOSSES_FILE, 1) == 0


class TestRunPretraining:
    """End-to-end runs on a two-patient cohort."""

    @pytest.fixture
    def records(self, cohort_records):
        return cohort_records[:2]

    def test_outputs(self, tmp_path, records, tiny_train_config):
        result = run_pretraining(None, tiny_train_config, tmp_path, records=records)
        assert result.epochs_completed == 4
        assert (tmp_path / FINAL_CHECKPOINT).exists()
        assert (tmp_path / "checkpoint_epoch004.pt").exists()
        assert (tmp_path / SCHEDULE_FILE).read_text(encoding="utf-8") == schedule_tsv(
            tiny_train_config.mask_schedule
        )
        lines = read_losses(tmp_path / LOSSES_FILE)
        assert len(lines) == 4 * 3
        for line in lines:
            record = json.loads(line)
            assert set(record) == LOSS_KEYS
            assert record["mask_ratio"] == epoch_mask_ratio(
                tiny_train_config, record["epoch"]
            )
        model = model_from_checkpoint(load_checkpoint(result.final_checkpoint))
        assert not model.training

    def test_deterministic(self, tmp_path, records, tiny_train_config):
        run_pretraining(None, tiny_train_config, tmp_path / "a", records=records)
        run_pretraining(None, tiny_train_config, tmp_path / "b", records=records)
        assert read_losses(tmp_path / "a" / LOSSES_FILE) == read_losses(
            tmp_path / "b" / LOSSES_FILE
        )

    def test_resume_matches_uninterrupted(self, tmp_path, records, tiny_train_config):
        run_pretraining(None, tiny_train_config, tmp_path / "full", records=records)
        partial = tmp_path / "partial"
        first = run_pretraining(
            None, tiny_train_config, partial, stop_after_epoch=2, records=records
        )
        assert first.epochs_completed == 2
        assert first.final_checkpoint is None
        assert first.last_checkpoint == partial / "checkpoint_epoch002.pt"
        assert not (partial / FINAL_CHECKPOINT).exists()
        run_pretraining(
            None,
            tiny_train_config,
            partial,
            resume_from=partial / "checkpoint_epoch002.pt",
            records=records,
        )
        assert read_losses(partial / LOSSES_FILE) == read_losses(
            tmp_path / "full" / LOSSES_FILE
        )
        full_state = load_checkpoint(tmp_path / "full" / FINAL_CHECKPOINT).model_state
        resumed_state = load_checkpoint(partial / FINAL_CHECKPOINT).model_state
        assert all(torch.equal(full_state[k], resumed_state[k]) for k in full_state)

    def test_resume_after_mid_epoch_abort(
        self, tmp_path, records, tiny_train_config, mocker
    ):
        run_pretraining(None, tiny_train_config, tmp_path / "full", records=records)
        real_step = train_step
        epoch_two_calls = []

        def fail_second_step_of_epoch_two(pairs, epoch, state, config):
            if epoch == 2:
                epoch_two_calls.append(len(pairs))
                if len(epoch_two_calls) == 2:
                    raise TrainingAbortedError("total", {"total": None})
            return real_step(pairs, epoch, state, config)

        mocker.patch(
            "retinapair.training.engine.train_step",
            side_effect=fail_second_step_of_epoch_two,
        )
        interrupted = tmp_path / "interrupted"
        with pytest.raises(TrainingAbortedError):
            run_pretraining(None, tiny_train_config, interrupted, records=records)
        assert len(read_losses(interrupted / LOSSES_FILE)) == 2 * 3 + 1

        mocker.stopall()
        run_pretraining(
            None,
            tiny_train_config,
            interrupted,
            resume_from=interrupted / "checkpoint_epoch002.pt",
            records=records,
        )
        assert read_losses(interrupted / LOSSES_FILE) == read_losses(
            tmp_path / "full" / LOSSES_FILE
        )

    def test_resume_refuses_changed_config(self, tmp_path, records, tiny_train_config):
        run_pretraining(
            None, tiny_train_config, tmp_path, stop_after_epoch=1, records=records
        )
        changed = tiny_train_config.model_copy(update={"base_lr": 2e-3})
        with pytest.raises(ConfigMismatchError) as excinfo:
            run_pretraining(
                None,
                changed,
                tmp_path,
                resume_from=tmp_path / "checkpoint_epoch001.pt",
                records=records,
            )
        assert any("base_lr" in line for line in excinfo.value.diff)

    def test_resume_ignores_worker_count(self, tmp_path, records, tiny_train_config):
        run_pretraining(
            None, tiny_train_config, tmp_path, stop_after_epoch=3, records=records
        )
        threaded = tiny_train_config.model_copy(update={"workers": 2})
        result = run_pretraining(
            None,
            threaded,
            tmp_path,
            resume_from=tmp_path / "checkpoint_epoch003.pt",
            records=records,
        )
        assert result.epochs_completed == 4

    def test_corrupt_checkpoint(self, tmp_path, records, tiny_train_config):
        broken = tmp_path / "broken.pt"
        broken.write_bytes(b"\x00not a checkpoint")
        with pytest.raises(CheckpointError):
            run_pretraining(
                None, tiny_train_config, tmp_path, resume_from=broken, records=records
            )

    def test_single_image_patients(self, tmp_path, make_record, tiny_train_config):
        records = [
            make_record("P1", views=((Eye.LEFT, "A"),)),
            make_record("P2", views=((Eye.RIGHT, "B"),)),
        ]
        with pytest.raises(ValidationError):
            run_pretraining(None, tiny_train_config, tmp_path, records=records)

    def test_abort_dumps_diagnostics(
        self, tmp_path, records, tiny_train_config, mocker
    ):
        mocker.patch(
            "retinapair.training.engine.total_loss",
            side_effect=TrainingAbortedError("consistency", {"consistency": None}),
        )
        with pytest.raises(TrainingAbortedError):
            run_pretraining(None, tiny_train_config, tmp_path, records=records)
        dump = json.loads((tmp_path / ABORT_FILE).read_text(encoding="utf-8"))
        assert dump["term"] == "consistency"
        assert dump["diagnostics"]["epoch"] == 0
        assert not (tmp_path / FINAL_CHECKPOINT).exists()

    def test_from_manifest(self, tmp_path, synthetic_dataset, tiny_train_config):
        config = tiny_train_config.model_copy(update={"epochs": 2, "warmup_epochs": 0})
        result = run_pretraining(synthetic_dataset.manifest, config, tmp_path)
        assert result.epochs_completed == 2
        assert len(read_losses(result.losses_path)) == 2 * 15
