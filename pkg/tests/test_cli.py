"""Tests for the click command-line surface."""

import json
from pathlib import Path

import click
import pytest
from click.testing import CliRunner

from retinapair import __version__, create_cli
from retinapair.data.masking import ScheduleConfig
from retinapair.evaluation.probe import ProbeConfig
from retinapair.models.network import DecoderPreset, EncoderPreset
from retinapair.runlog import RUN_MANIFEST, read_manifest
from retinapair.training.engine import TrainConfig
from retinapair.training.objectives import LossWeights

TINY_TRAIN = {
    "epochs": 2,
    "warmup_epochs": 1,
    "batch_size": 4,
    "base_lr": 1e-3,
    "model": {"encoder": "tiny", "decoder": "tiny"},
}


@pytest.fixture
def cli(monkeypatch):
    monkeypatch.delenv("RETINAPAIR_OUTPUT_ROOT", raising=False)
    monkeypatch.delenv("RETINAPAIR_WORKERS", raising=False)
    return create_cli()


@pytest.fixture
def runner():
    return CliRunner()


def error_body(result):
    return json.loads(result.stderr.strip().splitlines()[-1])


class TestSchedule:
    """schedule subcommand."""

    def test_reference_table(self, cli, runner):
        result = runner.invoke(
            cli, ["schedule", "--r0", "0.985", "--rT", "0.85", "--T", "300"]
        )
        assert result.exit_code == 0
        lines = result.stdout.splitlines()
        assert lines[0] == "epoch\tmask_ratio"
        assert len(lines) == 302
        assert lines[1].startswith("0\t")
        assert float(lines[1].split("\t")[1]) == pytest.approx(0.985, abs=1e-12)
        assert lines[-1].startswith("300\t")
        assert float(lines[-1].split("\t")[1]) == pytest.approx(0.85, abs=1e-12)
        assert float(lines[151].split("\t")[1]) == pytest.approx(0.9175, abs=1e-12)

    def test_writes_file(self, cli, runner, tmp_path):
        out = tmp_path / "sched" / "schedule.tsv"
        result = runner.invoke(cli, ["schedule", "--T", "4", "--out", str(out)])
        assert result.exit_code == 0
        assert result.stdout == ""
        assert len(out.read_text(encoding="utf-8").splitlines()) == 6

    def test_help_shows_defaults(self, cli, runner):
        result = runner.invoke(cli, ["schedule", "--help"])
        assert result.exit_code == 0
        text = " ".join(result.stdout.split())
        for default in ("0.985", "0.85", "300"):
            assert f"default: {default}" in text

    @pytest.mark.parametrize("args", [["--r0", "1.0"], ["--T", "0"], ["--rT", "abc"]])
    def test_usage_errors(self, cli, runner, args):
        assert runner.invoke(cli, ["schedule", *args]).exit_code == 2


class TestPairsStats:
    """pairs-stats subcommand."""

    def test_three_images_three_pairs(self, cli, runner, write_manifest):
        manifest = write_manifest(
            [
                ("P1", "L", "A", "54.0", "F"),
                ("P1", "R", "A", "54.0", "F"),
                ("P1", "L", "B", "54.0", "F"),
                ("P2", "L", "A", "61.0", "M"),
            ]
        )
        result = runner.invoke(
            cli, ["pairs-stats", "--manifest", str(manifest), "--per-patient"]
        )
        assert result.exit_code == 0
        body = json.loads(result.stdout)
        assert body["patients"] == 2
        assert body["images"] == 4
        assert body["pairs"] == 3
        assert body["cross_laterality"] == 2
        assert body["same_scanner"] == 1
        assert body["single_image_patients"] == 1
        assert body["per_patient"] == {"P1": 3, "P2": 0}

    def test_conflicting_labels_exit_two(self, cli, runner, write_manifest):
        manifest = write_manifest(
            [("P1", "L", "A", "54.0", "F"), ("P1", "R", "A", "55.0", "F")]
        )
        result = runner.invoke(cli, ["pairs-stats", "--manifest", str(manifest)])
        assert result.exit_code == 2
        body = error_body(result)
        assert body["error"] == "validation"
        assert body["row"] == 3


class TestSynthGen:
    """synth-gen subcommand."""

    def test_writes_dataset_and_run_manifest(self, cli, runner, tmp_path):
        config = tmp_path / "synth.json"
        body = {"eyes": ["L"], "scanners": ["A"]}
        config.write_text(json.dumps(body), encoding="utf-8")
        out = tmp_path / "data"
        result = runner.invoke(
            cli,
            [
                "synth-gen",
                "--n",
                "4",
                "--seed",
                "3",
                "--config",
                str(config),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0
        summary = json.loads(result.stdout)
        assert summary["patients"] == 4
        assert summary["images"] == 4
        assert sum(summary["splits"].values()) == 4
        run = read_manifest(out / RUN_MANIFEST)
        assert run.status == "ok"
        assert run.seed == 3
        assert run.config["n_patients"] == 4
        assert set(run.outputs) == {"manifest", "labels", "truth"}

    def test_config_values_used_without_flags(self, cli, runner, tmp_path):
        config = tmp_path / "synth.json"
        body = {"n_patients": 3, "seed": 11, "eyes": ["L"], "scanners": ["A"]}
        config.write_text(json.dumps(body), encoding="utf-8")
        out = tmp_path / "data"
        result = runner.invoke(
            cli, ["synth-gen", "--config", str(config), "--out", str(out)]
        )
        assert result.exit_code == 0, result.stderr
        assert json.loads(result.stdout)["patients"] == 3
        run = read_manifest(out / RUN_MANIFEST)
        assert run.seed == 11
        assert run.config["n_patients"] == 3

    def test_flag_overrides_only_its_field(self, cli, runner, tmp_path):
        config = tmp_path / "synth.json"
        body = {"n_patients": 3, "seed": 11, "eyes": ["L"], "scanners": ["A"]}
        config.write_text(json.dumps(body), encoding="utf-8")
        out = tmp_path / "data"
        result = runner.invoke(
            cli,
            ["synth-gen", "--config", str(config), "--n", "2", "--out", str(out)],
        )
        assert result.exit_code == 0, result.stderr
        run = read_manifest(out / RUN_MANIFEST)
        assert run.config["n_patients"] == 2
        assert run.seed == 11

    def test_non_object_config_exit_two(self, cli, runner, tmp_path):
        config = tmp_path / "synth.json"
        config.write_text("[3, 11]", encoding="utf-8")
        result = runner.invoke(
            cli, ["synth-gen", "--config", str(config), "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 2
        body = error_body(result)
        assert body["error"] == "validation"
        assert "JSON object" in body["message"]

    def test_non_empty_out_exit_two(self, cli, runner, tmp_path):
        (tmp_path / "stale.png").write_bytes(b"")
        result = runner.invoke(cli, ["synth-gen", "--n", "1", "--out", str(tmp_path)])
        assert result.exit_code == 2
        assert error_body(result)["error"] == "validation"

    def test_invalid_config_exit_two(self, cli, runner, tmp_path):
        config = tmp_path / "synth.json"
        config.write_text(json.dumps({"radius_fraction": 0.9}), encoding="utf-8")
        result = runner.invoke(
            cli, ["synth-gen", "--config", str(config), "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 2
        assert "SynthSpec" in error_body(result)["message"]


class TestPretrainAndProbe:
    """pretrain and probe subcommands end to end on a tiny cohort."""

    @pytest.fixture
    def train_config(self, tmp_path):
        path = tmp_path / "train.json"
        path.write_text(json.dumps(TINY_TRAIN), encoding="utf-8")
        return path

    @pytest.mark.integration
    def test_pretrain_then_probe(
        self, cli, runner, tmp_path, train_config, synthetic_dataset
    ):
        run_dir = tmp_path / "run"
        result = runner.invoke(
            cli,
            [
                "pretrain",
                "--manifest",
                str(synthetic_dataset.manifest),
                "--labels",
                str(synthetic_dataset.labels),
                "--config",
                str(train_config),
                "--out",
                str(run_dir),
            ],
        )
        assert result.exit_code == 0, result.stderr
        body = json.loads(result.stdout)
        assert body["epochs_completed"] == 2
        assert (run_dir / "checkpoint_final.pt").exists()
        run = read_manifest(run_dir / RUN_MANIFEST)
        assert run.status == "ok"
        assert run.config["inputs"] == {
            "manifest": str(synthetic_dataset.manifest.resolve()),
            "config": str(train_config.resolve()),
            "labels": str(synthetic_dataset.labels.resolve()),
            "resume": None,
            "split": "train",
            "stop_after": None,
        }
        assert run.config["epochs"] == 2
        assert set(run.outputs) >= {"checkpoint_final", "checkpoint_last"}

        probe_dir = tmp_path / "probe"
        result = runner.invoke(
            cli,
            [
                "probe",
                "--checkpoint",
                body["checkpoint_final"],
                "--manifest",
                str(synthetic_dataset.manifest),
                "--labels",
                str(synthetic_dataset.labels),
                "--task",
                "age",
                "--epochs",
                "2",
                "--out",
                str(probe_dir),
            ],
        )
        assert result.exit_code == 0, result.stderr
        assert set(json.loads(result.stdout)["splits"]) == {"train", "val", "test"}
        assert (probe_dir / "metrics.json").exists()
        probe_run = read_manifest(probe_dir / RUN_MANIFEST)
        assert probe_run.config["inputs"] == {
            "checkpoint": str((run_dir / "checkpoint_final.pt").resolve()),
            "manifest": str(synthetic_dataset.manifest.resolve()),
            "labels": str(synthetic_dataset.labels.resolve()),
        }
        assert probe_run.config["task"] == "age"

    def test_unknown_config_key_exit_two(
        self, cli, runner, tmp_path, synthetic_dataset
    ):
        config = tmp_path / "bad.json"
        body = {"epochs": 2, "learning_rate": 0.1}
        config.write_text(json.dumps(body), encoding="utf-8")
        result = runner.invoke(
            cli,
            [
                "pretrain",
                "--manifest",
                str(synthetic_dataset.manifest),
                "--config",
                str(config),
                "--out",
                str(tmp_path / "run"),
            ],
        )
        assert result.exit_code == 2
        assert "TrainConfig" in error_body(result)["message"]

    def test_non_object_config_with_encoder_exit_two(
        self, cli, runner, tmp_path, synthetic_dataset
    ):
        config = tmp_path / "list.json"
        config.write_text(json.dumps(["tiny"]), encoding="utf-8")
        result = runner.invoke(
            cli,
            [
                "pretrain",
                "--manifest",
                str(synthetic_dataset.manifest),
                "--config",
                str(config),
                "--encoder",
                "tiny",
                "--out",
                str(tmp_path / "run"),
            ],
        )
        assert result.exit_code == 2
        assert "JSON object" in error_body(result)["message"]

    def test_corrupt_checkpoint_exit_four(
        self, cli, runner, tmp_path, synthetic_dataset
    ):
        checkpoint = tmp_path / "broken.pt"
        checkpoint.write_bytes(b"not a checkpoint")
        out = tmp_path / "probe"
        result = runner.invoke(
            cli,
            [
                "probe",
                "--checkpoint",
                str(checkpoint),
                "--manifest",
                str(synthetic_dataset.manifest),
                "--labels",
                str(synthetic_dataset.labels),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 4
        assert error_body(result)["error"] == "checkpoint"
        assert read_manifest(out / RUN_MANIFEST).status == "failed"


class TestConfigDocs:
    """Help text and README examples agree with the config models."""

    @pytest.mark.parametrize(
        "option, field",
        [
            ("--task", "task"),
            ("--mode", "mode"),
            ("--feature", "feature"),
            ("--epochs", "epochs"),
            ("--batch-size", "batch_size"),
            ("--seed", "seed"),
        ],
    )
    def test_probe_help_defaults(self, cli, runner, option, field):
        command = cli.get_command(click.Context(cli), "probe")
        param = next(p for p in command.params if option in p.opts)
        default = ProbeConfig.model_fields[field].default
        assert param.default == getattr(default, "value", default)
        result = runner.invoke(cli, ["probe", "--help"])
        text = " ".join(result.stdout.split())
        assert f"default: {param.default}" in text

    def test_pretrain_overrides_name_config_fields(self, cli):
        command = cli.get_command(click.Context(cli), "pretrain")
        names = {p.name for p in command.params}
        for field in ("seed", "epochs", "batch_size", "workers"):
            assert field in names
            assert field in TrainConfig.model_fields
        encoder = next(p for p in command.params if p.name == "encoder")
        assert list(encoder.type.choices) == [p.value for p in EncoderPreset]
        decoder = next(p for p in command.params if p.name == "decoder")
        assert list(decoder.type.choices) == [p.value for p in DecoderPreset]

    def test_readme_train_config_validates(self):
        readme = Path(__file__).resolve().parents[1] / "README.md"
        text = readme.read_text(encoding="utf-8")
        block = text.split("```json\n", 1)[1].split("```", 1)[0]
        config = TrainConfig.model_validate_json(block)
        assert config.weights == LossWeights()
        assert config.schedule == ScheduleConfig()


class TestGroup:
    """Top-level group behaviour."""

    def test_version(self, cli, runner):
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.stdout

    def test_lists_subcommands(self, cli, runner):
        result = runner.invoke(cli, ["--help"])
        names = ("synth-gen", "pretrain", "probe", "attn", "schedule", "pairs-stats")
        for name in names:
            assert name in result.stdout

    def test_output_root_env(self, cli, runner, tmp_path, monkeypatch):
        monkeypatch.setenv("RETINAPAIR_OUTPUT_ROOT", str(tmp_path))
        result = runner.invoke(
            cli, ["schedule", "--T", "2", "--out", "rel/schedule.tsv"]
        )
        assert result.exit_code == 0
        assert (tmp_path / "rel" / "schedule.tsv").exists()
