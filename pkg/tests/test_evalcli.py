"""Tests for the experiment driver and command-line interface.

A session-scoped smoke experiment (tiny grid14 run) backs the report-schema,
determinism, and CLI assertions without repeating the pipeline per test.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from powerfd.dataset import NoiseConfig
from powerfd.detector import PowerFdModel, load_checkpoint
from powerfd.evalcli import (
    EXIT_OK,
    EXIT_STAGE,
    EXIT_USAGE,
    ExperimentConfig,
    SLICE_NAMES,
    StageError,
    baseline_train_eval,
    load_config,
    main,
    resolve_grid,
    run_experiment,
    split_and_balance,
)
from powerfd.grid import fixture_path
from powerfd.metrics import f1_from_precision_recall

SMOKE = ExperimentConfig(
    grid="grid14",
    days=4,
    steps_per_day=12,
    window_history=2,
    val_days=1,
    epochs=2,
    control_epochs=1,
    batch_size=32,
    learning_rate=1e-3,
)


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke_run")
    report = run_experiment(SMOKE, out)
    return out, report


class TestExperimentConfig:
    def test_round_trip(self):
        assert ExperimentConfig.from_dict(SMOKE.to_dict()) == SMOKE

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown configuration keys"):
            ExperimentConfig.from_dict({"days": 4, "typo_key": 1})

    def test_noise_override(self):
        config = ExperimentConfig.from_dict({"noise": {"sigma_v": 0.001}})
        assert config.noise == NoiseConfig(sigma_v=0.001)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"days": 2},
            {"val_days": 0},
            {"epochs": 0},
            {"threshold": 0.0},
            {"threshold": 1.5},
            {"learning_rate": 0.0},
        ],
    )
    def test_invalid_values(self, overrides):
        doc = {**SMOKE.to_dict(), **overrides}
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(doc)

    def test_reseeded_deterministic(self):
        a = SMOKE.reseeded(42)
        b = SMOKE.reseeded(42)
        assert a == b
        assert a.seed_simulate != SMOKE.seed_simulate
        assert a.days == SMOKE.days

    def test_load_config_defaults(self):
        assert load_config(None) == ExperimentConfig()

    def test_load_config_rejects_non_object(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValueError):
            load_config(path)

    def test_load_config_rejects_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ValueError, match="not valid JSON"):
            load_config(path)

    def test_bundled_configs_parse(self):
        root = Path(__file__).resolve().parents[1] / "configs"
        for name in ("smoke.json", "desk.json"):
            config = load_config(root / name)
            assert config.grid == "grid14"


class TestResolveGrid:
    def test_fixture_name(self):
        assert len(resolve_grid("grid4").buses) == 4

    def test_explicit_path(self):
        assert len(resolve_grid(str(fixture_path("grid14.json"))).buses) == 14

    def test_missing(self):
        from powerfd.grid import GridError

        with pytest.raises(GridError):
            resolve_grid("no_such_grid")


class TestReportSchema:
    def test_artifacts_written(self, smoke_run):
        out, _ = smoke_run
        for name in (
            "dataset.bin",
            "checkpoint.bin",
            "training_log.jsonl",
            "report.json",
            "tables.txt",
        ):
            assert (out / name).exists(), name

    def test_report_matches_file(self, smoke_run):
        out, report = smoke_run
        on_disk = json.loads((out / "report.json").read_text())
        assert on_disk == report

    def test_slices_present(self, smoke_run):
        _, report = smoke_run
        assert set(report["slices"]) == set(SLICE_NAMES)
        assert set(report["baseline"]["slices"]) == set(SLICE_NAMES)
        for entry in report["slices"].values():
            assert set(entry["counts"]) == {"tp", "fp", "fn", "tn"}
            for key in ("precision", "recall", "f1"):
                assert 0.0 <= entry[key] <= 100.0

    def test_slices_partition_positives(self, smoke_run):
        _, report = smoke_run
        slices = report["slices"]
        total = slices["overall"]["positives"]
        assert total == report["dataset"]["windows"]["test_positives"]
        assert sum(slices[s]["positives"] for s in ("type_a", "type_b", "type_c")) == total
        assert sum(slices[s]["positives"] for s in ("vm", "va")) == total

    def test_negatives_shared_across_slices(self, smoke_run):
        _, report = smoke_run
        negatives = report["dataset"]["windows"]["test_negatives"]
        for entry in report["slices"].values():
            assert entry["counts"]["fp"] + entry["counts"]["tn"] == negatives

    def test_f1_consistent_with_counts(self, smoke_run):
        _, report = smoke_run
        for entry in report["slices"].values():
            c = entry["counts"]
            denominator = 2 * c["tp"] + c["fp"] + c["fn"]
            expected = 100.0 * 2 * c["tp"] / denominator if denominator else 0.0
            assert entry["f1"] == pytest.approx(expected, abs=5e-4)
            recomputed = f1_from_precision_recall(entry["precision"], entry["recall"])
            assert entry["f1"] == pytest.approx(recomputed, abs=2e-3)

    def test_identifiers_and_counts(self, smoke_run):
        out, report = smoke_run
        assert report["dataset"]["file"] == "dataset.bin"
        assert len(report["dataset"]["sha256"]) == 64
        assert len(report["checkpoint"]["sha256"]) == 64
        counts = report["dataset"]["windows"]
        assert counts["test_positives"] + counts["test_negatives"] == counts["test"]
        assert report["config"] == SMOKE.to_dict()
        log_lines = (out / "training_log.jsonl").read_text().splitlines()
        assert len(log_lines) == SMOKE.epochs

    def test_table_mentions_every_slice(self, smoke_run):
        out, report = smoke_run
        table = (out / "tables.txt").read_text()
        for name in SLICE_NAMES:
            assert name in table
        assert report["dataset"]["sha256"] in table

    def test_rerun_byte_identical(self, smoke_run, tmp_path):
        out, _ = smoke_run
        again = tmp_path / "again"
        run_experiment(SMOKE, again)
        for name in ("dataset.bin", "checkpoint.bin", "training_log.jsonl", "report.json", "tables.txt"):
            assert (again / name).read_bytes() == (out / name).read_bytes(), name


class TestStageTagging:
    def test_grid_failure_tagged(self, tmp_path):
        config = ExperimentConfig.from_dict({**SMOKE.to_dict(), "grid": "/tmp/missing_grid.json"})
        with pytest.raises(StageError) as excinfo:
            run_experiment(config, tmp_path)
        assert excinfo.value.stage == "grid"

    def test_attack_failure_tagged(self, tmp_path):
        config = ExperimentConfig.from_dict({**SMOKE.to_dict(), "grid": "grid4"})
        with pytest.raises(StageError) as excinfo:
            run_experiment(config, tmp_path)
        assert excinfo.value.stage == "attack-gen"


class TestSplitAndBalance:
    def test_balanced_prevalence(self, smoke_run):
        out, _ = smoke_run
        from powerfd.dataset import load_dataset

        dataset = load_dataset(out / "dataset.bin")
        batches = split_and_balance(dataset, SMOKE)
        for batch in (batches.train, batches.val):
            labels = batch.labels
            assert labels.sum() * 2 == len(labels)
        assert batches.test.labels.sum() > 0
        assert (batches.test.labels == 0).sum() > 0

    def test_balance_deterministic(self, smoke_run):
        out, _ = smoke_run
        from powerfd.dataset import load_dataset

        dataset = load_dataset(out / "dataset.bin")
        a = split_and_balance(dataset, SMOKE)
        b = split_and_balance(dataset, SMOKE)
        assert np.array_equal(a.train.bus, b.train.bus)
        assert np.array_equal(a.train.labels, b.train.labels)


class TestBaseline:
    def test_learns_separable_data(self):
        rng = np.random.default_rng(0)
        from powerfd.detector import WindowBatch

        def batch(n, seed):
            r = np.random.default_rng(seed)
            bus = r.normal(size=(n, 3, 3, 3)).astype(np.float32)
            line = r.normal(size=(n, 3, 4, 6)).astype(np.float32)
            labels = np.zeros(n)
            labels[n // 2 :] = 1.0
            bus[labels == 1] += 2.0
            return WindowBatch(bus=bus, line=line, labels=labels)

        train = batch(60, 1)
        test = batch(30, 2)
        result = baseline_train_eval(train, test)
        predicted = result.probabilities >= 0.5
        assert (predicted == (test.labels == 1)).mean() >= 0.9

    def test_deterministic(self):
        from powerfd.detector import WindowBatch

        r = np.random.default_rng(3)
        batch = WindowBatch(
            bus=r.normal(size=(20, 3, 3, 3)).astype(np.float32),
            line=r.normal(size=(20, 3, 4, 6)).astype(np.float32),
            labels=(r.random(20) > 0.5).astype(np.float64),
        )
        a = baseline_train_eval(batch, batch)
        b = baseline_train_eval(batch, batch)
        assert np.array_equal(a.probabilities, b.probabilities)


class TestCli:
    def test_grid_validate_ok(self, capsys):
        assert main(["grid", "validate", "grid14"]) == EXIT_OK
        assert "14 buses" in capsys.readouterr().out

    def test_grid_validate_missing_file(self, capsys):
        assert main(["grid", "validate", "/tmp/no_such_grid.json"]) == EXIT_STAGE

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE
        assert "invalid choice" in capsys.readouterr().err

    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_missing_config_is_usage_error(self, capsys):
        rc = main(["train", "--config", "/tmp/no_such_config.json", "--out", "/tmp/x"])
        assert rc == EXIT_USAGE

    def test_bad_threads_is_usage_error(self, capsys):
        assert main(["gradcheck", "--threads", "0"]) == EXIT_USAGE

    def test_eval_without_artifacts_is_stage_failure(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(SMOKE.to_dict()))
        rc = main(["eval", "--config", str(config_path), "--out", str(tmp_path)])
        assert rc == EXIT_STAGE
        assert "attack-gen" in capsys.readouterr().err

    def test_staged_run_matches_library(self, smoke_run, tmp_path, capsys):
        out, _ = smoke_run
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(SMOKE.to_dict()))
        staged = tmp_path / "staged"
        for command in ("attack-gen", "train", "eval"):
            rc = main([command, "--config", str(config_path), "--out", str(staged)])
            assert rc == EXIT_OK, command
        for name in ("dataset.bin", "checkpoint.bin", "report.json"):
            assert (staged / name).read_bytes() == (out / name).read_bytes(), name

    def test_train_rejects_stale_dataset(self, smoke_run, tmp_path, capsys):
        out, _ = smoke_run
        staged = tmp_path / "stale"
        staged.mkdir()
        (staged / "dataset.bin").write_bytes((out / "dataset.bin").read_bytes())
        changed = {**SMOKE.to_dict(), "seed_attack": SMOKE.seed_attack + 1}
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(changed))
        rc = main(["train", "--config", str(config_path), "--out", str(staged)])
        assert rc == EXIT_STAGE
        assert "different settings" in capsys.readouterr().err

    def test_simulate_writes_clean_dataset(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(SMOKE.to_dict()))
        rc = main(["simulate", "--config", str(config_path), "--out", str(tmp_path)])
        assert rc == EXIT_OK
        from powerfd.dataset import load_dataset

        dataset = load_dataset(tmp_path / "dataset.bin")
        assert dataset.attacked_frames() == []
        assert len(dataset.clean_frames()) == SMOKE.days * SMOKE.steps_per_day

    def test_detect_prints_probability(self, smoke_run, capsys):
        out, _ = smoke_run
        rc = main(
            [
                "detect",
                "--checkpoint", str(out / "checkpoint.bin"),
                "--window", str(out / "dataset.bin"),
                "--index", "0",
            ]
        )
        assert rc == EXIT_OK
        value = float(capsys.readouterr().out.strip())
        assert 0.0 < value < 1.0

    def test_detect_bad_index(self, smoke_run, capsys):
        out, _ = smoke_run
        rc = main(
            [
                "detect",
                "--checkpoint", str(out / "checkpoint.bin"),
                "--window", str(out / "dataset.bin"),
                "--index", "999999",
            ]
        )
        assert rc == EXIT_STAGE

    def test_detect_matches_model(self, smoke_run, capsys):
        out, _ = smoke_run
        from powerfd.dataset import load_dataset

        model = load_checkpoint(out / "checkpoint.bin")
        dataset = load_dataset(out / "dataset.bin")
        windows = dataset.windows(history=model.config.history)
        expected = model.predict_window(windows[5])
        rc = main(
            [
                "detect",
                "--checkpoint", str(out / "checkpoint.bin"),
                "--window", str(out / "dataset.bin"),
                "--index", "5",
            ]
        )
        assert rc == EXIT_OK
        printed = float(capsys.readouterr().out.strip())
        assert printed == pytest.approx(expected, abs=5e-7)

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--cases", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        for name in ("conv2d", "batch_norm", "elu", "sigmoid", "tanh", "linear", "lstm_cell", "bce"):
            assert name in out

    def test_seed_flag_reseeds(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(SMOKE.to_dict()))
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            rc = main(
                ["simulate", "--config", str(config_path), "--seed", "42", "--out", str(out)]
            )
            assert rc == EXIT_OK
        assert (a / "dataset.bin").read_bytes() == (b / "dataset.bin").read_bytes()
