import json

import numpy as np
import pytest

from powerskel.cli import main
from powerskel.datamodel import load_dataset, read_manifest
from powerskel.pck import parse_report


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synthetic"
    code = main([
        "gen", "--seed", "7", "--train", "24", "--test", "8",
        "--sensors", "3", "--subcarriers", "8", "--noise-sigma", "0.1",
        "--out", str(out),
    ])
    assert code == 0
    return out


TRAIN_FLAGS = [
    "--epochs", "2", "--batch-size", "8", "--lr", "0.2", "--blocks", "1",
    "--heads", "2", "--d-ff", "8", "--head-hidden", "8", "--kernel", "3",
    "--sinkhorn-niter", "20", "--aug-shift", "2",
]


class TestGen:
    def test_writes_dataset_and_manifest(self, dataset_dir):
        train = load_dataset(dataset_dir, "train")
        test = load_dataset(dataset_dir, "test")
        assert len(train) == 24 and len(test) == 8
        manifest = read_manifest(dataset_dir)
        assert manifest["m"] == 3 and manifest["f"] == 8
        assert manifest["seed"] == 7
        run = json.loads((dataset_dir / "run_manifest.json").read_text())
        assert run["command"] == "gen"
        assert run["seed"] == 7
        assert run["artifact_sha256"]

    def test_same_seed_same_artifacts(self, dataset_dir, tmp_path):
        again = tmp_path / "again"
        main([
            "gen", "--seed", "7", "--train", "24", "--test", "8",
            "--sensors", "3", "--subcarriers", "8", "--noise-sigma", "0.1",
            "--out", str(again),
        ])
        a = (dataset_dir / "train.jsonl").read_text()
        b = (again / "train.jsonl").read_text()
        assert a == b


class TestExitCodes:
    def test_unknown_subcommand_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["eval"]) == 1

    def test_runtime_error(self, tmp_path):
        # evaluating a checkpoint that does not exist
        code = main([
            "eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "nope.ckpt"),
        ])
        assert code == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0


class TestSafCommand:
    def test_filtered_dataset_written(self, dataset_dir, tmp_path):
        out = tmp_path / "filtered"
        code = main(["saf", "--data", str(dataset_dir), "--out", str(out)])
        assert code == 0
        manifest = read_manifest(out)
        assert manifest["filtered"] is True
        filtered = load_dataset(out, "train")
        original = load_dataset(dataset_dir, "train")
        assert len(filtered) == len(original)
        # labels carry over untouched
        assert np.array_equal(filtered.samples[0].label, original.samples[0].label)


@pytest.fixture(scope="module")
def run_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main([
        "train", "--data", str(dataset_dir), "--out", str(out),
        "--seed", "3", "--no-saf", *TRAIN_FLAGS,
    ])
    assert code == 0
    return out


class TestTrainEvalRender:
    def test_checkpoint_and_metrics(self, run_dir):
        assert (run_dir / "checkpoint_final.ckpt").exists()
        lines = (run_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert set(first) >= {"epoch", "lr", "data_loss", "ot_loss", "total_loss"}

    def test_eval_emits_parseable_table(self, dataset_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main([
            "eval", "--data", str(dataset_dir), "--checkpoint",
            str(run_dir / "checkpoint_final.ckpt"), "--out", str(out),
        ])
        assert code == 0
        text = (out / "pck_report.txt").read_text()
        parsed = parse_report(text)
        assert "average" in parsed and len(parsed) == 18
        sidecar = json.loads((out / "pck_report.json").read_text())
        assert len(sidecar["values_pct"]) == 17

    def test_render_writes_svg(self, dataset_dir, run_dir, tmp_path):
        out = tmp_path / "overlays"
        code = main([
            "render", "--data", str(dataset_dir), "--checkpoint",
            str(run_dir / "checkpoint_final.ckpt"), "--out", str(out), "--limit", "2",
        ])
        assert code == 0
        files = sorted(out.glob("*.svg"))
        assert len(files) == 2
        assert files[0].read_text().startswith("<?xml")


class TestConfigPrecedence:
    def test_config_file_overrides_defaults_cli_overrides_config(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"train": 10, "test": 4, "seed": 99}))
        out = tmp_path / "out"
        code = main([
            "--config", str(config), "gen", "--seed", "1",
            "--sensors", "2", "--subcarriers", "4", "--out", str(out),
        ])
        assert code == 0
        manifest = read_manifest(out)
        assert manifest["splits"]["train"] == 10  # from config file
        assert manifest["seed"] == 1  # CLI wins over config file

    def test_bad_config_usage_error(self, tmp_path):
        missing = tmp_path / "nope.json"
        assert main(["--config", str(missing), "gen"]) == 1


class TestCheckpointEvery:
    def test_periodic_checkpoints(self, dataset_dir, tmp_path):
        out = tmp_path / "run"
        code = main([
            "train", "--data", str(dataset_dir), "--out", str(out),
            "--seed", "3", "--no-saf", "--checkpoint-every", "1", *TRAIN_FLAGS,
        ])
        assert code == 0
        assert (out / "checkpoint_epoch_0001.ckpt").exists()
        assert (out / "checkpoint_epoch_0002.ckpt").exists()
        assert (out / "checkpoint_final.ckpt").exists()


class TestDataRootEnv:
    def test_powerskel_data_dir_sets_defaults(self, monkeypatch, tmp_path):
        monkeypatch.setenv("POWERSKEL_DATA_DIR", str(tmp_path / "root"))
        from powerskel.cli import build_parser

        parser = build_parser()
        args = parser.parse_args(["gen"])
        assert str(tmp_path / "root") in args.out


class TestSimulateCollect:
    def test_udp_round_trip_through_cli(self, tmp_path):
        import threading

        data = tmp_path / "data"
        main([
            "gen", "--seed", "9", "--train", "6", "--test", "2",
            "--sensors", "2", "--subcarriers", "4", "--out", str(data),
        ])
        out = tmp_path / "collected.jsonl"
        port = 25566
        collector = threading.Thread(
            target=main,
            args=([
                "collect", "--port", str(port), "--sensors", "2", "--subcarriers", "4",
                "--frames", "6", "--idle-timeout", "4.0", "--timeout-ms", "300",
                "--out", str(out),
            ],),
        )
        collector.start()
        import time as _time

        _time.sleep(0.4)  # let the socket bind
        code = main([
            "simulate", "--data", str(data), "--split", "train",
            "--rate", "0", "--port", str(port),
        ])
        assert code == 0
        collector.join(timeout=10.0)
        assert not collector.is_alive()
        lines = out.read_text().splitlines()
        assert len(lines) == 6
        rec = json.loads(lines[0])
        assert rec["missing_paths"] == []
        assert len(rec["csi"]) == 2 * 4


class TestAblate:
    def test_grid_runs_and_emits_table(self, tmp_path):
        data = tmp_path / "data"
        main([
            "gen", "--seed", "5", "--train", "16", "--test", "8",
            "--sensors", "2", "--subcarriers", "4", "--out", str(data),
        ])
        out = tmp_path / "ablation"
        code = main([
            "ablate", "--data", str(data), "--out", str(out), "--seed", "2",
            *TRAIN_FLAGS,
        ])
        assert code == 0
        table = (out / "ablation.txt").read_text().splitlines()
        variants = [line.split()[0] for line in table[1:]]
        assert variants == ["base", "saf", "ckd", "saf+ckd"]
        for name in ("base", "saf", "ckd", "saf_ckd"):
            assert (out / f"checkpoint_{name}.ckpt").exists()
