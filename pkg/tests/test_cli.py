"""End-to-end tests for the podd command line interface."""

import csv
import json
import struct

import numpy as np
import pytest
from click.testing import CliRunner

from podd.cli import main as cli
from podd.io import read_label_tensor, read_poster


def write_config(path, **overrides):
    """Write a small synthetic config that distills in a few seconds."""
    raw = {
        "dataset": {
            "kind": "synthetic",
            "n_classes": 4,
            "image_h": 8,
            "image_w": 8,
            "channels": 1,
            "per_class": 24,
            "test_per_class": 12,
            "signal": 0.3,
            "noise": 0.2,
            "seed": 11,
        },
        "distill": {
            "ipc": 1.0,
            "class_rows": 2,
            "class_cols": 2,
            "patch_rows": 2,
            "patch_cols": 2,
            "label_mode": "fixed",
            "unroll_steps": 2,
            "backprop_window": 2,
            "distilled_batch_size": 4,
            "data_batch_size": 48,
            "inner_lr": 0.1,
            "outer_lr": 0.05,
            "epochs": 1,
            "inner_width": 8,
            "seed": 0,
        },
        "eval": {
            "n_models": 1,
            "train_budget": 5,
            "seed": 7,
        },
    }
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        raw[section][name] = value
    path.write_text(json.dumps(raw))
    return raw


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.json"
    write_config(path)
    return path


def run_distill(runner, config_path, out_dir, *extra):
    result = runner.invoke(
        cli, ["distill", str(config_path), "--out", str(out_dir), *extra]
    )
    assert result.exit_code == 0, result.output
    return result


class TestInfo:
    def test_reports_geometry_and_budget(self, runner, config_path):
        result = runner.invoke(cli, ["info", str(config_path)])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["dataset"] == {
            "kind": "synthetic",
            "n_classes": 4,
            "image": "8x8x1",
        }
        geometry = payload["geometry"]
        assert geometry["poster_h"] == 16
        assert geometry["poster_w"] == 16
        assert geometry["poster_pixels"] == 256
        assert geometry["n_patches"] == 4
        assert geometry["patch_h"] == 8
        assert geometry["patch_w"] == 8
        assert geometry["label_parameters"] == 16
        assert len(payload["config_hash"]) == 12
        assert payload["label_mode"] == "fixed"
        # 96 train images, batches of 48: two outer steps per epoch.
        assert payload["outer_steps"] == {"per_epoch": 2, "total": 2}

    def test_unknown_key_is_a_config_error(self, runner, tmp_path):
        path = tmp_path / "config.json"
        write_config(path, **{"distill.typo_key": 1})
        result = runner.invoke(cli, ["info", str(path)])
        assert result.exit_code == 2
        assert "error:" in result.stderr
        assert "typo_key" in result.stderr

    def test_malformed_json_is_a_config_error(self, runner, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        result = runner.invoke(cli, ["info", str(path)])
        assert result.exit_code == 2

    def test_missing_file_is_a_config_error(self, runner, tmp_path):
        result = runner.invoke(cli, ["info", str(tmp_path / "nope.json")])
        assert result.exit_code == 2

    def test_set_overrides_feed_through(self, runner, config_path):
        result = runner.invoke(
            cli,
            ["info", str(config_path), "--set", "distill.epochs=3"],
        )
        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["outer_steps"]["total"] == 6

    def test_malformed_override_is_a_config_error(self, runner, config_path):
        result = runner.invoke(
            cli, ["info", str(config_path), "--set", "no_equals_sign"]
        )
        assert result.exit_code == 2


class TestOrder:
    def test_writes_order_file_with_score(self, runner, config_path, tmp_path):
        out = tmp_path / "orderrun"
        result = runner.invoke(cli, ["order", str(config_path), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "order score" in result.output
        payload = json.loads((out / "order.json").read_text())
        assert sorted(sum(payload["grid"], [])) == [0, 1, 2, 3]
        assert payload["score"] > 0
        assert payload["config_hash"]

    def test_first_class_is_respected(self, runner, config_path, tmp_path):
        out = tmp_path / "orderrun"
        result = runner.invoke(
            cli,
            ["order", str(config_path), "--out", str(out), "--first-class", "3"],
        )
        assert result.exit_code == 0, result.output
        assert json.loads((out / "order.json").read_text())["grid"][0][0] == 3

    def test_random_orders_are_scored(self, runner, config_path, tmp_path):
        out = tmp_path / "orderrun"
        result = runner.invoke(
            cli,
            ["order", str(config_path), "--out", str(out), "--random-orders", "8"],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads((out / "order.json").read_text())
        scored = payload["random_orders"]
        assert len(scored) == 8
        for entry in scored:
            assert sorted(sum(entry["grid"], [])) == [0, 1, 2, 3]
            assert entry["score"] > 0

    def test_deterministic_output(self, runner, config_path, tmp_path):
        texts = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(cli, ["order", str(config_path), "--out", str(out)])
            assert result.exit_code == 0, result.output
            texts.append((out / "order.json").read_text())
        assert texts[0] == texts[1]


class TestDistill:
    def test_writes_run_artifacts(self, runner, config_path, tmp_path):
        out = tmp_path / "run"
        result = run_distill(runner, config_path, out)
        assert "poster 16x16x1" in result.output
        for name in (
            "poster.podd",
            "labels.podl",
            "poster.png",
            "order.json",
            "config.json",
            "log.csv",
            "checkpoint.pt",
        ):
            assert (out / name).exists(), name

        poster = read_poster(out / "poster.podd")
        assert poster.pixels.shape == (16, 16, 1)
        labels = read_label_tensor(out / "labels.podl").numpy()
        assert labels.shape == (2, 2, 4)
        assert np.allclose(labels.sum(axis=-1), 1.0, atol=1e-6)

        with open(out / "log.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2
        assert set(rows[0]) == {
            "step",
            "t_end",
            "outer_loss",
            "poster_grad_norm",
            "label_grad_norm",
            "wall_ms",
        }
        assert [int(row["step"]) for row in rows] == [1, 2]

        stored = json.loads((out / "config.json").read_text())
        assert stored["config"]["distill"]["epochs"] == 1
        assert len(stored["digest"]) == 12

    def test_runs_are_bit_identical(self, runner, config_path, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        run_distill(runner, config_path, out_a)
        run_distill(runner, config_path, out_b)
        assert (out_a / "poster.podd").read_bytes() == (out_b / "poster.podd").read_bytes()
        assert (out_a / "labels.podl").read_bytes() == (out_b / "labels.podl").read_bytes()

    def test_accepts_precomputed_order(self, runner, config_path, tmp_path):
        order_dir = tmp_path / "orderrun"
        result = runner.invoke(cli, ["order", str(config_path), "--out", str(order_dir)])
        assert result.exit_code == 0, result.output
        order_path = order_dir / "order.json"
        out = tmp_path / "run"
        run_distill(runner, config_path, out, "--order", str(order_path))
        stored = json.loads((out / "order.json").read_text())
        assert stored["grid"] == json.loads(order_path.read_text())["grid"]

    def test_order_grid_mismatch_is_a_config_error(self, runner, config_path, tmp_path):
        order_path = tmp_path / "order.json"
        order_path.write_text(
            json.dumps({"rows": 1, "cols": 4, "grid": [[0, 1, 2, 3]], "score": 1.0})
        )
        result = runner.invoke(
            cli,
            [
                "distill",
                str(config_path),
                "--out",
                str(tmp_path / "run"),
                "--order",
                str(order_path),
            ],
        )
        assert result.exit_code == 2
        assert "does not match config" in result.stderr

    def test_malformed_order_file_is_an_io_error(self, runner, config_path, tmp_path):
        order_path = tmp_path / "order.json"
        order_path.write_text(json.dumps({"grid": [[0, 1], [2, 3]]}))
        result = runner.invoke(
            cli,
            [
                "distill",
                str(config_path),
                "--out",
                str(tmp_path / "run"),
                "--order",
                str(order_path),
            ],
        )
        assert result.exit_code == 3
        assert "missing key" in result.stderr

    def test_invalid_batch_size_is_a_config_error(self, runner, config_path, tmp_path):
        result = runner.invoke(
            cli,
            [
                "distill",
                str(config_path),
                "--out",
                str(tmp_path / "run"),
                "--set",
                "distill.distilled_batch_size=5",
            ],
        )
        assert result.exit_code == 2
        assert "distilled_batch_size" in result.stderr

    def test_resume_requires_out(self, runner, config_path):
        result = runner.invoke(
            cli, ["distill", str(config_path), "--resume"]
        )
        assert result.exit_code == 2
        assert "--resume needs --out" in result.stderr

    def test_resume_without_checkpoint_is_an_error(self, runner, config_path, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        result = runner.invoke(
            cli,
            ["distill", str(config_path), "--out", str(out), "--resume"],
        )
        assert result.exit_code == 2
        assert "no checkpoint" in result.stderr

    def test_resume_rejects_other_configs_checkpoint(self, runner, config_path, tmp_path):
        out = tmp_path / "run"
        run_distill(runner, config_path, out)
        result = runner.invoke(
            cli,
            [
                "distill",
                str(config_path),
                "--out",
                str(out),
                "--resume",
                "--set",
                "distill.outer_lr=0.01",
            ],
        )
        assert result.exit_code == 2
        assert "different config" in result.stderr

    def test_resume_from_finished_run_reproduces_artifacts(
        self, runner, config_path, tmp_path
    ):
        out = tmp_path / "run"
        run_distill(runner, config_path, out)
        poster_bytes = (out / "poster.podd").read_bytes()
        labels_bytes = (out / "labels.podl").read_bytes()
        result = runner.invoke(
            cli,
            ["distill", str(config_path), "--out", str(out), "--resume"],
        )
        assert result.exit_code == 0, result.output
        assert (out / "poster.podd").read_bytes() == poster_bytes
        assert (out / "labels.podl").read_bytes() == labels_bytes

    def test_default_out_uses_run_root(self, runner, config_path, tmp_path, monkeypatch):
        root = tmp_path / "runs"
        monkeypatch.setenv("PODD_RUN_ROOT", str(root))
        result = runner.invoke(cli, ["distill", str(config_path)])
        assert result.exit_code == 0, result.output
        run_dirs = list(root.iterdir())
        assert len(run_dirs) == 1
        assert (run_dirs[0] / "poster.podd").exists()


class TestEval:
    @pytest.fixture()
    def run_dir(self, runner, config_path, tmp_path):
        out = tmp_path / "run"
        run_distill(runner, config_path, out)
        return out

    def test_requires_artifact_source(self, runner, config_path):
        result = runner.invoke(cli, ["eval", str(config_path)])
        assert result.exit_code == 2
        assert "--run DIR or both --poster and --labels" in result.stderr

    def test_evaluates_run_directory(self, runner, config_path, run_dir):
        result = runner.invoke(
            cli, ["eval", str(config_path), "--run", str(run_dir)]
        )
        assert result.exit_code == 0, result.output
        report = json.loads((run_dir / "report.json").read_text())
        assert 0.0 <= report["mean"] <= 1.0
        assert report["std"] == 0.0
        assert len(report["per_model"]) == 1
        assert report["protocol"]["n_models"] == 1
        assert report["baselines"] == {}

    def test_explicit_artifacts_and_model_override(
        self, runner, config_path, run_dir, tmp_path
    ):
        result = runner.invoke(
            cli,
            [
                "eval",
                str(config_path),
                "--poster",
                str(run_dir / "poster.podd"),
                "--labels",
                str(run_dir / "labels.podl"),
                "--models",
                "2",
                "--out",
                str(tmp_path / "evalout"),
            ],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "evalout" / "report.json").read_text())
        assert len(report["per_model"]) == 2

    def test_baselines_are_recorded(self, runner, config_path, run_dir):
        result = runner.invoke(
            cli,
            [
                "eval",
                str(config_path),
                "--run",
                str(run_dir),
                "--baseline",
                "noise",
                "--baseline",
                "coreset",
            ],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((run_dir / "report.json").read_text())
        assert set(report["baselines"]) == {"noise", "coreset"}
        for entry in report["baselines"].values():
            assert 0.0 <= entry["mean"] <= 1.0

    def test_missing_poster_is_an_io_error(self, runner, config_path, tmp_path):
        result = runner.invoke(
            cli,
            [
                "eval",
                str(config_path),
                "--poster",
                str(tmp_path / "missing.podd"),
                "--labels",
                str(tmp_path / "missing.podl"),
            ],
        )
        assert result.exit_code == 3

    def test_size_mismatch_is_a_config_error(self, runner, config_path, run_dir, tmp_path):
        bigger = tmp_path / "bigger.json"
        write_config(bigger, **{"distill.ipc": 4.0})
        result = runner.invoke(
            cli, ["eval", str(bigger), "--run", str(run_dir)]
        )
        assert result.exit_code == 2
        assert "poster is 16x16" in result.stderr

    def test_warns_when_config_digest_differs(self, runner, config_path, run_dir, tmp_path):
        other = tmp_path / "other.json"
        write_config(other, **{"eval.train_budget": 6, "distill.outer_lr": 0.04})
        result = runner.invoke(
            cli, ["eval", str(other), "--run", str(run_dir)]
        )
        assert result.exit_code == 0, result.output
        assert "different config" in result.stderr


class TestSweepPatches:
    def test_sweeps_grids_and_writes_summary(self, runner, config_path, tmp_path):
        out = tmp_path / "sweep"
        result = runner.invoke(
            cli,
            [
                "sweep-patches",
                str(config_path),
                "--grids",
                "2x2,3x2",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        with open(out / "sweep.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["grid"] for row in rows] == ["2x2", "3x2"]
        assert (out / "sweep.png").exists()
        for name, patches in (("grid_2x2", "4"), ("grid_3x2", "6")):
            assert (out / name / "poster.podd").exists()
            assert (out / name / "labels.podl").exists()
        by_grid = {row["grid"]: row for row in rows}
        assert int(by_grid["2x2"]["p"]) == 4
        assert int(by_grid["3x2"]["p"]) == 6
        for row in rows:
            assert 0.0 <= float(row["accuracy_mean"]) <= 1.0

    def test_bad_grid_token_is_a_config_error(self, runner, config_path, tmp_path):
        result = runner.invoke(
            cli,
            [
                "sweep-patches",
                str(config_path),
                "--grids",
                "2x2,banana",
                "--out",
                str(tmp_path / "sweep"),
            ],
        )
        assert result.exit_code == 2
        assert "bad grid" in result.stderr

    def test_infeasible_grid_is_skipped_with_warning(self, runner, config_path, tmp_path):
        # 16 rows of 8px patches over a 16px poster collide on offsets.
        out = tmp_path / "sweep"
        result = runner.invoke(
            cli,
            [
                "sweep-patches",
                str(config_path),
                "--grids",
                "16x1,2x2",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "skipping grid 16x1" in result.stderr
        with open(out / "sweep.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["grid"] for row in rows] == ["2x2"]

    def test_all_grids_infeasible_is_an_error(self, runner, config_path, tmp_path):
        result = runner.invoke(
            cli,
            [
                "sweep-patches",
                str(config_path),
                "--grids",
                "16x1",
                "--out",
                str(tmp_path / "sweep"),
            ],
        )
        assert result.exit_code == 2
        assert "no valid grids" in result.stderr


class TestExportPng:
    @pytest.fixture()
    def run_dir(self, runner, config_path, tmp_path):
        out = tmp_path / "run"
        run_distill(runner, config_path, out)
        return out

    def test_exports_png(self, runner, config_path, run_dir, tmp_path):
        out = tmp_path / "poster.png"
        result = runner.invoke(
            cli,
            [
                "export-png",
                str(config_path),
                "--poster",
                str(run_dir / "poster.podd"),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_labels_sidecar_lists_patch_positions(self, runner, config_path, run_dir, tmp_path):
        out = tmp_path / "poster.png"
        result = runner.invoke(
            cli,
            [
                "export-png",
                str(config_path),
                "--poster",
                str(run_dir / "poster.podd"),
                "--labels",
                str(run_dir / "labels.podl"),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        sidecar = json.loads((tmp_path / "poster_patch_labels.json").read_text())
        assert len(sidecar["positions"]) == 4
        assert len(sidecar["labels"]) == 4
        for row in sidecar["labels"]:
            assert abs(sum(row) - 1.0) < 1e-6

    def test_missing_poster_is_an_io_error(self, runner, config_path, tmp_path):
        result = runner.invoke(
            cli,
            [
                "export-png",
                str(config_path),
                "--poster",
                str(tmp_path / "missing.podd"),
                "--out",
                str(tmp_path / "poster.png"),
            ],
        )
        assert result.exit_code == 3
