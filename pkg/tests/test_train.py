import json
import math

import numpy as np
import pytest
import torch

from gazedistill.ablate import AXES
from gazedistill.config import arch_hash, load_config
from gazedistill.data import DatasetError
from gazedistill.models import build_teacher, checkpoint_digest, state_digest
from gazedistill.synth import SceneSpec, write_dataset
from gazedistill.train import (
    TrainConfig,
    TrainerError,
    cosine_lr,
    evaluate_checkpoint,
    load_dataset,
    train_student,
    train_teacher,
    warmup_factor,
)


def small_cfg(**overrides):
    base = {
        "scene.image_side": "32",
        "scene.radius_min": "4",
        "scene.radius_max": "7",
        "scene.count": "10",
        "scene.gaze_points": "30",
        "train.epochs": "2",
        "train.batch_size": "4",
        "model.base_channels": "8",
        "model.student_channels": "4",
        "model.heads": "2",
        "text.width": "32",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    return load_config(overrides=base)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    cfg = small_cfg()
    root = tmp_path_factory.mktemp("data") / "ds"
    write_dataset(root, SceneSpec.from_config(cfg), cfg["scene.count"],
                  cfg["split.val"], cfg["split.test"])
    return root


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 0.01) == 0.01
        assert abs(cosine_lr(100, 100, 0.01)) < 1e-18
        assert abs(cosine_lr(50, 100, 0.01) - 0.005) < 1e-12

    def test_cosine_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 0.1)
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.1)

    def test_warmup_linear_ramp(self):
        assert warmup_factor(1, 5) == pytest.approx(0.2)
        assert warmup_factor(5, 5) == 1.0
        assert warmup_factor(9, 5) == 1.0
        values = [warmup_factor(e, 5) for e in range(1, 10)]
        assert values == sorted(values)


class TestTeacher:
    def test_zero_lr_leaves_weights_untouched(self, small_dataset, tmp_path):
        cfg = small_cfg(**{"train.lr_init": "0", "train.epochs": "1"})
        ds = load_dataset(cfg, small_dataset)
        summary = train_teacher(cfg, ds, tmp_path / "run")
        torch.manual_seed(cfg["train.seed"])
        fresh = build_teacher(cfg)
        from gazedistill.models import load_checkpoint

        trained = build_teacher(cfg)
        load_checkpoint(trained, summary["checkpoints"]["final"], arch_hash(cfg))
        assert state_digest(trained) == state_digest(fresh)

    def test_deterministic_loss_sequences(self, small_dataset, tmp_path):
        cfg = small_cfg(**{"train.epochs": "2"})
        a = train_teacher(cfg, load_dataset(cfg, small_dataset), tmp_path / "a")
        b = train_teacher(cfg, load_dataset(cfg, small_dataset), tmp_path / "b")
        losses_a = [(r["pce"], r["val_dice"]) for r in a["records"]]
        losses_b = [(r["pce"], r["val_dice"]) for r in b["records"]]
        assert losses_a == losses_b
        assert checkpoint_digest(a["checkpoints"]["final"]) == checkpoint_digest(
            b["checkpoints"]["final"]
        )

    def test_loss_descends(self, small_dataset, tmp_path):
        cfg = small_cfg(**{"train.epochs": "6"})
        summary = train_teacher(cfg, load_dataset(cfg, small_dataset), tmp_path / "run")
        records = summary["records"]
        assert records[-1]["pce"] < records[0]["pce"]

    def test_empty_hc_items_skipped_and_counted(self, small_dataset, tmp_path):
        cfg = small_cfg()
        ds = load_dataset(cfg, small_dataset)
        # blank out the gaze-derived masks of one training item
        victim = ds.split("train")[0]
        victim.masks.m_hc[:] = False
        victim.masks.m_bc[:] = False
        summary = train_teacher(cfg, ds, tmp_path / "run")
        assert summary["records"][0]["skipped_empty_hc"] == 1

    def test_run_outputs_written(self, small_dataset, tmp_path):
        cfg = small_cfg(**{"train.epochs": "1"})
        summary = train_teacher(cfg, load_dataset(cfg, small_dataset), tmp_path / "run")
        run = tmp_path / "run"
        assert (run / "config.txt").is_file()
        lines = (run / "records.jsonl").read_text().strip().splitlines()
        assert len(lines) == 1
        row = json.loads(lines[0])
        assert {"epoch", "pce", "lr", "val_dice"} <= set(row)


@pytest.fixture(scope="module")
def teacher_run(small_dataset, tmp_path_factory):
    cfg = small_cfg(**{"train.epochs": "3"})
    run = tmp_path_factory.mktemp("teacher")
    summary = train_teacher(cfg, load_dataset(cfg, small_dataset), run)
    return cfg, summary


class TestStudent:
    def test_teacher_frozen_bitwise(self, small_dataset, teacher_run, tmp_path):
        cfg, t_summary = teacher_run
        ds = load_dataset(cfg, small_dataset)
        summary = train_student(cfg, t_summary["checkpoints"]["final"], ds, tmp_path / "s")
        assert summary["teacher_frozen"] is True
        # checkpoint on disk unchanged too
        assert checkpoint_digest(t_summary["checkpoints"]["final"]) == checkpoint_digest(
            t_summary["checkpoints"]["final"]
        )

    def test_student_determinism(self, small_dataset, teacher_run, tmp_path):
        cfg, t_summary = teacher_run
        ds = load_dataset(cfg, small_dataset)
        a = train_student(cfg, t_summary["checkpoints"]["final"], ds, tmp_path / "a")
        b = train_student(cfg, t_summary["checkpoints"]["final"], ds, tmp_path / "b")
        assert [r["total"] for r in a["records"]] == [r["total"] for r in b["records"]]
        assert checkpoint_digest(a["checkpoints"]["final"]) == checkpoint_digest(
            b["checkpoints"]["final"]
        )

    def test_loss_components_recorded_with_warmup(self, small_dataset, teacher_run, tmp_path):
        cfg, t_summary = teacher_run
        cfg = {**cfg, "train.warmup_epochs": 2}
        ds = load_dataset(cfg, small_dataset)
        summary = train_student(cfg, t_summary["checkpoints"]["final"], ds, tmp_path / "s")
        rows = summary["records"]
        assert rows[0]["cwc_weight"] == pytest.approx(0.5 * cfg["loss.lambda_cwc"])
        assert rows[1]["cwc_weight"] == pytest.approx(cfg["loss.lambda_cwc"])
        for row in rows:
            assert {"ce", "afc", "cwc", "total"} <= set(row)

    def test_plain_ce_mode_matches_ablation_contract(self, small_dataset, teacher_run, tmp_path):
        cfg, t_summary = teacher_run
        cfg = {
            **cfg,
            "loss.lambda_afc": 0.0,
            "loss.lambda_cwc": 0.0,
            "darm.enabled": False,
        }
        ds = load_dataset(cfg, small_dataset)
        summary = train_student(cfg, t_summary["checkpoints"]["final"], ds, tmp_path / "s")
        for row in summary["records"]:
            assert row["total"] == pytest.approx(row["ce"], rel=1e-12)

    def test_checkpoint_arch_mismatch_rejected(self, small_dataset, teacher_run, tmp_path):
        from gazedistill.models import CheckpointCompatError

        cfg, t_summary = teacher_run
        bad_cfg = small_cfg(**{"model.base_channels": "16", "model.student_channels": "8"})
        ds = load_dataset(bad_cfg, small_dataset)
        with pytest.raises(CheckpointCompatError):
            train_student(bad_cfg, t_summary["checkpoints"]["final"], ds, tmp_path / "s")


class TestEvaluate:
    def test_report_structure(self, small_dataset, tmp_path):
        cfg = small_cfg(**{"train.epochs": "1"})
        ds = load_dataset(cfg, small_dataset)
        summary = train_teacher(cfg, ds, tmp_path / "run")
        report = evaluate_checkpoint(cfg, summary["checkpoints"]["final"], ds, split="test")
        assert report["role"] == "teacher"
        assert len(report["per_image"]) == len(ds.split("test"))
        assert set(report["aggregate"]) == {"dice", "miou", "hd95", "asd"}
        for row in report["per_image"]:
            assert 0.0 <= row["dice"] <= 1.0

    def test_missing_split_is_error(self, small_dataset, tmp_path):
        cfg = small_cfg(**{"train.epochs": "1"})
        ds = load_dataset(cfg, small_dataset)
        summary = train_teacher(cfg, ds, tmp_path / "run")
        with pytest.raises(TrainerError):
            evaluate_checkpoint(cfg, summary["checkpoints"]["final"], ds, split="nope")


class TestDatasetContracts:
    def test_missing_reports_is_configuration_error(self, small_dataset, tmp_path):
        import shutil

        cfg = small_cfg()
        broken = tmp_path / "broken"
        shutil.copytree(small_dataset, broken)
        shutil.rmtree(broken / "reports")
        with pytest.raises(DatasetError):
            load_dataset(cfg, broken)

    def test_shape_mismatch_names_file_pair(self, small_dataset, tmp_path):
        import shutil

        from gazedistill.gaze import save_mask_png

        cfg = small_cfg()
        broken = tmp_path / "broken"
        shutil.copytree(small_dataset, broken)
        save_mask_png(np.zeros((8, 8), dtype=bool), broken / "masks" / "0000.png")
        with pytest.raises(DatasetError) as err:
            load_dataset(cfg, broken)
        assert "0000" in str(err.value)
        assert "masks" in str(err.value) and "images" in str(err.value)


def test_every_ablation_axis_reachable_from_config():
    cfg = small_cfg()
    for axis, (_, variants) in AXES.items():
        for name, overrides in variants.items():
            merged = {**cfg, **overrides}
            tc = TrainConfig.from_config(merged, stage="student")
            if "loss.lambda_afc" in overrides:
                assert tc.weights.lambda_afc == overrides["loss.lambda_afc"]
            if "loss.lambda_cwc" in overrides:
                assert tc.weights.lambda_cwc_max == overrides["loss.lambda_cwc"]
            if "darm.enabled" in overrides:
                assert tc.darm_enabled == overrides["darm.enabled"]
            if "loss.tau_pos" in overrides:
                assert tc.tau_pos == overrides["loss.tau_pos"]
                assert tc.tau_neg == overrides["loss.tau_neg"]
            if "model.fusion_stages" in overrides:
                assert tc.fusion_stages == tuple(overrides["model.fusion_stages"])
    # threshold axis mirrors the four published pairs
    pairs = {
        (v["loss.tau_neg"], v["loss.tau_pos"]) for v in AXES["thresholds"][1].values()
    }
    assert pairs == {(0.1, 0.9), (0.2, 0.8), (0.3, 0.7), (0.4, 0.6)}
    # student-loss axis mirrors the four published variants
    assert set(AXES["student_losses"][1]) == {"full", "wo_afc", "wo_cwc", "wo_both"}
