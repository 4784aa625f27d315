import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from ratsir import synthdata, trainer
from ratsir.handkin import HandModel, build_template
from ratsir.net import NetConfig
from ratsir.synthdata import DatasetConfig
from ratsir.trainer import (
    TrainConfig,
    TrainData,
    TrainingDiverged,
    aggregate_records,
    build_variant,
    evaluate,
    lr_schedule,
    sequence_metrics,
    train,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("trainds") / "d"
    synthdata.make_dataset(DatasetConfig(count=4, seed=33), out)
    return synthdata.load_dataset(out)


@pytest.fixture(scope="module")
def small_train_config():
    return TrainConfig(variant="cross_s_seq", steps=5, batch_size=2, seed=0)


class TestSchedule:
    def test_linear_decay(self):
        assert lr_schedule(0, 100, 1e-3) == 1e-3
        assert lr_schedule(50, 100, 1e-3) == pytest.approx(5e-4)
        assert lr_schedule(100, 100, 1e-3) == 0.0
        assert lr_schedule(150, 100, 1e-3) == 0.0  # never negative

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ValueError):
            TrainConfig(steps=0)
        with pytest.raises(ValueError):
            TrainConfig(variant="banana")


class TestBuildVariant:
    def test_all_five(self):
        for name in trainer.ABLATION_VARIANTS:
            assert build_variant(name, NetConfig()) is not None
        assert len(trainer.ABLATION_VARIANTS) == 5

    def test_unknown(self):
        with pytest.raises(ValueError):
            build_variant("cross_x")


class TestTrain:
    def test_logs_one_line_per_step(self, tiny_dataset, small_train_config, tmp_path):
        res = train(small_train_config, tiny_dataset, out_dir=tmp_path / "run")
        assert len(res.logs) == small_train_config.steps
        lines = (tmp_path / "run" / "log.jsonl").read_text().splitlines()
        assert len(lines) == small_train_config.steps
        rec = json.loads(lines[0])
        for key in ("step", "lr", "total", "grad_norm", "mano", "3d", "2d", "jrel", "close"):
            assert key in rec

    def test_deterministic_rerun(self, tiny_dataset, small_train_config):
        r1 = train(small_train_config, tiny_dataset)
        r2 = train(small_train_config, tiny_dataset)
        for a, b in zip(r1.model.state_dict().values(), r2.model.state_dict().values()):
            assert torch.equal(a, b)
        assert r1.logs == r2.logs

    def test_warm_start_without_steps_is_identity(self, tiny_dataset, small_train_config, tmp_path):
        first = tmp_path / "first"
        res = train(small_train_config, tiny_dataset, out_dir=first)
        again = tmp_path / "again"
        res2 = train(small_train_config, tiny_dataset, out_dir=again,
                     resume_from=res.checkpoint)
        assert res2.logs == []  # steps already complete
        assert (first / "checkpoint.bin").read_bytes() == (again / "checkpoint.bin").read_bytes()

    def test_resume_continues_step_counter(self, tiny_dataset, small_train_config, tmp_path):
        res = train(small_train_config, tiny_dataset, out_dir=tmp_path / "a")
        longer = dataclasses.replace(small_train_config, steps=8)
        res2 = train(longer, tiny_dataset, out_dir=tmp_path / "b", resume_from=res.checkpoint)
        assert [r["step"] for r in res2.logs] == [5, 6, 7]
        assert res2.step == 8

    def test_divergence_aborts(self, tiny_dataset):
        cfg = TrainConfig(variant="cross_s", steps=30, batch_size=2, seed=0,
                          lr0=1e12, grad_clip=1e12)
        with pytest.raises(TrainingDiverged):
            train(cfg, tiny_dataset)

    def test_occlusion_augmentation_runs(self, tiny_dataset):
        cfg = TrainConfig(variant="cross_s_seq", steps=3, batch_size=2, seed=0,
                          occlusion_prob=1.0)
        res = train(cfg, tiny_dataset)
        assert len(res.logs) == 3

    def test_holistic_variant_runs(self, tiny_dataset):
        cfg = TrainConfig(variant="cross_h", steps=2, batch_size=2, seed=0)
        res = train(cfg, tiny_dataset)
        assert len(res.logs) == 2


class TestEvaluate:
    def test_gt_prediction_scores_zero(self, tiny_dataset):
        data = TrainData(tiny_dataset, NetConfig(), tau=2.0)
        hm = HandModel(build_template(0, 778), dtype=torch.float64)
        s = data.samples[0]
        gt_pred = {"theta": s.theta, "beta": s.beta, "upsilon": s.upsilon, "cam": s.cams}
        rec = sequence_metrics(gt_pred, s, hm)
        # stored values are f32-quantized; reconstruction matches to ~1e-5 mm
        assert rec["mpjpe_mm"] < 1e-3
        assert rec["mpvpe_mm"] < 1e-3
        assert rec["mrrpe_mm"] == 0.0
        assert rec["accel_e_mm_s2"] < 1e-2
        assert rec["auc"] > 0.99

    def test_report_fields_complete(self, tiny_dataset, small_train_config):
        res = train(small_train_config, tiny_dataset)
        report, records = evaluate(res.model, tiny_dataset)
        d = report.to_dict()
        assert set(d) == {"mpjpe_mm", "mpvpe_mm", "mrrpe_mm", "accel_e_mm_s2", "auc"}
        assert len(records) == len(tiny_dataset)
        assert all(len(r["mpjpe_frames"]) == tiny_dataset.manifest["T"] for r in records)

    def test_mean_matches_per_sequence_oracle(self, tiny_dataset, small_train_config):
        res = train(small_train_config, tiny_dataset)
        report, records = evaluate(res.model, tiny_dataset)
        again = aggregate_records(records)
        for key, val in report.to_dict().items():
            oracle = float(np.mean([r[key] for r in records]))
            assert val == pytest.approx(oracle, rel=1e-12)
            assert getattr(again, key) == pytest.approx(oracle, rel=1e-12)

    def test_occluded_eval_adds_field(self, tiny_dataset, small_train_config):
        res = train(small_train_config, tiny_dataset)
        _, records = evaluate(res.model, tiny_dataset, occlude_middle=True)
        assert all("mpjpe_occluded" in r for r in records)


class TestAblationRunner:
    def test_structure(self, tiny_dataset):
        cfg = TrainConfig(steps=2, batch_size=2, seed=0)
        result = trainer.run_ablation(tiny_dataset, cfg, seeds=[0],
                                      variants=("baseline", "cross_s"), eval_frac=0.25)
        assert {r["variant"] for r in result["rows"]} == {"baseline", "cross_s"}
        assert set(result["summary"]) == {"baseline", "cross_s"}
        assert result["eval_count"] == 1
        for row in result["rows"]:
            assert "mpjpe_mm" in row and "mrrpe_mm" in row
