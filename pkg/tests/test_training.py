import math
from pathlib import Path

import pandas as pd
import pytest
import torch
from torch.optim.lr_scheduler import CosineAnnealingLR

from app.errors import ConfigError, SplitError
from app.models import build_model
from app.schemas import AblationAxis, RunConfig
from app.services.checkpoint import load_checkpoint
from app.services.dataset import load_dataset
from app.services.training import (
    FoldSplit,
    ablation_rows,
    ablation_sweep,
    build_optimizer,
    cosine_lr,
    evaluate,
    make_folds,
    optimizer_step,
    run_cross_validation,
    run_fold,
    save_fold_outputs,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 200, 1e-3) == pytest.approx(1e-3)
        assert cosine_lr(100, 200, 1e-3) == pytest.approx(5e-4)
        assert cosine_lr(200, 200, 1e-3) == pytest.approx(0.0, abs=1e-18)

    def test_nonincreasing(self):
        lrs = [cosine_lr(e, 50, 1e-3) for e in range(51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_scheduler_follows_closed_form(self):
        param = torch.nn.Parameter(torch.zeros(1))
        optimizer = torch.optim.Adam([param], lr=1e-3)
        scheduler = CosineAnnealingLR(optimizer, T_max=30, eta_min=0.0)
        for epoch in range(30):
            assert optimizer.param_groups[0]["lr"] == pytest.approx(cosine_lr(epoch, 30, 1e-3), abs=1e-12)
            optimizer.step()
            scheduler.step()


class TestAdam:
    def test_first_step_matches_hand_update(self):
        model = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            model.weight.fill_(0.5)
        optimizer = build_optimizer(model, 0.01)
        model.weight.grad = torch.full_like(model.weight, 0.2)
        optimizer_step(optimizer)
        # bias-corrected moments give m/sqrt(v) = g/|g| on the first step
        expected = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8)
        assert float(model.weight) == pytest.approx(expected, abs=1e-12)
        assert model.weight.grad is None

    def test_zero_gradient_leaves_parameters(self):
        model = torch.nn.Linear(2, 1)
        before = [p.detach().clone() for p in model.parameters()]
        optimizer = build_optimizer(model, 0.1)
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        optimizer_step(optimizer)
        assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))

    def test_step_keeps_scheduled_learning_rate(self):
        model = torch.nn.Linear(1, 1)
        optimizer = build_optimizer(model, 0.01)
        scheduler = CosineAnnealingLR(optimizer, T_max=4, eta_min=0.0)
        scheduler.step()
        for p in model.parameters():
            p.grad = torch.ones_like(p)
        optimizer_step(optimizer)
        assert optimizer.param_groups[0]["lr"] == pytest.approx(cosine_lr(1, 4, 0.01))
        assert all(p.grad is None for p in model.parameters())


class TestFolds:
    ids = [f"P{i:02d}" for i in range(23)]

    def test_chunks_tile_the_ids(self):
        folds = make_folds(self.ids, 5, seed=0)
        tests = [pid for fold in folds for pid in fold.test_ids]
        assert sorted(tests) == sorted(self.ids)
        for fold in folds:
            assert sorted(fold.train_ids + fold.val_ids + fold.test_ids) == sorted(self.ids)

    def test_validation_is_next_chunk(self):
        folds = make_folds(self.ids, 5, seed=0)
        for i, fold in enumerate(folds):
            assert fold.val_ids == folds[(i + 1) % 5].test_ids

    def test_deterministic_per_seed(self):
        assert make_folds(self.ids, 5, 1)[2].test_ids == make_folds(self.ids, 5, 1)[2].test_ids
        assert make_folds(self.ids, 5, 1)[0].test_ids != make_folds(self.ids, 5, 2)[0].test_ids

    def test_too_few_patients(self):
        with pytest.raises(ConfigError):
            make_folds(["a", "b"], 5)

    def test_overlap_is_rejected(self):
        with pytest.raises(SplitError):
            FoldSplit(0, ["a", "b"], ["b"], ["c"]).check()

    def test_empty_split_is_rejected(self):
        with pytest.raises(ConfigError):
            FoldSplit(0, ["a"], [], ["c"]).check()


class TestRuns:
    def test_fold_result(self, run_cfg, patients):
        split = make_folds([p.id for p in patients], 5, 0)[0]
        result = run_fold(run_cfg, patients, split)
        assert len(result.history) == run_cfg.epochs
        assert 0 <= result.best_epoch < run_cfg.epochs
        assert result.report.fold == 0
        lrs = [row["lr"] for row in result.history]
        assert lrs[0] == pytest.approx(run_cfg.base_lr)
        assert lrs[1] == pytest.approx(cosine_lr(1, run_cfg.epochs, run_cfg.base_lr))
        assert all(math.isfinite(row["total"]) for row in result.history)

    def test_saved_checkpoint_is_the_best_state(self, run_cfg, patients, tmp_path):
        split = make_folds([p.id for p in patients], 5, 0)[1]
        result = run_fold(run_cfg, patients, split)
        save_fold_outputs(result, tmp_path)
        restored = load_checkpoint(build_model(run_cfg.mme(), run_cfg.st(), run_cfg.dtype), tmp_path / "fold1.ckpt")
        for name, value in restored.state_dict().items():
            assert torch.equal(value, result.best_state[name].to(value.dtype)), name
        by_id = {p.id: p for p in patients}
        test_set = [by_id[i] for i in split.test_ids]
        assert evaluate(restored, test_set, run_cfg, fold=1) == result.report

    def test_cross_validation_outputs_are_reproducible(self, run_cfg, patients, tmp_path):
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            cv = run_cross_validation(run_cfg, patients, out)
            assert len(cv.folds) == 5
            outputs.append(out)

        names = sorted(p.name for p in outputs[0].iterdir())
        expected = {f"fold{i}.ckpt" for i in range(5)} | {f"history_fold{i}.tsv" for i in range(5)}
        assert expected | {"metrics_arms2.tsv", "metrics_cfh.tsv", "metrics.kv"} == set(names)
        for name in names:
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes(), name

        table = pd.read_csv(outputs[0] / "metrics_arms2.tsv", sep="\t")
        assert table["Method"].tolist() == [f"Fold {i}" for i in range(5)] + ["Mean"]

    def test_record_free_run(self, run_cfg, patients):
        cfg = RunConfig(**{**run_cfg.model_dump(), "record_info": False, "epochs": 1})
        assert cfg.train().effective_alpha == 0.0
        split = make_folds([p.id for p in patients], 5, 0)[1]
        assert run_fold(cfg, patients, split).report.fold == 1


class TestAblation:
    @pytest.mark.parametrize(
        "axis,count",
        [("selection_rate", 4), ("tsia", 2), ("record", 3), ("st", 2), ("mask", 3)],
    )
    def test_row_counts(self, axis, count):
        assert len(ablation_rows(AblationAxis(axis))) == count

    def test_selection_rate_sweep(self, run_cfg, patients, tmp_path):
        cfg = RunConfig(**{**run_cfg.model_dump(), "epochs": 1})
        rows = ablation_sweep(cfg, patients, AblationAxis.SELECTION_RATE, tmp_path)
        assert list(rows) == ["Selection rate 25%", "Selection rate 50%", "Selection rate 75%", "Selection rate 100%"]
        table = pd.read_csv(tmp_path / "ablation_selection_rate_cfh.tsv", sep="\t")
        assert len(table) == 4
        assert (tmp_path / "ablation_selection_rate.kv").is_file()


@pytest.mark.slow
class TestSyntheticAcceptance:
    """Toy-scale runs on a 400-set generated dataset"""

    @pytest.fixture(scope="class")
    def toy(self, tmp_path_factory):
        from app.config import build_run_config
        from app.services.synthetic import generate_synthetic

        root = tmp_path_factory.mktemp("toy")
        cfg = build_run_config(CONFIGS / "toy.env", {"data_dir": str(root / "data"), "out_dir": str(root / "runs")})
        generate_synthetic(cfg.synthetic(), cfg.data_dir)
        return cfg, load_dataset(cfg.data_dir)

    def test_mean_accuracy_well_above_chance(self, toy):
        cfg, patients = toy
        mean = run_cross_validation(cfg, patients).mean
        assert mean.arms2.accuracy >= 0.80
        assert mean.cfh.accuracy >= 0.80

    @pytest.mark.parametrize(
        "axis,worse,better",
        [("tsia", "Without TSIA", "With TSIA"), ("record", "Without record info", "With record info + Reconstruction")],
    )
    def test_ablation_direction(self, toy, axis, worse, better):
        cfg, patients = toy
        wins = 0
        for seed in range(3):
            seeded = RunConfig(**{**cfg.model_dump(), "seed": seed})
            rows = ablation_sweep(seeded, patients, AblationAxis(axis))
            wins += rows[better].mean_accuracy >= rows[worse].mean_accuracy
        assert wins >= 2
