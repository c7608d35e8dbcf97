"""
Cross-validated training.

Five patient-level chunks; fold i tests on chunk i, validates on chunk i+1 and
trains on the other three. Adam with a cosine-annealed learning rate, best
checkpoint by mean validation accuracy over both genes.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import torch
from sklearn.model_selection import KFold
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader

from ..errors import ConfigError, SplitError
from ..models import DTYPES, MSViT, build_model
from ..schemas import AblationAxis, MetricsReport, RunConfig
from .checkpoint import save_checkpoint
from .dataset import PatientSet
from .heads import total_loss
from .metrics import aggregate, build_report, write_tables
from .tsia import DonorPool, PatientDataset

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SELECTION_RATE_GRID = (0.25, 0.5, 0.75, 1.0)

logger = logging.getLogger(__name__)


def cosine_lr(epoch: int, epochs: int, base_lr: float) -> float:
    """Cosine annealing without restarts, eta_min = 0"""
    return max(0.0, 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs)))


def build_optimizer(model: torch.nn.Module, base_lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=base_lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one update from the accumulated grads, then clear them; the scheduler owns the lr"""
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


@dataclass
class FoldSplit:
    index: int
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]

    def check(self) -> None:
        for name, ids in (("train", self.train_ids), ("validation", self.val_ids), ("test", self.test_ids)):
            if not ids:
                raise ConfigError(f"fold {self.index} has an empty {name} split")
        train, val, test = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if train & val or train & test or val & test:
            raise SplitError(f"fold {self.index} shares patients between splits")


def make_folds(ids: Sequence[str], n_folds: int = 5, seed: int = 0) -> List[FoldSplit]:
    ids = sorted(ids)
    if len(ids) < n_folds:
        raise ConfigError(f"{len(ids)} patients cannot fill {n_folds} folds")
    kfold = KFold(n_splits=n_folds, shuffle=True, random_state=seed)
    chunks = [[ids[i] for i in sorted(test_idx)] for _, test_idx in kfold.split(ids)]

    folds = []
    for i in range(n_folds):
        val_chunk = (i + 1) % n_folds
        train = sorted(pid for j, chunk in enumerate(chunks) if j not in (i, val_chunk) for pid in chunk)
        split = FoldSplit(i, train, chunks[val_chunk], chunks[i])
        split.check()
        folds.append(split)
    return folds


def fold_seed(seed: int, fold: int) -> int:
    return seed * 1000 + fold


def batch_inputs(batch: dict, dtype: torch.dtype):
    return batch["fundus"].to(dtype), batch["oct"].to(dtype), batch["record"].to(dtype)


@torch.no_grad()
def evaluate(model: MSViT, patients: Sequence[PatientSet], cfg: RunConfig, fold: Optional[int] = None) -> MetricsReport:
    dataset = PatientDataset(patients, train=False, mask_mode=cfg.mask_mode)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=False)
    dtype = DTYPES[cfg.dtype]
    was_training = model.training
    model.eval()
    preds = {"arms2": [], "cfh": []}
    labels = {"arms2": [], "cfh": []}
    for batch in loader:
        out, _ = model(*batch_inputs(batch, dtype))
        preds["arms2"] += out.logits_arms2.argmax(dim=-1).tolist()
        preds["cfh"] += out.logits_cfh.argmax(dim=-1).tolist()
        labels["arms2"] += batch["arms2"].tolist()
        labels["cfh"] += batch["cfh"].tolist()
    model.train(was_training)
    return build_report(preds, labels, fold=fold)


@dataclass
class FoldResult:
    split: FoldSplit
    report: MetricsReport
    best_epoch: int
    best_state: Dict[str, torch.Tensor]
    model: MSViT  # best_state loaded
    history: List[dict] = field(default_factory=list)


class FoldRunner:
    def __init__(self, cfg: RunConfig, patients: Sequence[PatientSet], split: FoldSplit):
        split.check()
        self.cfg = cfg
        self.train_cfg = cfg.train()
        self.split = split
        by_id = {p.id: p for p in patients}
        try:
            self.train_set = [by_id[i] for i in split.train_ids]
            self.val_set = [by_id[i] for i in split.val_ids]
            self.test_set = [by_id[i] for i in split.test_ids]
        except KeyError as e:
            raise ConfigError(f"fold {split.index} names unknown patient {e}") from e
        self.seed = fold_seed(cfg.seed, split.index)
        self.dtype = DTYPES[cfg.dtype]

    def build(self):
        self.model = build_model(self.cfg.mme(), self.cfg.st(), self.cfg.dtype, seed=self.seed)
        self.optimizer = build_optimizer(self.model, self.train_cfg.base_lr)
        self.scheduler = CosineAnnealingLR(self.optimizer, T_max=self.train_cfg.epochs, eta_min=0.0)
        pool = DonorPool(self.train_set) if self.train_cfg.tsia else None
        self.train_data = PatientDataset(
            self.train_set,
            train=True,
            pool=pool,
            tsia=self.train_cfg.tsia,
            mask_mode=self.train_cfg.mask_mode,
            seed=self.seed,
        )
        generator = torch.Generator().manual_seed(self.seed)
        self.train_loader = DataLoader(
            self.train_data, batch_size=self.train_cfg.batch_size, shuffle=True, generator=generator
        )

    def train_epoch(self, epoch: int) -> dict:
        self.model.train()
        self.train_data.set_epoch(epoch)
        alpha = self.train_cfg.effective_alpha
        sums, batches = {"ce_arms2": 0.0, "ce_cfh": 0.0, "mse_record": 0.0, "total": 0.0}, 0
        for batch in self.train_loader:
            fundus, oct_image, record = batch_inputs(batch, self.dtype)
            out, _ = self.model(fundus, oct_image, record)
            losses = total_loss(out, batch["arms2"], batch["cfh"], record, alpha)
            losses.total.backward()
            optimizer_step(self.optimizer)
            for key, value in losses.as_floats().items():
                sums[key] += value
            batches += 1
        self.scheduler.step()
        return {key: value / max(batches, 1) for key, value in sums.items()}

    def run(self) -> FoldResult:
        epochs = self.train_cfg.epochs
        logger.info(
            f"Fold {self.split.index}: {len(self.train_set)} train / {len(self.val_set)} val / "
            f"{len(self.test_set)} test patients, {epochs} epochs"
        )
        torch.manual_seed(self.seed)
        self.build()

        best_acc, best_epoch, best_state = -1.0, -1, None
        history = []
        for epoch in range(epochs):
            lr = self.optimizer.param_groups[0]["lr"]
            losses = self.train_epoch(epoch)
            val_acc = evaluate(self.model, self.val_set, self.cfg).mean_accuracy
            history.append({"epoch": epoch, "lr": lr, **losses, "val_mean_accuracy": val_acc})
            if val_acc > best_acc:
                best_acc, best_epoch = val_acc, epoch
                best_state = copy.deepcopy(self.model.state_dict())
            logger.info(
                f"Fold {self.split.index} epoch {epoch + 1}/{epochs}: loss {losses['total']:.4f}, "
                f"val acc {val_acc:.4f}, lr {lr:.6f}"
            )

        self.model.load_state_dict(best_state)
        report = evaluate(self.model, self.test_set, self.cfg, fold=self.split.index)
        logger.info(
            f"Fold {self.split.index} done: best epoch {best_epoch + 1}, test acc "
            f"ARMS2 {report.arms2.accuracy:.4f} / CFH {report.cfh.accuracy:.4f}"
        )
        return FoldResult(self.split, report, best_epoch, best_state, self.model, history)


def run_fold(cfg: RunConfig, patients: Sequence[PatientSet], split: FoldSplit) -> FoldResult:
    return FoldRunner(cfg, patients, split).run()


@dataclass
class CrossValidationResult:
    folds: List[FoldResult]
    mean: MetricsReport

    @property
    def reports(self) -> List[MetricsReport]:
        return [f.report for f in self.folds]


def run_cross_validation(
    cfg: RunConfig, patients: Sequence[PatientSet], out_dir: Optional[Path] = None
) -> CrossValidationResult:
    folds = make_folds([p.id for p in patients], cfg.folds, cfg.seed)
    results = []
    for split in folds:
        try:
            result = run_fold(cfg, patients, split)
        except Exception as e:
            logger.error(f"Fold {split.index} failed: {str(e)}")
            raise
        results.append(result)
        if out_dir is not None:
            save_fold_outputs(result, Path(out_dir))

    cv = CrossValidationResult(results, aggregate([r.report for r in results]))
    if out_dir is not None:
        rows = {f"Fold {r.split.index}": r.report for r in results}
        rows["Mean"] = cv.mean
        write_tables(rows, Path(out_dir), "metrics")
    logger.info(
        f"Cross-validation mean accuracy: ARMS2 {cv.mean.arms2.accuracy:.4f}, CFH {cv.mean.cfh.accuracy:.4f}"
    )
    return cv


def save_fold_outputs(result: FoldResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    index = result.split.index
    pd.DataFrame(result.history).to_csv(
        out_dir / f"history_fold{index}.tsv", sep="\t", index=False, float_format="%.8g", lineterminator="\n"
    )
    save_checkpoint(result.model, out_dir / f"fold{index}.ckpt")


def ablation_rows(axis: AblationAxis) -> Dict[str, dict]:
    axis = AblationAxis(axis)
    if axis is AblationAxis.SELECTION_RATE:
        return {f"Selection rate {round(rate * 100)}%": {"selection_rate": rate} for rate in SELECTION_RATE_GRID}
    if axis is AblationAxis.TSIA:
        return {"Without TSIA": {"tsia": False}, "With TSIA": {"tsia": True}}
    if axis is AblationAxis.RECORD:
        return {
            "Without record info": {"record_info": False},
            "With record info": {"record_info": True, "record_reconstruction": False},
            "With record info + Reconstruction": {"record_info": True, "record_reconstruction": True},
        }
    if axis is AblationAxis.ST:
        return {"Without ST": {"st_enabled": False}, "With ST": {"st_enabled": True}}
    return {
        "None": {"mask_mode": "none"},
        "Without OCT": {"mask_mode": "without_oct"},
        "Without Fundus": {"mask_mode": "without_fundus"},
    }


def ablation_sweep(
    cfg: RunConfig, patients: Sequence[PatientSet], axis: AblationAxis, out_dir: Optional[Path] = None
) -> Dict[str, MetricsReport]:
    """Cross-validate once per axis value; returns the mean report per row"""
    axis = AblationAxis(axis)
    rows = {}
    for label, update in ablation_rows(axis).items():
        logger.info(f"Ablation {axis.value}: running '{label}'")
        row_cfg = RunConfig(**{**cfg.model_dump(), **update})
        rows[label] = run_cross_validation(row_cfg, patients).mean
    if out_dir is not None:
        write_tables(rows, Path(out_dir), f"ablation_{axis.value}")
    return rows
