"""
Command implementations behind the CLI.

Each command takes a validated RunConfig, writes the effective config next to
its outputs and returns what it produced.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from .config import write_config
from .errors import ConfigError, DatasetError
from .models import MSViT, build_model
from .schemas import AblationAxis, MetricsReport, RunConfig
from .services.checkpoint import load_checkpoint
from .services.dataset import PatientSet, load_dataset, read_annotations
from .services.metrics import write_tables
from .services.synthetic import generate_synthetic
from .services.training import (
    CrossValidationResult,
    ablation_sweep,
    evaluate,
    make_folds,
    run_cross_validation,
)
from .services.visualization import planted_region_stats, sample_maps, write_maps

DEFAULT_VISUALIZE_COUNT = 8
REGION_COLUMNS = ["id", "drusen", "disc", "band", "background"]

logger = logging.getLogger(__name__)


def _load_patients(cfg: RunConfig) -> List[PatientSet]:
    patients = load_dataset(Path(cfg.data_dir))
    if not patients:
        raise DatasetError(f"dataset {cfg.data_dir} has no patient sets")
    return patients


def _load_model(cfg: RunConfig, checkpoint: Path) -> MSViT:
    model = build_model(cfg.mme(), cfg.st(), cfg.dtype, seed=cfg.seed)
    return load_checkpoint(model, checkpoint)


def cmd_generate(cfg: RunConfig) -> Path:
    out = Path(cfg.data_dir)
    generate_synthetic(cfg.synthetic(), out)
    write_config(cfg, out)
    return out


def cmd_train(cfg: RunConfig) -> CrossValidationResult:
    out = Path(cfg.out_dir)
    write_config(cfg, out)
    return run_cross_validation(cfg, _load_patients(cfg), out)


def cmd_eval(cfg: RunConfig, checkpoint: Path, fold: int) -> MetricsReport:
    """Re-evaluate one fold's test split; folds are recomputed from (ids, seed)"""
    if not 0 <= fold < cfg.folds:
        raise ConfigError(f"fold must be in [0, {cfg.folds}), got {fold}")
    patients = _load_patients(cfg)
    split = make_folds([p.id for p in patients], cfg.folds, cfg.seed)[fold]
    by_id = {p.id: p for p in patients}
    model = _load_model(cfg, checkpoint)
    report = evaluate(model, [by_id[i] for i in split.test_ids], cfg, fold=fold)

    out = Path(cfg.out_dir)
    write_config(cfg, out)
    write_tables({f"Fold {fold}": report}, out, f"eval_fold{fold}")
    logger.info(
        f"Fold {fold} test accuracy: ARMS2 {report.arms2.accuracy:.4f}, CFH {report.cfh.accuracy:.4f}"
    )
    return report


def cmd_ablate(cfg: RunConfig, axis: AblationAxis) -> Dict[str, MetricsReport]:
    out = Path(cfg.out_dir)
    write_config(cfg, out)
    return ablation_sweep(cfg, _load_patients(cfg), AblationAxis(axis), out)


def select_patients(patients: Sequence[PatientSet], ids: Optional[Sequence[str]]) -> List[PatientSet]:
    if ids:
        by_id = {p.id: p for p in patients}
        unknown = [i for i in ids if i not in by_id]
        if unknown:
            raise DatasetError(f"unknown patient ids: {', '.join(unknown)}")
        return [by_id[i] for i in ids]
    both = [p for p in patients if p.has_fundus and p.has_oct]
    return both[:DEFAULT_VISUALIZE_COUNT]


def cmd_visualize(cfg: RunConfig, checkpoint: Path, ids: Optional[Sequence[str]] = None) -> List[Path]:
    patients = select_patients(_load_patients(cfg), ids)
    if not patients:
        raise DatasetError("no patient sets to visualize")
    model = _load_model(cfg, checkpoint)
    maps = sample_maps(model, patients, cfg.dtype)

    out = Path(cfg.out_dir)
    write_config(cfg, out)
    paths = []
    for patient, fm in zip(patients, maps):
        paths += write_maps(fm, patient.id, out)

    try:
        annotations = read_annotations(Path(cfg.data_dir))
    except FileNotFoundError:
        logger.warning(f"No annotations in {cfg.data_dir}; skipping region statistics")
        return paths

    rows = []
    for patient, fm in zip(patients, maps):
        if patient.id in annotations.index:
            stats = planted_region_stats(fm, annotations.loc[patient.id], cfg.patch_size)
            rows.append({"id": patient.id, **stats})
    stats_path = out / "region_stats.tsv"
    pd.DataFrame(rows, columns=REGION_COLUMNS).to_csv(
        stats_path, sep="\t", index=False, float_format="%.6f", lineterminator="\n"
    )
    paths.append(stats_path)
    logger.info(f"Wrote {len(maps)} selection maps and region statistics to {out}")
    return paths
