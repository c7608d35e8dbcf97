import logging
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from ..schemas import GeneMetrics, MetricsReport

GENES = ("arms2", "cfh")
TABLE_COLUMNS = ["Method", "Accuracy", "Precision", "Recall", "Specificity", "F-score"]

logger = logging.getLogger(__name__)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> GeneMetrics:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return GeneMetrics(
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        precision=precision,
        recall=recall,
        specificity=_ratio(tn, tn + fp),
        f_score=_ratio(2 * precision * recall, precision + recall),
    )


def compute_metrics(preds: Sequence[int], labels: Sequence[int]) -> GeneMetrics:
    tn, fp, fn, tp = confusion_matrix(np.asarray(labels), np.asarray(preds), labels=[0, 1]).ravel()
    return metrics_from_counts(int(tp), int(fp), int(fn), int(tn))


def build_report(preds: Dict[str, Sequence[int]], labels: Dict[str, Sequence[int]], fold=None) -> MetricsReport:
    return MetricsReport(
        arms2=compute_metrics(preds["arms2"], labels["arms2"]),
        cfh=compute_metrics(preds["cfh"], labels["cfh"]),
        fold=fold,
    )


def aggregate(reports: List[MetricsReport]) -> MetricsReport:
    """Mean of each metric over folds"""
    means = {}
    for gene in GENES:
        frame = pd.DataFrame([getattr(r, gene).model_dump() for r in reports])
        means[gene] = GeneMetrics(**frame.mean().clip(0.0, 1.0).to_dict())
    return MetricsReport(**means)


def metrics_table(rows: Dict[str, MetricsReport], gene: str) -> pd.DataFrame:
    """One row per method, columns mirroring the published result tables"""
    records = []
    for method, report in rows.items():
        m = getattr(report, gene)
        records.append([method, m.accuracy, m.precision, m.recall, m.specificity, m.f_score])
    return pd.DataFrame(records, columns=TABLE_COLUMNS)


def write_tables(rows: Dict[str, MetricsReport], directory: Path, stem: str) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for gene in GENES:
        path = directory / f"{stem}_{gene}.tsv"
        metrics_table(rows, gene).to_csv(path, sep="\t", index=False, float_format="%.6f", lineterminator="\n")
        paths.append(path)

    kv_path = directory / f"{stem}.kv"
    lines = []
    for method, report in rows.items():
        key = method.lower().replace(" ", "_").replace("+", "plus")
        for gene in GENES:
            for name, value in getattr(report, gene).model_dump().items():
                lines.append(f"{key}.{gene}.{name} = {value!r}")
    kv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.append(kv_path)
    logger.info(f"Wrote {stem} tables for {len(rows)} rows to {directory}")
    return paths
