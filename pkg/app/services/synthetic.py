"""
Synthetic surrogate for the private clinical cohort.

Fundus images carry bright circular "drusen" whose count depends on the ARMS2
label and a dark "optic disc" placed independently of any label. OCT images
carry a bright horizontal cross-section band whose thickness depends on the CFH
label, plus rows of uniform speckle. Ages shift with both labels and smoking is
more frequent for ARMS2 carriers. Output is seed-deterministic.
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from ..schemas import SyntheticConfig
from .dataset import ANNOTATIONS_NAME, MISSING, write_image, write_manifest

FUNDUS_BASE = np.array([0.55, 0.27, 0.15])
DRUSEN_COLOR = np.array([0.95, 0.90, 0.55])
DISC_COLOR = np.array([0.10, 0.06, 0.05])
# drusen counts per ARMS2 class, inclusive bounds
DRUSEN_COUNTS = {1: (4, 7), 0: (0, 2)}
# OCT band thickness per CFH class at 48 px, inclusive bounds
BAND_THICKNESS = {1: (10, 14), 0: (3, 6)}
SPECKLE_ROW_PROB = 0.3

logger = logging.getLogger(__name__)


def disk_mask(size: int, center: Tuple[int, int], radius: int) -> np.ndarray:
    rows, cols = np.ogrid[:size, :size]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2


def draw_fundus(size: int, arms2: int, rng: np.random.Generator):
    """Returns the image plus the drusen centers, disc center and disc radius"""
    scale = size / 48
    image = FUNDUS_BASE[:, None, None] + rng.normal(0.0, 0.02, (3, size, size))

    disc_radius = max(2, round(5 * scale))
    disc = (
        int(rng.integers(disc_radius + 1, size - disc_radius - 1)),
        int(rng.integers(disc_radius + 1, size - disc_radius - 1)),
    )
    image[:, disk_mask(size, disc, disc_radius)] = DISC_COLOR[:, None]

    low, high = DRUSEN_COUNTS[arms2]
    count = int(rng.integers(low, high + 1))
    radius = max(1, round(2 * scale))
    centers: List[Tuple[int, int]] = []
    for _ in range(100 * max(count, 1)):
        if len(centers) == count:
            break
        center = (int(rng.integers(radius, size - radius)), int(rng.integers(radius, size - radius)))
        if np.hypot(center[0] - disc[0], center[1] - disc[1]) <= disc_radius + radius + 1:
            continue
        centers.append(center)
        image[:, disk_mask(size, center, radius)] = DRUSEN_COLOR[:, None]

    return np.clip(image, 0.0, 1.0), centers, disc, disc_radius


def draw_oct(size: int, cfh: int, rng: np.random.Generator):
    """Returns the image plus the band's first and last row"""
    scale = size / 48
    image = 0.05 + rng.normal(0.0, 0.01, (1, size, size))

    low, high = BAND_THICKNESS[cfh]
    thickness = max(1, round(int(rng.integers(low, high + 1)) * scale))
    top = int(rng.integers(int(size * 0.35), int(size * 0.65) - thickness // 2 + 1))
    bottom = min(size - 1, top + thickness - 1)
    image[:, top : bottom + 1, :] = 0.8 + rng.normal(0.0, 0.05, (1, bottom - top + 1, size))

    for row in range(size):
        if top <= row <= bottom:
            continue
        if rng.random() < SPECKLE_ROW_PROB:
            image[0, row, :] = rng.random(size) * 0.6

    return np.clip(image, 0.0, 1.0), (top, bottom)


class SyntheticDatasetBuilder:
    def __init__(self, cfg: SyntheticConfig, output_dir: Path):
        self.cfg = cfg
        self.output_dir = Path(output_dir)
        self.rng = np.random.default_rng(cfg.seed)

    def plan_cohort(self) -> pd.DataFrame:
        """Labels, modality availability and records for every patient"""
        n = self.cfg.n_sets
        rng = self.rng
        arms2 = rng.permutation(np.arange(n) < n // 2).astype(int)
        cfh = rng.permutation(np.arange(n) < n // 2).astype(int)

        n_oct = max(1, round(n * self.cfg.oct_fraction))
        oct_holders = rng.choice(n, size=n_oct, replace=False)
        n_missing = min(n_oct, round(n * self.cfg.missing_fundus_fraction))
        no_fundus = set(rng.choice(oct_holders, size=n_missing, replace=False).tolist())
        oct_counts = np.zeros(n, dtype=int)
        oct_counts[oct_holders] = rng.integers(1, self.cfg.max_oct + 1, size=n_oct)

        age = np.clip(55 + 12 * cfh + 4 * arms2 + rng.normal(0.0, 4.0, n), 40, 95).round(1)
        gender = rng.integers(0, 2, size=n)
        smoking = (rng.random(n) < np.where(arms2 == 1, 0.65, 0.25)).astype(int)

        def alleles(labels):
            return np.where(labels == 1, 2, rng.integers(0, 2, size=n))

        plan = pd.DataFrame(
            {
                "id": [f"P{i:04d}" for i in range(n)],
                "has_fundus": [i not in no_fundus for i in range(n)],
                "n_oct": oct_counts,
                "age": age,
                "gender": gender,
                "smoking": smoking,
                "arms2": arms2,
                "cfh": cfh,
            }
        )
        plan["arms2_alleles"] = alleles(arms2)
        plan["cfh_alleles"] = alleles(cfh)
        logger.info(
            f"Planned {n} patient sets: {int(plan['has_fundus'].sum())} with fundus, {n_oct} with OCT"
        )
        return plan

    def render_images(self, plan: pd.DataFrame):
        image_dir = self.output_dir / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        size = self.cfg.image_size
        manifest_rows, annotation_rows = [], []

        for i, row in enumerate(plan.itertuples(index=False)):
            fundus_path: Optional[str] = None
            drusen, disc, disc_radius = [], None, 0
            if row.has_fundus:
                image, drusen, disc, disc_radius = draw_fundus(size, int(row.arms2), self.rng)
                fundus_path = f"images/{row.id}.fundus.ppm"
                write_image(self.output_dir / fundus_path, image)

            oct_paths, bands = [], []
            for j in range(int(row.n_oct)):
                image, band = draw_oct(size, int(row.cfh), self.rng)
                path = f"images/{row.id}.oct{j}.pgm"
                write_image(self.output_dir / path, image)
                oct_paths.append(path)
                bands.append(band)

            manifest_rows.append(
                {
                    "id": row.id,
                    "fundus_path": fundus_path or MISSING,
                    "oct_paths": ",".join(oct_paths) or MISSING,
                    "age": float(row.age),
                    "gender": int(row.gender),
                    "smoking": int(row.smoking),
                    "arms2_alleles": int(row.arms2_alleles),
                    "cfh_alleles": int(row.cfh_alleles),
                }
            )
            annotation_rows.append(
                {
                    "id": row.id,
                    "drusen": ";".join(f"{r}:{c}" for r, c in drusen) or MISSING,
                    "disc": f"{disc[0]}:{disc[1]}" if disc else MISSING,
                    "disc_radius": str(disc_radius),
                    "bands": ",".join(f"{top}:{bottom}" for top, bottom in bands) or MISSING,
                }
            )

            if (i + 1) % 200 == 0:
                logger.info(f"Rendered {i + 1}/{len(plan)} patient sets")

        return manifest_rows, annotation_rows

    def run(self) -> Path:
        logger.info(f"Generating synthetic dataset in {self.output_dir} (seed {self.cfg.seed})")
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            plan = self.plan_cohort()
            manifest_rows, annotation_rows = self.render_images(plan)
            write_manifest(manifest_rows, self.output_dir)
            pd.DataFrame(annotation_rows).to_csv(
                self.output_dir / ANNOTATIONS_NAME, sep="\t", index=False, lineterminator="\n"
            )
        except OSError as e:
            logger.error(f"Dataset generation failed: {str(e)}")
            raise
        logger.info(f"Synthetic dataset completed: {len(manifest_rows)} patient sets")
        return self.output_dir


def generate_synthetic(cfg: SyntheticConfig, output_dir: Path) -> Path:
    return SyntheticDatasetBuilder(cfg, output_dir).run()


def parse_points(cell: str) -> List[Tuple[int, int]]:
    if not cell or cell == MISSING:
        return []
    return [tuple(int(v) for v in point.split(":")) for point in cell.split(";")]


def parse_bands(cell: str) -> List[Tuple[int, int]]:
    if not cell or cell == MISSING:
        return []
    return [tuple(int(v) for v in band.split(":")) for band in cell.split(",")]
