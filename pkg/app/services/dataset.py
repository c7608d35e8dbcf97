"""
On-disk dataset: a tab-separated manifest plus binary PGM/PPM images.

Manifest columns: id, fundus_path, oct_paths, age, gender, smoking,
arms2_alleles, cfh_alleles. Missing images are written as "-", several OCT
paths are comma separated. Allele counts become binary labels at load time.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from ..errors import DatasetError

MANIFEST_NAME = "manifest.tsv"
ANNOTATIONS_NAME = "annotations.tsv"
MISSING = "-"
MANIFEST_COLUMNS = [
    "id",
    "fundus_path",
    "oct_paths",
    "age",
    "gender",
    "smoking",
    "arms2_alleles",
    "cfh_alleles",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawRecord:
    age: float
    gender: int
    smoking: int


@dataclass
class PatientSet:
    id: str
    fundus: Optional[np.ndarray]  # [3, H, W] in [0, 1]
    oct_list: List[np.ndarray]  # each [1, H, W] in [0, 1]
    record: RawRecord
    label_arms2: int
    label_cfh: int
    fundus_path: Optional[str] = field(default=None, repr=False)
    oct_paths: List[str] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.fundus is None and not self.oct_list:
            raise DatasetError(f"patient {self.id} has neither a fundus nor an OCT image")

    @property
    def label_pair(self) -> Tuple[int, int]:
        return (self.label_arms2, self.label_cfh)

    @property
    def has_fundus(self) -> bool:
        return self.fundus is not None

    @property
    def has_oct(self) -> bool:
        return bool(self.oct_list)


def binarize_alleles(count: int) -> int:
    """0 or 1 risk alleles -> class 0, 2 risk alleles -> class 1"""
    if count not in (0, 1, 2):
        raise DatasetError(f"risk allele count must be 0, 1 or 2, got {count}")
    return int(count == 2)


def binary_flag(name: str, value: int) -> int:
    if value not in (0, 1):
        raise DatasetError(f"{name} must be 0 or 1, got {value}")
    return int(value)


def parse_record(age, gender, smoking) -> RawRecord:
    years = float(age)
    if not np.isfinite(years) or years < 0:
        raise DatasetError(f"age must be a non-negative number, got {age}")
    return RawRecord(years, binary_flag("gender", int(gender)), binary_flag("smoking", int(smoking)))


def write_image(path: Path, image: np.ndarray) -> None:
    """Write a [C, H, W] array in [0, 1] as binary PPM (C=3) or PGM (C=1), maxval 255"""
    pixels = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 3:
        Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path, format="PPM")
    elif pixels.shape[0] == 1:
        Image.fromarray(np.ascontiguousarray(pixels[0])).save(path, format="PPM")
    else:
        raise DatasetError(f"cannot write an image with {pixels.shape[0]} channels")


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read image {path}: {str(e)}") from e
    if pixels.ndim == 2:
        pixels = pixels[None]
    else:
        pixels = pixels.transpose(2, 0, 1)
    return pixels.astype(np.float64) / 255.0


def write_manifest(rows: List[dict], directory: Path) -> Path:
    path = Path(directory) / MANIFEST_NAME
    df = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    df.to_csv(path, sep="\t", index=False, float_format="%.1f", lineterminator="\n", encoding="utf-8")
    return path


def read_manifest(directory: Path) -> pd.DataFrame:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        df = pd.read_csv(
            path,
            sep="\t",
            dtype={"id": str, "fundus_path": str, "oct_paths": str},
            keep_default_na=False,
            encoding="utf-8",
        )
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot parse manifest {path}: {str(e)}") from e

    missing_columns = [col for col in MANIFEST_COLUMNS if col not in df.columns]
    if missing_columns:
        logger.error(f"Missing required columns: {missing_columns}")
        raise DatasetError(f"manifest {path} lacks columns {missing_columns}")
    if df["id"].duplicated().any():
        raise DatasetError(f"manifest {path} contains duplicate ids")
    return df


def load_dataset(directory: Path) -> List[PatientSet]:
    directory = Path(directory)
    df = read_manifest(directory)
    logger.info(f"Loading {len(df)} patient sets from {directory}")

    patients = []
    for row in df.itertuples(index=False):
        fundus_path = None if row.fundus_path == MISSING else row.fundus_path
        oct_paths = [] if row.oct_paths == MISSING else row.oct_paths.split(",")
        try:
            record = parse_record(row.age, row.gender, row.smoking)
            label_arms2 = binarize_alleles(int(row.arms2_alleles))
            label_cfh = binarize_alleles(int(row.cfh_alleles))
        except (DatasetError, ValueError, TypeError) as e:
            logger.error(f"Invalid manifest row {row.id}: {str(e)}")
            raise DatasetError(f"row {row.id}: {str(e)}") from e
        patients.append(
            PatientSet(
                id=row.id,
                fundus=read_image(directory / fundus_path) if fundus_path else None,
                oct_list=[read_image(directory / p) for p in oct_paths],
                record=record,
                label_arms2=label_arms2,
                label_cfh=label_cfh,
                fundus_path=fundus_path,
                oct_paths=oct_paths,
            )
        )

    with_oct = sum(p.has_oct for p in patients)
    logger.info(f"Loaded {len(patients)} patient sets ({with_oct} with OCT)")
    return patients


def read_annotations(directory: Path) -> pd.DataFrame:
    path = Path(directory) / ANNOTATIONS_NAME
    if not path.is_file():
        raise FileNotFoundError(f"annotations not found: {path}")
    return pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False).set_index("id")
