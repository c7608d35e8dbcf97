"""
Selection-frequency maps.

A token's importance is the number of ST blocks that selected it, f_i in
[0, M]. Maps are rendered as grayscale PGM where white means selected by every
block.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image

from ..errors import ConfigError
from ..models import DTYPES, MSViT
from ..schemas import Modality
from .dataset import PatientSet
from .selective_transformer import SelectionTrace
from .synthetic import disk_mask, parse_bands, parse_points
from .tsia import resolve_eval

logger = logging.getLogger(__name__)


@dataclass
class FrequencyMap:
    fundus: np.ndarray  # [grid, grid]
    oct: np.ndarray  # [grid, grid]
    table: np.ndarray  # [t]; table tokens always participate
    blocks: int

    def grid(self, modality: Modality) -> np.ndarray:
        return self.fundus if Modality(modality) is Modality.FUNDUS else self.oct


def accumulate(trace: SelectionTrace, coords: Sequence[Tuple[int, int]], sample: int = 0, n_table: int = 0) -> FrequencyMap:
    """f_i = sum over blocks of 1[i selected], laid out on each modality's patch grid"""
    counts = trace.frequencies()[sample].numpy()
    n_patches = len(coords) // 2
    grid = max(row for row, _ in coords) + 1
    maps = [np.zeros((grid, grid), dtype=np.int64), np.zeros((grid, grid), dtype=np.int64)]
    for i, (row, col) in enumerate(coords):
        maps[i // n_patches][row, col] = counts[i]
    return FrequencyMap(maps[0], maps[1], np.full(n_table, len(trace), dtype=np.int64), len(trace))


def render(fm: FrequencyMap, blocks: int, scale_px: int = 8) -> Dict[str, np.ndarray]:
    """pixel = round_half_up(255 * f / M); each token becomes a scale_px square"""
    images = {}
    for modality in (Modality.FUNDUS, Modality.OCT):
        values = np.asarray(fm.grid(modality), dtype=np.float64)
        pixels = np.floor(255.0 * values / blocks + 0.5).astype(np.uint8)
        images[modality.value] = np.kron(pixels, np.ones((scale_px, scale_px), dtype=np.uint8))
    return images


def write_maps(fm: FrequencyMap, sample_id: str, out_dir: Path, scale_px: int = 8) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for modality, pixels in render(fm, fm.blocks, scale_px).items():
        path = out_dir / f"{sample_id}.{modality}.freq.pgm"
        Image.fromarray(pixels).save(path, format="PPM")
        paths.append(path)
    return paths


@torch.no_grad()
def sample_maps(model: MSViT, patients: Sequence[PatientSet], dtype: str = "float32") -> List[FrequencyMap]:
    if not model.st_cfg.enabled:
        raise ConfigError("selection maps need the ST module (st_enabled = true)")
    if not patients:
        return []
    samples = [resolve_eval(p) for p in patients]
    torch_dtype = DTYPES[dtype]
    fundus = torch.from_numpy(np.stack([s.fundus for s in samples])).to(torch_dtype)
    oct_image = torch.from_numpy(np.stack([s.oct for s in samples])).to(torch_dtype)
    record = torch.from_numpy(np.stack([s.record for s in samples])).to(torch_dtype)

    was_training = model.training
    model.eval()
    _, trace = model(fundus, oct_image, record)
    model.train(was_training)

    logger.info(f"Computed selection maps for {len(samples)} patient sets over {len(trace)} blocks")
    coords = model.embedding.coords
    n_table = model.mme_cfg.n_table_tokens
    return [accumulate(trace, coords, i, n_table) for i in range(len(samples))]


def batch_mean_map(samples: Sequence[PatientSet], model: MSViT, dtype: str = "float32") -> FrequencyMap:
    maps = sample_maps(model, samples, dtype)
    if not maps:
        raise ConfigError("batch_mean_map needs at least one sample")
    return FrequencyMap(
        fundus=np.mean([m.fundus for m in maps], axis=0),
        oct=np.mean([m.oct for m in maps], axis=0),
        table=np.mean([m.table for m in maps], axis=0),
        blocks=maps[0].blocks,
    )


def region_means(grid: np.ndarray, cells: Iterable[Tuple[int, int]]) -> float:
    cells = sorted(set(cells))
    if not cells:
        return float("nan")
    return float(np.mean([grid[r, c] for r, c in cells]))


def disc_cells(annotation: pd.Series, patch_size: int, grid: int) -> List[Tuple[int, int]]:
    """Every patch cell the planted disc overlaps"""
    centers = parse_points(annotation["disc"])
    if not centers:
        return []
    radius = int(annotation.get("disc_radius", 0) or 0)
    rows, cols = np.nonzero(disk_mask(grid * patch_size, centers[0], radius))
    return sorted(set(zip((rows // patch_size).tolist(), (cols // patch_size).tolist())))


def planted_region_stats(fm: FrequencyMap, annotation: pd.Series, patch_size: int) -> Dict[str, float]:
    """Mean frequency over annotated drusen / disc cells and OCT band / non-band rows"""
    drusen = [(r // patch_size, c // patch_size) for r, c in parse_points(annotation["drusen"])]
    disc = disc_cells(annotation, patch_size, fm.fundus.shape[0])
    grid = fm.oct.shape[0]
    bands = parse_bands(annotation["bands"])
    band_rows, other_rows = set(), set(range(grid))
    if bands:
        top, bottom = bands[0]
        band_rows = set(range(top // patch_size, bottom // patch_size + 1))
        other_rows -= band_rows
    return {
        "drusen": region_means(fm.fundus, drusen),
        "disc": region_means(fm.fundus, disc),
        "band": region_means(fm.oct, [(r, c) for r in band_rows for c in range(grid)]),
        "background": region_means(fm.oct, [(r, c) for r in other_rows for c in range(grid)]) if bands else float("nan"),
    }
