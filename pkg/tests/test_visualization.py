import math

import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from app.errors import ConfigError
from app.models import build_model
from app.schemas import StConfig
from app.services.selective_transformer import SelectionTrace
from app.services.visualization import (
    FrequencyMap,
    accumulate,
    batch_mean_map,
    disc_cells,
    planted_region_stats,
    region_means,
    render,
    sample_maps,
    write_maps,
)

COORDS = [(0, 0), (0, 1), (1, 0), (1, 1)] * 2


def trace_of(*blocks):
    trace = SelectionTrace(n_image=8)
    for selected in blocks:
        trace.append(torch.tensor(selected))
    return trace


def test_accumulate_places_counts_on_each_grid():
    trace = trace_of([[0, 5], [1, 2]], [[0, 7], [1, 4]], [[3, 5], [6, 7]])
    fm = accumulate(trace, COORDS, sample=0, n_table=3)
    assert fm.fundus.tolist() == [[2, 0], [0, 1]]
    assert fm.oct.tolist() == [[0, 2], [0, 1]]
    assert fm.table.tolist() == [3, 3, 3]
    assert fm.blocks == 3

    second = accumulate(trace, COORDS, sample=1)
    assert second.fundus.tolist() == [[0, 2], [1, 0]]
    assert second.oct.tolist() == [[1, 0], [1, 1]]


@pytest.mark.parametrize("blocks,count,pixel", [(4, 4, 255), (4, 0, 0), (3, 1, 85), (3, 2, 170), (4, 1, 64)])
def test_render_rounds_half_up(blocks, count, pixel):
    fm = FrequencyMap(np.full((2, 2), count), np.zeros((2, 2)), np.zeros(0), blocks)
    images = render(fm, blocks, scale_px=3)
    assert images["fundus"].shape == (6, 6)
    assert images["fundus"].dtype == np.uint8
    assert (images["fundus"] == pixel).all()
    assert not images["oct"].any()


def test_written_maps_are_byte_stable(tmp_path):
    fm = FrequencyMap(np.array([[0, 1], [2, 4]]), np.array([[4, 4], [0, 3]]), np.zeros(3), 4)
    first = write_maps(fm, "P0001", tmp_path / "a", scale_px=4)
    second = write_maps(fm, "P0001", tmp_path / "b", scale_px=4)
    assert [p.name for p in first] == ["P0001.fundus.freq.pgm", "P0001.oct.freq.pgm"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes().startswith(b"P5")
    with Image.open(first[0]) as img:
        pixels = np.asarray(img)
    assert pixels.shape == (8, 8)
    assert pixels[0, 0] == 0 and pixels[7, 7] == 255 and pixels[4, 0] == 128


def test_model_maps_are_bounded(mme_cfg, st_cfg, patient_factory):
    model = build_model(mme_cfg, st_cfg, "float64", seed=0)
    group = [patient_factory("A", n_oct=1), patient_factory("B", n_oct=0), patient_factory("C", fundus=False)]
    maps = sample_maps(model, group, "float64")
    assert len(maps) == 3
    for fm in maps:
        for grid in (fm.fundus, fm.oct):
            assert grid.min() >= 0 and grid.max() <= st_cfg.blocks
        # k = 4 of the 8 image tokens per block
        assert fm.fundus.sum() + fm.oct.sum() == 4 * st_cfg.blocks

    mean = batch_mean_map(group, model, "float64")
    assert np.allclose(mean.fundus, np.mean([m.fundus for m in maps], axis=0))


def test_dense_model_has_no_maps(mme_cfg, st_cfg, patient_factory):
    dense = StConfig(**{**st_cfg.model_dump(), "enabled": False})
    with pytest.raises(ConfigError):
        sample_maps(build_model(mme_cfg, dense), [patient_factory("A")])


def test_region_statistics():
    fm = FrequencyMap(
        fundus=np.array([[4, 0, 0], [0, 2, 0], [0, 0, 1]]),
        oct=np.array([[0, 0, 0], [3, 3, 4], [1, 0, 0]]),
        table=np.zeros(3),
        blocks=4,
    )
    annotation = pd.Series({"drusen": "1:2;9:10", "disc": "20:20", "disc_radius": "2", "bands": "8:15,9:12"})
    stats = planted_region_stats(fm, annotation, patch_size=8)
    assert stats["drusen"] == pytest.approx(3.0)
    assert stats["disc"] == pytest.approx(1.0)
    assert stats["band"] == pytest.approx(10 / 3)
    assert stats["background"] == pytest.approx(1 / 6)


def test_disc_region_covers_every_overlapped_cell():
    fm = FrequencyMap(
        fundus=np.array([[4, 0, 0], [2, 0, 0], [0, 0, 1]]),
        oct=np.zeros((3, 3), dtype=np.int64),
        table=np.zeros(3),
        blocks=4,
    )
    annotation = pd.Series({"drusen": "-", "disc": "8:8", "disc_radius": "3", "bands": "-"})
    assert disc_cells(annotation, 8, 3) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert planted_region_stats(fm, annotation, patch_size=8)["disc"] == pytest.approx(1.5)


def test_no_disc_means_no_cells():
    annotation = pd.Series({"drusen": "-", "disc": "-", "disc_radius": "0", "bands": "-"})
    assert disc_cells(annotation, 8, 3) == []


def test_region_mean_of_nothing_is_nan():
    assert math.isnan(region_means(np.ones((2, 2)), []))


@pytest.mark.slow
def test_trained_model_prefers_drusen_over_optic_disc(tmp_path):
    from pathlib import Path

    from app.config import build_run_config
    from app.schemas import RunConfig
    from app.services.checkpoint import load_state_into
    from app.services.dataset import load_dataset, read_annotations
    from app.services.synthetic import generate_synthetic
    from app.services.training import make_folds, run_fold

    toy = Path(__file__).resolve().parent.parent / "configs" / "toy.env"
    cfg = build_run_config(toy, {"data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "runs")})
    generate_synthetic(cfg.synthetic(), cfg.data_dir)
    patients = load_dataset(cfg.data_dir)
    annotations = read_annotations(cfg.data_dir)
    by_id = {p.id: p for p in patients}

    wins = 0
    for seed in range(3):
        seeded = RunConfig(**{**cfg.model_dump(), "seed": seed})
        split = make_folds(list(by_id), seeded.folds, seed)[0]
        result = run_fold(seeded, patients, split)
        model = build_model(seeded.mme(), seeded.st(), seeded.dtype)
        load_state_into(model, result.best_state)

        shown = [by_id[i] for i in split.test_ids if by_id[i].has_fundus and annotations.loc[i, "drusen"] != "-"]
        stats = [
            planted_region_stats(fm, annotations.loc[p.id], seeded.patch_size)
            for p, fm in zip(shown, sample_maps(model, shown, seeded.dtype))
        ]
        wins += np.nanmean([s["drusen"] for s in stats]) > np.nanmean([s["disc"] for s in stats])
    assert wins >= 2


def test_accumulate_matches_recount_on_random_traces():
    rng = np.random.default_rng(0)
    for _ in range(50):
        blocks = [np.sort(rng.choice(8, size=(3,), replace=False))[None].repeat(2, axis=0) for _ in range(4)]
        trace = trace_of(*[b.tolist() for b in blocks])
        fm = accumulate(trace, COORDS, sample=1)
        for i, (row, col) in enumerate(COORDS):
            expected = sum(i in b[1] for b in blocks)
            assert (fm.fundus if i < 4 else fm.oct)[row, col] == expected


def test_single_sample_mean_is_its_own_map(mme_cfg, st_cfg, patient_factory):
    model = build_model(mme_cfg, st_cfg, "float64", seed=1)
    patient = patient_factory("A", n_oct=2)
    (own,) = sample_maps(model, [patient], "float64")
    mean = batch_mean_map([patient, patient], model, "float64")
    assert np.array_equal(mean.fundus, own.fundus) and np.array_equal(mean.oct, own.oct)
