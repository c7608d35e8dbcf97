import numpy as np
import pytest
import torch

from app.schemas import MmeConfig, RunConfig, StConfig, SyntheticConfig
from app.services.dataset import PatientSet, RawRecord, load_dataset
from app.services.synthetic import generate_synthetic

TINY = {
    "image_size": 16,
    "patch_size": 8,
    "embed_dim": 8,
    "record_fields": 3,
    "blocks": 2,
    "heads": 2,
    "local_dim": 4,
    "mlp_ratio": 2.0,
    "epochs": 2,
    "batch_size": 4,
    "n_sets": 20,
    "oct_fraction": 0.5,
    "missing_fundus_fraction": 0.1,
    "dtype": "float64",
}


@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def mme_cfg():
    return MmeConfig(image_size=16, patch_size=8, embed_dim=8, record_fields=3)


@pytest.fixture
def st_cfg():
    return StConfig(blocks=2, heads=2, embed_dim=8, local_dim=4, selection_rate=0.5, mlp_ratio=2.0)


@pytest.fixture
def run_cfg(tmp_path):
    return RunConfig(**TINY, data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "runs"))


@pytest.fixture
def dataset_dir(run_cfg):
    return generate_synthetic(run_cfg.synthetic(), run_cfg.data_dir)


@pytest.fixture
def patients(dataset_dir):
    return load_dataset(dataset_dir)


def make_patient(pid, arms2=0, cfh=0, age=60.0, gender=0, smoking=0, fundus=True, n_oct=1, size=16, fill=None):
    """In-memory patient with constant images; fill defaults to a value derived from the id"""
    value = fill if fill is not None else (sum(map(ord, pid)) % 200 + 20) / 255.0
    return PatientSet(
        id=pid,
        fundus=np.full((3, size, size), value) if fundus else None,
        oct_list=[np.full((1, size, size), value + j / 255.0) for j in range(n_oct)],
        record=RawRecord(age, gender, smoking),
        label_arms2=arms2,
        label_cfh=cfh,
    )


@pytest.fixture
def patient_factory():
    return make_patient


@pytest.fixture
def image_batch():
    gen = torch.Generator().manual_seed(0)
    fundus = torch.rand(2, 3, 16, 16, generator=gen)
    oct_image = torch.rand(2, 1, 16, 16, generator=gen)
    record = torch.rand(2, 3, generator=gen)
    return fundus, oct_image, record


@pytest.fixture
def tiny_values():
    return dict(TINY)
