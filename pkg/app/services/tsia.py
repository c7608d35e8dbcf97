"""
Sample resolution for training and evaluation.

Every model input needs exactly one fundus slot and one OCT slot. During
training, table-based similar image augmentation (TSIA) fills them: a patient's
own images are swapped for the all-zero pseudo-image half of the time, and a
missing modality is borrowed from the training patient with the same label pair
whose normalized record is most cosine-similar. Evaluation never borrows.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from ..schemas import MaskMode, Modality
from .dataset import PatientSet, RawRecord

OWN = "own"
PSEUDO = "pseudo"
BORROWED_PREFIX = "borrowed-from:"
FUNDUS_CHANNELS = 3
OCT_CHANNELS = 1

logger = logging.getLogger(__name__)


@dataclass
class ResolvedSample:
    id: str
    fundus: np.ndarray  # [3, H, W]
    oct: np.ndarray  # [1, H, W]
    record: np.ndarray  # normalized, [t]
    label_arms2: int
    label_cfh: int
    fundus_source: str
    oct_source: str


def normalize_record(raw: RawRecord) -> np.ndarray:
    """[age / 100 clamped to [0, 1], gender, smoking]"""
    return np.array([min(max(raw.age / 100.0, 0.0), 1.0), float(raw.gender), float(raw.smoking)])


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between a and b; -inf when either is the zero vector"""
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        return float("-inf")
    return float(np.dot(a, b) / norm)


def pseudo_image(channels: int, size: Tuple[int, int]) -> np.ndarray:
    return np.zeros((channels, *size))


def image_size(patient: PatientSet) -> Tuple[int, int]:
    image = patient.fundus if patient.has_fundus else patient.oct_list[0]
    return image.shape[-2:]


def _images(patient: PatientSet, modality: Modality) -> List[np.ndarray]:
    if modality is Modality.FUNDUS:
        return [patient.fundus] if patient.has_fundus else []
    return list(patient.oct_list)


class DonorPool:
    """Training patients grouped by joint (ARMS2, CFH) label pair.

    The only object TSIA consults, so building it from the training split alone
    keeps validation and test patients out of every resolution.
    """

    def __init__(self, patients: Sequence[PatientSet]):
        self._groups: Dict[Tuple[int, int], List[PatientSet]] = defaultdict(list)
        for patient in sorted(patients, key=lambda p: p.id):
            self._groups[patient.label_pair].append(patient)
        self._records = {p.id: normalize_record(p.record) for p in patients}
        self.size = len(self._records)

    def find_donor(self, patient: PatientSet, modality: Modality) -> Optional[PatientSet]:
        """Most record-similar patient with the same label pair holding `modality`; ties by lowest id"""
        target = normalize_record(patient.record)
        best, best_sim = None, float("-inf")
        for candidate in self._groups.get(patient.label_pair, []):
            if candidate.id == patient.id or not _images(candidate, modality):
                continue
            sim = cosine_similarity(target, self._records[candidate.id])
            if sim > best_sim:
                best, best_sim = candidate, sim
        return best


def _equal_choice(images: List[np.ndarray], channels: int, size, rng: np.random.Generator, source: str):
    """Pseudo-image with probability 1/2, otherwise a uniformly chosen real image"""
    if rng.random() < 0.5:
        return pseudo_image(channels, size), PSEUDO
    return images[int(rng.integers(len(images)))], source


def _resolve_slot(patient, modality, channels, size, pool, rng):
    own = _images(patient, modality)
    if own:
        if modality is Modality.FUNDUS:
            return own[0], OWN
        return _equal_choice(own, channels, size, rng, OWN)

    donor = pool.find_donor(patient, modality)
    if donor is None:
        logger.debug(f"No {modality.value} donor for {patient.id}; using the pseudo-image")
        return pseudo_image(channels, size), PSEUDO
    return _equal_choice(_images(donor, modality), channels, size, rng, f"{BORROWED_PREFIX}{donor.id}")


def tsia_resolve(patient: PatientSet, pool: DonorPool, rng: np.random.Generator) -> ResolvedSample:
    size = image_size(patient)
    fundus, fundus_source = _resolve_slot(patient, Modality.FUNDUS, FUNDUS_CHANNELS, size, pool, rng)
    oct_image, oct_source = _resolve_slot(patient, Modality.OCT, OCT_CHANNELS, size, pool, rng)
    return ResolvedSample(
        id=patient.id,
        fundus=fundus,
        oct=oct_image,
        record=normalize_record(patient.record),
        label_arms2=patient.label_arms2,
        label_cfh=patient.label_cfh,
        fundus_source=fundus_source,
        oct_source=oct_source,
    )


def resolve_plain(patient: PatientSet, rng: np.random.Generator) -> ResolvedSample:
    """Training without TSIA: a uniformly chosen own image, or the pseudo-image"""
    size = image_size(patient)
    slots = []
    for modality, channels in ((Modality.FUNDUS, FUNDUS_CHANNELS), (Modality.OCT, OCT_CHANNELS)):
        own = _images(patient, modality)
        if own:
            slots.append((own[int(rng.integers(len(own)))], OWN))
        else:
            slots.append((pseudo_image(channels, size), PSEUDO))
    (fundus, fundus_source), (oct_image, oct_source) = slots
    return ResolvedSample(
        patient.id, fundus, oct_image, normalize_record(patient.record),
        patient.label_arms2, patient.label_cfh, fundus_source, oct_source,
    )


def resolve_eval(patient: PatientSet) -> ResolvedSample:
    """Deterministic: own fundus, own first OCT, pseudo-images where missing"""
    size = image_size(patient)
    fundus = (patient.fundus, OWN) if patient.has_fundus else (pseudo_image(FUNDUS_CHANNELS, size), PSEUDO)
    oct_slot = (patient.oct_list[0], OWN) if patient.has_oct else (pseudo_image(OCT_CHANNELS, size), PSEUDO)
    return ResolvedSample(
        patient.id, fundus[0], oct_slot[0], normalize_record(patient.record),
        patient.label_arms2, patient.label_cfh, fundus[1], oct_slot[1],
    )


def mask_modality(sample: ResolvedSample, mode: MaskMode) -> ResolvedSample:
    mode = MaskMode(mode)
    if mode is MaskMode.WITHOUT_OCT:
        return replace(sample, oct=np.zeros_like(sample.oct), oct_source=PSEUDO)
    if mode is MaskMode.WITHOUT_FUNDUS:
        return replace(sample, fundus=np.zeros_like(sample.fundus), fundus_source=PSEUDO)
    return sample


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def augment_train(sample: ResolvedSample, rng: np.random.Generator) -> ResolvedSample:
    """Random horizontal flip, decided independently for the fundus and the OCT slot"""
    fundus = flip_horizontal(sample.fundus) if rng.random() < 0.5 else sample.fundus
    oct_image = flip_horizontal(sample.oct) if rng.random() < 0.5 else sample.oct
    return replace(sample, fundus=fundus, oct=oct_image)


class PatientDataset(Dataset):
    """Resolves, augments and masks patients into model-ready tensors.

    Training samples draw from a generator reseeded per epoch with
    (seed, epoch), so a run's data stream is reproducible.
    """

    def __init__(
        self,
        patients: Sequence[PatientSet],
        train: bool,
        pool: Optional[DonorPool] = None,
        tsia: bool = True,
        mask_mode: MaskMode = MaskMode.NONE,
        seed: int = 0,
    ):
        if train and tsia and pool is None:
            raise ValueError("TSIA training needs a donor pool")
        self.patients = list(patients)
        self.train = train
        self.pool = pool
        self.tsia = tsia
        self.mask_mode = MaskMode(mask_mode)
        self.seed = seed
        self.set_epoch(0)

    def set_epoch(self, epoch: int) -> None:
        self._rng = np.random.default_rng([self.seed, epoch])

    def __len__(self) -> int:
        return len(self.patients)

    def resolve(self, index: int) -> ResolvedSample:
        patient = self.patients[index]
        if not self.train:
            sample = resolve_eval(patient)
        elif self.tsia:
            sample = tsia_resolve(patient, self.pool, self._rng)
        else:
            sample = resolve_plain(patient, self._rng)
        if self.train:
            sample = augment_train(sample, self._rng)
        return mask_modality(sample, self.mask_mode)

    def __getitem__(self, index: int) -> dict:
        sample = self.resolve(index)
        return {
            "fundus": torch.from_numpy(np.ascontiguousarray(sample.fundus)),
            "oct": torch.from_numpy(np.ascontiguousarray(sample.oct)),
            "record": torch.from_numpy(sample.record),
            "arms2": torch.tensor(sample.label_arms2),
            "cfh": torch.tensor(sample.label_cfh),
            "index": torch.tensor(index),
        }
