from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Modality(str, Enum):
    FUNDUS = "fundus"
    OCT = "oct"
    TABLE = "table"


class MaskMode(str, Enum):
    NONE = "none"
    WITHOUT_OCT = "without_oct"
    WITHOUT_FUNDUS = "without_fundus"


class AblationAxis(str, Enum):
    SELECTION_RATE = "selection_rate"
    TSIA = "tsia"
    RECORD = "record"
    ST = "st"
    MASK = "mask"


class MmeConfig(BaseModel):
    """Shapes of the multi-modal embedding"""

    model_config = ConfigDict(frozen=True)

    image_size: int = Field(48, ge=1)
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(64, ge=2)
    record_fields: int = Field(3, ge=1)
    fundus_channels: int = 3
    oct_channels: int = 1
    use_records: bool = True

    @model_validator(mode="after")
    def check_shapes(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % 2 != 0:
            raise ValueError(f"embed_dim must be even, got {self.embed_dim}")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def n_image_tokens(self) -> int:
        return 2 * self.n_patches

    @property
    def n_table_tokens(self) -> int:
        return self.record_fields if self.use_records else 0

    @property
    def seq_len(self) -> int:
        return self.n_image_tokens + self.n_table_tokens


class StConfig(BaseModel):
    """Selective transformer stack"""

    model_config = ConfigDict(frozen=True)

    blocks: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    embed_dim: int = Field(64, ge=1)
    local_dim: int = Field(32, ge=1)
    selection_rate: float = Field(0.5, gt=0.0, le=1.0)
    gradient_coupling: bool = True
    mlp_ratio: float = Field(4.0, gt=0.0)
    enabled: bool = True

    @model_validator(mode="after")
    def check_heads(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(200, ge=1)
    base_lr: float = Field(0.001, gt=0.0)
    alpha: float = Field(0.001, ge=0.0)
    batch_size: int = Field(16, ge=1)
    selection_rate: float = Field(0.5, gt=0.0, le=1.0)
    tsia: bool = True
    record_info: bool = True
    record_reconstruction: bool = True
    st_enabled: bool = True
    mask_mode: MaskMode = MaskMode.NONE
    seed: int = 0
    folds: int = Field(5, ge=3)
    dtype: Literal["float32", "float64"] = "float32"

    @property
    def effective_alpha(self) -> float:
        if not (self.record_info and self.record_reconstruction):
            return 0.0
        return self.alpha


class SyntheticConfig(BaseModel):
    """Counts mirror the clinical cohort: 1,192 sets, 200 with OCT, 20 without fundus"""

    model_config = ConfigDict(frozen=True)

    n_sets: int = Field(1192, ge=2)
    image_size: int = Field(48, ge=8)
    oct_fraction: float = Field(200 / 1192, gt=0.0, le=1.0)
    missing_fundus_fraction: float = Field(20 / 1192, ge=0.0, lt=1.0)
    max_oct: int = Field(3, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_fractions(self):
        if self.missing_fundus_fraction > self.oct_fraction:
            raise ValueError("every patient without fundus needs an OCT image")
        return self


class RunConfig(BaseModel):
    """Flat union of every configurable key; this is what config files map onto"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # embedding
    image_size: int = 48
    patch_size: int = 8
    embed_dim: int = 64
    record_fields: int = 3
    # selective transformer
    blocks: int = 4
    heads: int = 4
    local_dim: int = 32
    selection_rate: float = 0.5
    gradient_coupling: bool = True
    mlp_ratio: float = 4.0
    # training
    epochs: int = 200
    base_lr: float = 0.001
    alpha: float = 0.001
    batch_size: int = 16
    tsia: bool = True
    record_info: bool = True
    record_reconstruction: bool = True
    st_enabled: bool = True
    mask_mode: MaskMode = MaskMode.NONE
    seed: int = 0
    folds: int = 5
    dtype: Literal["float32", "float64"] = "float32"
    # synthetic data
    n_sets: int = 1192
    oct_fraction: float = 200 / 1192
    missing_fundus_fraction: float = 20 / 1192
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"

    @model_validator(mode="after")
    def check_sections(self):
        # building the sections runs their validators
        self.mme()
        self.st()
        self.train()
        self.synthetic()
        return self

    def mme(self) -> MmeConfig:
        return MmeConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            record_fields=self.record_fields,
            use_records=self.record_info,
        )

    def st(self) -> StConfig:
        return StConfig(
            blocks=self.blocks,
            heads=self.heads,
            embed_dim=self.embed_dim,
            local_dim=self.local_dim,
            selection_rate=self.selection_rate,
            gradient_coupling=self.gradient_coupling,
            mlp_ratio=self.mlp_ratio,
            enabled=self.st_enabled,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            alpha=self.alpha,
            batch_size=self.batch_size,
            selection_rate=self.selection_rate,
            tsia=self.tsia,
            record_info=self.record_info,
            record_reconstruction=self.record_reconstruction,
            st_enabled=self.st_enabled,
            mask_mode=self.mask_mode,
            seed=self.seed,
            folds=self.folds,
            dtype=self.dtype,
        )

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_sets=self.n_sets,
            image_size=self.image_size,
            oct_fraction=self.oct_fraction,
            missing_fundus_fraction=self.missing_fundus_fraction,
            seed=self.seed,
        )


class GeneMetrics(BaseModel):
    accuracy: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    f_score: float = Field(ge=0.0, le=1.0)


class MetricsReport(BaseModel):
    arms2: GeneMetrics
    cfh: GeneMetrics
    fold: Optional[int] = None

    @property
    def mean_accuracy(self) -> float:
        return (self.arms2.accuracy + self.cfh.accuracy) / 2
