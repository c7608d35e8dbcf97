"""Multi-modal embedding: fundus and OCT patches plus record-derived table tokens"""

from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from ..errors import ConfigError, DimensionError
from ..schemas import MmeConfig, Modality
from .numeric import MLP2, Affine


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # [B, L, D]
    modality_tags: List[Modality]
    patch_coords: List[Tuple[int, int]]  # one (row, col) per image token

    @property
    def n_image(self) -> int:
        return len(self.patch_coords)

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.modality_tags, self.patch_coords)


def patchify(img: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[..., C, H, W] -> [..., (H/P)*(W/P), C*P*P], row-major patches, channel-major rows"""
    height, width = img.shape[-2:]
    if height % patch_size or width % patch_size:
        raise ConfigError(f"image {height}x{width} is not divisible by patch size {patch_size}")
    return rearrange(img, "... c (h p1) (w p2) -> ... (h w) (c p1 p2)", p1=patch_size, p2=patch_size)


def unpatchify(patches: torch.Tensor, patch_size: int, channels: int, grid: int) -> torch.Tensor:
    return rearrange(
        patches, "... (h w) (c p1 p2) -> ... c (h p1) (w p2)",
        h=grid, w=grid, c=channels, p1=patch_size, p2=patch_size,
    )


def patch_stack(img: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, N, C, P, P], the per-token source patches for the local CNNs"""
    return rearrange(img, "b c (h p1) (w p2) -> b (h w) c p1 p2", p1=patch_size, p2=patch_size)


def image_token_layout(cfg: MmeConfig) -> Tuple[List[Modality], List[Tuple[int, int]]]:
    coords = [(row, col) for row in range(cfg.grid) for col in range(cfg.grid)]
    tags = (
        [Modality.FUNDUS] * cfg.n_patches
        + [Modality.OCT] * cfg.n_patches
        + [Modality.TABLE] * cfg.n_table_tokens
    )
    return tags, coords + coords


class PatchEmbedding(nn.Module):
    """One linear projection per modality (f for fundus, g for OCT)"""

    def __init__(self, channels: int, patch_size: int, embed_dim: int):
        super().__init__()
        self.width = channels * patch_size**2
        self.proj = Affine(self.width, embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.width:
            raise DimensionError("patch embedding", patches.shape, (self.width,))
        return self.proj(patches)


class TableEmbedding(nn.Module):
    """Each record attribute gets its own 1 -> D -> D MLP and becomes one token"""

    def __init__(self, fields: int, embed_dim: int):
        super().__init__()
        self.fields = fields
        self.mlps = nn.ModuleList([MLP2(1, embed_dim, embed_dim) for _ in range(fields)])

    def forward(self, record: torch.Tensor) -> torch.Tensor:
        if record.shape[-1] != self.fields:
            raise DimensionError("table embedding", record.shape, (self.fields,))
        tokens = [mlp(record[..., i : i + 1]) for i, mlp in enumerate(self.mlps)]
        return torch.stack(tokens, dim=-2)


class MultiModalEmbedding(nn.Module):
    def __init__(self, cfg: MmeConfig):
        super().__init__()
        self.cfg = cfg
        self.fundus = PatchEmbedding(cfg.fundus_channels, cfg.patch_size, cfg.embed_dim)
        self.oct = PatchEmbedding(cfg.oct_channels, cfg.patch_size, cfg.embed_dim)
        self.table = TableEmbedding(cfg.record_fields, cfg.embed_dim) if cfg.use_records else None
        self.pos = nn.Parameter(torch.zeros(cfg.seq_len, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos, mean=0.0, std=0.02)
        self.tags, self.coords = image_token_layout(cfg)

    def embed_fundus(self, patches: torch.Tensor) -> torch.Tensor:
        return self.fundus(patches)

    def embed_oct(self, patches: torch.Tensor) -> torch.Tensor:
        return self.oct(patches)

    def embed_table(self, record: torch.Tensor) -> torch.Tensor:
        return self.table(record)

    def assemble(self, z_fundus, z_oct, z_table=None) -> TokenSequence:
        parts = [z_fundus, z_oct] + ([z_table] if z_table is not None else [])
        tokens = torch.cat(parts, dim=-2)
        if tokens.shape[-2:] != self.pos.shape:
            raise DimensionError("assemble", tokens.shape, self.pos.shape)
        return TokenSequence(tokens + self.pos, self.tags, self.coords)

    def forward(self, fundus: torch.Tensor, oct_image: torch.Tensor, record: torch.Tensor) -> TokenSequence:
        z_fundus = self.embed_fundus(patchify(fundus, self.cfg.patch_size))
        z_oct = self.embed_oct(patchify(oct_image, self.cfg.patch_size))
        z_table = self.embed_table(record) if self.table is not None else None
        return self.assemble(z_fundus, z_oct, z_table)
