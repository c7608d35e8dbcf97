from typing import Tuple

import torch
import torch.nn as nn

from .schemas import MmeConfig, StConfig
from .services.embedding import MultiModalEmbedding, TokenSequence, patch_stack
from .services.heads import EnhancedHead, HeadOutput
from .services.numeric import LayerNorm
from .services.selective_transformer import SelectionTrace, SelectiveTransformer

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class MSViT(nn.Module):
    """Embedding -> selective transformer -> final norm -> enhanced head"""

    def __init__(self, mme: MmeConfig, st: StConfig):
        super().__init__()
        if st.embed_dim != mme.embed_dim:
            raise ValueError(f"embedding width {mme.embed_dim} differs from ST width {st.embed_dim}")
        self.mme_cfg = mme
        self.st_cfg = st
        self.embedding = MultiModalEmbedding(mme)
        self.transformer = SelectiveTransformer(st, mme.fundus_channels, mme.oct_channels)
        self.norm = LayerNorm(mme.embed_dim)
        self.head = EnhancedHead(mme.embed_dim, mme.record_fields)

    def encode(self, fundus: torch.Tensor, oct_image: torch.Tensor, record: torch.Tensor) -> Tuple[TokenSequence, SelectionTrace]:
        seq = self.embedding(fundus, oct_image, record)
        fundus_patches = patch_stack(fundus, self.mme_cfg.patch_size)
        oct_patches = patch_stack(oct_image, self.mme_cfg.patch_size)
        seq, trace = self.transformer(seq, fundus_patches, oct_patches)
        return seq.with_tokens(self.norm(seq.tokens)), trace

    def forward(self, fundus: torch.Tensor, oct_image: torch.Tensor, record: torch.Tensor) -> Tuple[HeadOutput, SelectionTrace]:
        seq, trace = self.encode(fundus, oct_image, record)
        return self.head(seq), trace


def build_model(mme: MmeConfig, st: StConfig, dtype: str = "float32", seed: int = 0) -> MSViT:
    torch.manual_seed(seed)
    return MSViT(mme, st).to(DTYPES[dtype])
