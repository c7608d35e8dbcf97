"""
Selective transformer blocks.

Each block scores the incoming image tokens, keeps the top k of them, lets the
kept tokens and the table tokens attend to each other, adds CNN features of the
kept tokens' source patches and finishes with a feed-forward MLP. Tokens that
were not kept skip the attention sub-layer unchanged.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from ..errors import InvariantViolation
from ..schemas import StConfig
from .embedding import TokenSequence
from .numeric import MLP2, Affine, BatchNorm, Conv3x3, LayerNorm, selection_count, softmax, top_k_indices



@dataclass
class SelectionTrace:
    """Per-block selected image-token indices, each [B, k]"""

    n_image: int
    blocks: List[torch.Tensor] = field(default_factory=list)

    def append(self, selected: torch.Tensor) -> None:
        self.blocks.append(selected.detach())

    def __len__(self) -> int:
        return len(self.blocks)

    def frequencies(self) -> torch.Tensor:
        """f_i = number of blocks that selected image token i, shape [B, N_img]"""
        if not self.blocks:
            raise InvariantViolation("selection trace is empty")
        batch = self.blocks[0].shape[0]
        counts = torch.zeros(batch, self.n_image, dtype=torch.long)
        for selected in self.blocks:
            counts += F.one_hot(selected.cpu(), self.n_image).sum(dim=1)
        return counts


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = Affine(dim, dim)
        self.k = Affine(dim, dim)
        self.v = Affine(dim, dim)
        self.out = Affine(dim, dim)

    def forward(self, x: torch.Tensor, value_scale: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = (rearrange(proj(x), "b n (h d) -> b h n d", h=self.heads) for proj in (self.q, self.k, self.v))
        if value_scale is not None:
            v = v * value_scale[:, None, :, None]
        attn = softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, axis=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.out(out)


class SelectionScorer(nn.Module):
    """Per-token selection probability: sigmoid of a two-layer ReLU MLP"""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP2(dim, dim, 1)

    def forward(self, z_image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(z_image)).squeeze(-1)


class LocalCNN(nn.Module):
    """conv3x3 -> batchnorm -> ReLU -> global average pool, one instance per modality"""

    def __init__(self, channels: int, local_dim: int):
        super().__init__()
        self.conv = Conv3x3(channels, local_dim)
        self.bn = BatchNorm(local_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # a lone patch has no batch variance; fall back to running statistics
        use_batch_stats = self.training and patches.shape[0] > 1
        x = self.bn(self.conv(patches), training=use_batch_stats)
        return F.relu(x).mean(dim=(-2, -1))


class ChannelFusion(nn.Module):
    """Shared channel MLP over [global; local] -> D"""

    def __init__(self, dim: int, local_dim: int):
        super().__init__()
        self.local_dim = local_dim
        self.mlp = MLP2(dim + local_dim, 2 * dim, dim)

    def forward(self, z_global: torch.Tensor, z_local: torch.Tensor) -> torch.Tensor:
        batch, length, _ = z_global.shape
        pad = z_global.new_zeros(batch, length - z_local.shape[1], self.local_dim)
        return self.mlp(torch.cat([z_global, torch.cat([z_local, pad], dim=1)], dim=-1))


class DenseBlock(nn.Module):
    """Pre-norm transformer block: dense attention then GELU MLP"""

    def __init__(self, cfg: StConfig):
        super().__init__()
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadAttention(cfg.embed_dim, cfg.heads)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.mlp = MLP2(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio), cfg.embed_dim, activation="gelu")

    def forward(self, seq: TokenSequence) -> Tuple[TokenSequence, Optional[torch.Tensor]]:
        z = seq.tokens
        z = z + self.attn(self.norm1(z))
        z = z + self.mlp(self.norm2(z))
        return seq.with_tokens(z), None


class STBlock(nn.Module):
    def __init__(self, cfg: StConfig, fundus_channels: int = 3, oct_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        dim = cfg.embed_dim
        self.norm1 = LayerNorm(dim)
        self.selector = SelectionScorer(dim)
        self.attn = MultiHeadAttention(dim, cfg.heads)
        self.fuse_norm = LayerNorm(dim)
        self.local_fundus = LocalCNN(fundus_channels, cfg.local_dim)
        self.local_oct = LocalCNN(oct_channels, cfg.local_dim)
        self.fusion = ChannelFusion(dim, cfg.local_dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP2(dim, int(dim * cfg.mlp_ratio), dim, activation="gelu")

    def selection_scores(self, z_image: torch.Tensor) -> torch.Tensor:
        return self.selector(z_image)

    def select(self, probs: torch.Tensor) -> torch.Tensor:
        return top_k_indices(probs, selection_count(self.cfg.selection_rate, probs.shape[-1]))

    def selective_attention(self, z: torch.Tensor, normed: torch.Tensor, selected: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
        """Residual attention among the selected image tokens and every table token"""
        batch, length, dim = z.shape
        n_image = probs.shape[-1]
        table = torch.arange(n_image, length, device=z.device).expand(batch, -1)
        idx = torch.cat([selected, table], dim=1)
        gather_idx = idx.unsqueeze(-1).expand(-1, -1, dim)

        value_scale = None
        if self.cfg.gradient_coupling:
            p_sel = probs.gather(1, selected)
            # forward value is exactly 1; only the gradient path changes
            ratio = p_sel / p_sel.detach()
            value_scale = torch.cat([ratio, ratio.new_ones(batch, length - n_image)], dim=1)

        out = self.attn(normed.gather(1, gather_idx), value_scale=value_scale)
        return z + torch.zeros_like(z).scatter(1, gather_idx, out)

    def local_features(self, selected: torch.Tensor, fundus_patches: torch.Tensor, oct_patches: torch.Tensor) -> torch.Tensor:
        """CNN features for selected tokens, zero rows elsewhere; [B, N_img, D_local]"""
        batch, n_patches = fundus_patches.shape[:2]
        n_image = 2 * n_patches
        if selected.numel() and int(selected.max()) >= n_image:
            raise InvariantViolation(f"selected index {int(selected.max())} has no source patch")
        mask = torch.zeros(batch, n_image, dtype=torch.bool, device=selected.device)
        mask.scatter_(1, selected, True)

        features = fundus_patches.new_zeros(batch, n_image, self.cfg.local_dim)
        for offset, patches, cnn in (
            (0, fundus_patches, self.local_fundus),
            (n_patches, oct_patches, self.local_oct),
        ):
            part = mask[:, offset : offset + n_patches]
            rows, cols = part.nonzero(as_tuple=True)
            if rows.numel() == 0:
                continue
            feats = cnn(patches[rows, cols])
            features = features.index_put((rows, cols + offset), feats)
        return features

    def fuse(self, z_global: torch.Tensor, z_local: torch.Tensor) -> torch.Tensor:
        return self.fusion(z_global, z_local)

    def forward(self, seq: TokenSequence, fundus_patches: torch.Tensor, oct_patches: torch.Tensor) -> Tuple[TokenSequence, torch.Tensor]:
        z = seq.tokens
        n_image = seq.n_image
        normed = self.norm1(z)
        probs = self.selection_scores(normed[:, :n_image])
        selected = self.select(probs)
        z = self.selective_attention(z, normed, selected, probs)
        z_local = self.local_features(selected, fundus_patches, oct_patches)
        z = z + self.fuse(self.fuse_norm(z), z_local)
        z = z + self.mlp(self.norm2(z))
        return seq.with_tokens(z), selected


class SelectiveTransformer(nn.Module):
    """M blocks applied in sequence; dense blocks when selection is disabled"""

    def __init__(self, cfg: StConfig, fundus_channels: int = 3, oct_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        if cfg.enabled:
            blocks = [STBlock(cfg, fundus_channels, oct_channels) for _ in range(cfg.blocks)]
        else:
            blocks = [DenseBlock(cfg) for _ in range(cfg.blocks)]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, seq: TokenSequence, fundus_patches: torch.Tensor, oct_patches: torch.Tensor) -> Tuple[TokenSequence, SelectionTrace]:
        trace = SelectionTrace(n_image=seq.n_image)
        for block in self.blocks:
            if isinstance(block, STBlock):
                seq, selected = block(seq, fundus_patches, oct_patches)
                trace.append(selected)
            else:
                seq, _ = block(seq)
        return seq, trace
