"""Classification head for both genes plus record reconstruction (RRA)"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ArgumentError
from .embedding import TokenSequence
from .numeric import MLP2, Affine, cross_entropy, mse


@dataclass
class HeadOutput:
    logits_arms2: torch.Tensor  # [B, 2]
    logits_cfh: torch.Tensor  # [B, 2]
    record_recon: torch.Tensor  # [B, t]


@dataclass
class LossBreakdown:
    ce_arms2: torch.Tensor
    ce_cfh: torch.Tensor
    mse_record: torch.Tensor
    total: torch.Tensor
    alpha: float

    def as_floats(self) -> dict:
        return {
            "ce_arms2": float(self.ce_arms2),
            "ce_cfh": float(self.ce_cfh),
            "mse_record": float(self.mse_record),
            "total": float(self.total),
        }


def compose_loss(ce_arms2, ce_cfh, mse_record, alpha: float):
    return ce_arms2 + ce_cfh + alpha * mse_record


class EnhancedHead(nn.Module):
    def __init__(self, embed_dim: int, record_fields: int, classes: int = 2):
        super().__init__()
        self.arms2 = Affine(embed_dim, classes)
        self.cfh = Affine(embed_dim, classes)
        self.rra = MLP2(embed_dim, embed_dim, record_fields)

    def forward(self, z_out: TokenSequence) -> HeadOutput:
        # no class token: every token contributes to the shared representation
        r = z_out.tokens.mean(dim=-2)
        return HeadOutput(self.arms2(r), self.cfh(r), self.rra(r))


def total_loss(
    out: HeadOutput,
    y_arms2: torch.Tensor,
    y_cfh: torch.Tensor,
    record: torch.Tensor,
    alpha: float,
) -> LossBreakdown:
    if alpha < 0:
        raise ArgumentError(f"alpha must be non-negative, got {alpha}")
    for name, labels in (("ARMS2", y_arms2), ("CFH", y_cfh)):
        if labels.numel() and not bool(((labels == 0) | (labels == 1)).all()):
            raise ArgumentError(f"{name} labels must be 0 or 1")

    ce_arms2 = cross_entropy(out.logits_arms2, y_arms2)
    ce_cfh = cross_entropy(out.logits_cfh, y_cfh)
    mse_record = mse(out.record_recon, record)
    total = compose_loss(ce_arms2, ce_cfh, mse_record, alpha)
    return LossBreakdown(ce_arms2, ce_cfh, mse_record, total, alpha)
