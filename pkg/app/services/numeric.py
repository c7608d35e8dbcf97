"""
Layer primitives shared by every model component.

Tensors are plain ``torch.Tensor`` objects and gradients come from torch's
reverse-mode autograd. The functions here add the shape validation, tie rules
and constants the rest of the package relies on; the modules at the bottom
hold parameters and call them.
"""

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ArgumentError, DimensionError

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

# finite-difference tolerances per float width
GRADCHECK_TOLERANCES = {
    torch.float64: {"eps": 1e-5, "rtol": 1e-3, "atol": 1e-6},
    torch.float32: {"eps": 1e-3, "rtol": 5e-2, "atol": 1e-3},
}


def affine(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """x[..., Din] @ weight[Din, Dout] + bias[Dout]"""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError("affine", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError("affine bias", weight.shape, bias.shape)
    return F.linear(x, weight.t(), bias)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch subtracts the running max internally
    return torch.softmax(x, dim=axis)


def conv3x3(img: torch.Tensor, kernels: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Stride-1 cross-correlation with zero padding 1; accepts [C,p,p] or [B,C,p,p]"""
    if kernels.dim() != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError("conv3x3 kernels", img.shape, kernels.shape)
    if img.dim() not in (3, 4) or img.shape[-3] != kernels.shape[1]:
        raise DimensionError("conv3x3", img.shape, kernels.shape)
    unbatched = img.dim() == 3
    out = F.conv2d(img.unsqueeze(0) if unbatched else img, kernels, bias, stride=1, padding=1)
    return out.squeeze(0) if unbatched else out


def batchnorm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    if x.dim() < 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError("batchnorm", x.shape, gamma.shape)
    if training and x.shape[0] < 2:
        raise ArgumentError("batchnorm in train mode needs a batch of at least 2")
    return F.batch_norm(
        x, running_mean, running_var, gamma, beta, training=training, momentum=momentum, eps=eps
    )


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError("layernorm", x.shape, gamma.shape)
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


ACTIVATIONS = {"relu": relu, "gelu": gelu}


def mlp2(x, w1, b1, w2, b2, activation: str = "relu") -> torch.Tensor:
    return affine(ACTIVATIONS[activation](affine(x, w1, b1)), w2, b2)


def top_k_indices(p: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries along the last axis.

    Ties go to the lower index; the result is sorted ascending.
    """
    n = p.shape[-1]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must lie in [1, {n}], got {k}")
    order = torch.sort(p.detach(), dim=-1, descending=True, stable=True).indices
    return torch.sort(order[..., :k], dim=-1).values


def selection_count(rate: float, n: int) -> int:
    """k = max(1, round(rate * n)), rounding half up"""
    return max(1, int(math.floor(rate * n + 0.5)))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise DimensionError("cross_entropy", logits.shape, labels.shape)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ArgumentError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels.long())


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError("mse", pred.shape, target.shape)
    return F.mse_loss(pred, target)


class Affine(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        nn.init.trunc_normal_(self.weight, mean=0.0, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return affine(x, self.weight, self.bias)


class MLP2(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, activation: str = "relu"):
        super().__init__()
        self.fc1 = Affine(d_in, d_hidden)
        self.fc2 = Affine(d_hidden, d_out)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp2(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias, self.activation)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layernorm(x, self.weight, self.bias)


class BatchNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor, training: Optional[bool] = None) -> torch.Tensor:
        training = self.training if training is None else training
        return batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var, training)


class Conv3x3(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3, 3))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_normal_(self.weight, nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv3x3(x, self.weight, self.bias)
