"""
Pipeline layers.
Channel reduction, L2 normalization, spatial pyramid pooling, cosine-assignment
NetVLAD, multi-head self/cross attention and the classification head.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import ShapeError

EPS = 1e-12
GRID = 7


class Stage(str, Enum):
    F1 = "F1"
    F2 = "F2"
    F3 = "F3"
    F4 = "F4"


@dataclass
class FeatureMap:
    """Stage-tagged (B, C, 7, 7) map."""
    data: torch.Tensor
    stage: Stage

    def __post_init__(self):
        if self.data.dim() != 4 or tuple(self.data.shape[-2:]) != (GRID, GRID):
            raise ShapeError(f"{self.stage.value} must be (B, C, {GRID}, {GRID}), got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass
class VladDescriptor:
    """Flattened descriptor and its K×D matrix before flattening."""
    vector: torch.Tensor
    pre_flatten: torch.Tensor


def glorot_init(module: nn.Module) -> None:
    """Fan-average uniform kernels and zero biases for every conv/dense layer below `module`."""
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            nn.init.xavier_uniform_(layer.weight)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    """x / sqrt(sum(x²) + eps) along `dim`; zero vectors stay zero."""
    return x / torch.sqrt(torch.sum(x * x, dim=dim, keepdim=True) + eps)


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) → (B, H·W, C), row-major over positions."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(tokens: torch.Tensor, height: int = GRID, width: int = GRID) -> torch.Tensor:
    """(B, H·W, C) → (B, C, H, W)."""
    batch, count, channels = tokens.shape
    if count != height * width:
        raise ShapeError(f"expected {height * width} tokens, got {count}")
    return tokens.transpose(1, 2).reshape(batch, channels, height, width)


class ChannelReduction(nn.Module):
    """1×1 convolution to `out_channels` followed by a rectifier."""

    def __init__(self, in_channels: int, out_channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(x))


class L2Normalize(nn.Module):
    """Per-position normalization over channels of a (B, C, H, W) map."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return l2_normalize(x, dim=1)


class SpatialPyramidPooling(nn.Module):
    """
    Multi-scale max pooling that keeps the 7×7 grid.

    For each level n the map is max-pooled to n×n bins spanning
    [floor(i·7/n), ceil((i+1)·7/n)) and upsampled back by bin membership,
    position p reading bin floor(p·n/7). Levels are concatenated on channels.
    """

    def __init__(self, levels: Sequence[int] = (1, 2, 4)):
        super().__init__()
        self.levels = tuple(levels)
        for n in self.levels:
            self.register_buffer(f"index_{n}", torch.tensor([p * n // GRID for p in range(GRID)]), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[-2:]) != (GRID, GRID):
            raise ShapeError(f"spatial pyramid pooling needs a {GRID}×{GRID} map, got {tuple(x.shape)}")
        slabs = []
        for n in self.levels:
            pooled = F.adaptive_max_pool2d(x, n)
            index = getattr(self, f"index_{n}")
            slabs.append(pooled.index_select(2, index).index_select(3, index))
        return torch.cat(slabs, dim=1)


class NetVLAD(nn.Module):
    """
    NetVLAD with fixed cosine soft-assignment.

    Descriptors are row-normalized, assigned to clusters by softmax over their
    dot products with the centers, and the weighted residuals to each center
    are intra-normalized then globally normalized.
    """

    def __init__(self, num_clusters: int = 64, dim: int = 192):
        super().__init__()
        self.num_clusters = num_clusters
        self.dim = dim
        self.centers = nn.Parameter(torch.randn(num_clusters, dim) / math.sqrt(dim))

    @property
    def output_dim(self) -> int:
        return self.num_clusters * self.dim

    def assignments(self, descriptors: torch.Tensor) -> torch.Tensor:
        """Soft assignment of each (already normalized) descriptor, (B, N, K)."""
        return torch.softmax(descriptors @ self.centers.t(), dim=-1)

    def describe(self, x: torch.Tensor) -> VladDescriptor:
        if x.dim() == 4:
            x = to_tokens(x)
        if x.dim() != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"NetVLAD expects descriptors of depth {self.dim}, got {tuple(x.shape)}")
        descriptors = l2_normalize(x, dim=-1)
        soft = self.assignments(descriptors)
        residuals = soft.transpose(1, 2) @ descriptors - soft.sum(dim=1).unsqueeze(-1) * self.centers
        residuals = l2_normalize(residuals, dim=-1)
        vector = l2_normalize(residuals.flatten(1), dim=-1)
        return VladDescriptor(vector=vector, pre_flatten=residuals)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.describe(x).vector


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention with independent per-head width.

    Queries, keys and values are projected from their inputs to heads·key_dim,
    and the concatenated heads are projected back to the query width.
    """

    def __init__(self, query_dim: int, heads: int = 6, key_dim: int = 32, context_dim: Optional[int] = None):
        super().__init__()
        self.heads = heads
        self.key_dim = key_dim
        inner = heads * key_dim
        context_dim = context_dim or query_dim
        self.query = nn.Linear(query_dim, inner)
        self.key = nn.Linear(context_dim, inner)
        self.value = nn.Linear(context_dim, inner)
        self.output = nn.Linear(inner, query_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, count, _ = x.shape
        return x.view(batch, count, self.heads, self.key_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        q = self._split(self.query(query))
        k = self._split(self.key(key))
        v = self._split(self.value(value))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.key_dim), dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.output(attended)


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention with a residual connection, (B, N, C) → (B, N, C)."""

    def __init__(self, d_model: int, heads: int = 6, key_dim: int = 32):
        super().__init__()
        self.d_model = d_model
        self.norm = nn.LayerNorm(d_model)
        self.attention = MultiHeadAttention(d_model, heads, key_dim)

    def forward(self, x: torch.Tensor, return_normalized: bool = False):
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"self-attention block expects width {self.d_model}, got {x.shape[-1]}")
        normalized = self.norm(x)
        out = x + self.attention(normalized, normalized, normalized)
        if return_normalized:
            return out, normalized
        return out


class CrossAttentionBlock(nn.Module):
    """The global descriptor, as one query token, attends over the context tokens."""

    def __init__(self, descriptor_dim: int, context_dim: int = 64, d_model: int = 192, heads: int = 6, key_dim: int = 32):
        super().__init__()
        self.query_proj = nn.Linear(descriptor_dim, d_model)
        self.context_proj = nn.Linear(context_dim, d_model)
        self.attention = MultiHeadAttention(d_model, heads, key_dim)

    def forward(self, descriptor: torch.Tensor, context: Optional[torch.Tensor]) -> torch.Tensor:
        if context is None:
            raise RuntimeError("cross attention needs the self-attention context tokens")
        query = self.query_proj(descriptor).unsqueeze(1)
        keys = self.context_proj(context)
        return (query + self.attention(query, keys, keys)).squeeze(1)


class ClassificationHead(nn.Module):
    """Dense 512 + ReLU, dropout, L2 normalize, dense to classes, softmax."""

    def __init__(self, in_features: int, num_classes: int, width: int = 512, dropout: float = 0.5):
        super().__init__()
        self.dense = nn.Linear(in_features, width)
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(width, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = l2_normalize(self.dropout(F.relu(self.dense(x))), dim=-1)
        return torch.softmax(self.classifier(hidden), dim=-1)


def cross_entropy(probs: torch.Tensor, one_hot: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over the batch of −Σ y·log(max(p, eps)); never negative."""
    return -(one_hot * torch.log(probs.clamp(min=eps, max=1.0))).sum(dim=-1).mean()


