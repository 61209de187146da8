"""Multi-scale query projector: pixel-encoder features to image tokens.

The projector linearly maps encoder features into a working dimension,
average-pools the grid at 1x / 2x / 4x / global scales, applies a per-scale
sigmoid gate, lets a small bank of learnable queries cross-attend into each
gated scale (two pre-norm multi-head layers, residual on the queries, no
feed-forward sublayer), concatenates the 32 query outputs, appends 4 zero pad
tokens to reach a fixed 6x6 bank of 36, and projects into the language-model
hidden size. Pad rows stay exactly zero and are flagged in ``pad_mask``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import BadGridShape, ShapeMismatch


@dataclass
class FeatureGrid:
    """Flattened pixel-encoder output with its grid geometry."""

    values: Tensor  # (B, L, C)
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or self.values.shape[1] != self.grid_h * self.grid_w:
            raise ShapeMismatch(
                f"values {tuple(self.values.shape)} do not match grid "
                f"{self.grid_h}x{self.grid_w}"
            )


@dataclass
class ProjectedImageTokens:
    values: Tensor    # (B, Q, H_llm), Q = 36
    pad_mask: Tensor  # (B, Q) bool, True on the 4 pad rows


def _uniform_(tensor: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


def multiscale_pool(values: Tensor, grid_h: int, grid_w: int) -> dict[str, Tensor]:
    """Token banks at native / 2x / 4x / global mean-pooled resolutions."""
    b, length, dim = values.shape
    if length != grid_h * grid_w:
        raise ShapeMismatch(f"{length} tokens vs grid {grid_h}x{grid_w}")
    if grid_h % 4 != 0 or grid_w % 4 != 0:
        raise BadGridShape(f"grid {grid_h}x{grid_w} not divisible by 4")
    grid = values.view(b, grid_h, grid_w, dim)

    def pooled(k: int) -> Tensor:
        blocks = grid.view(b, grid_h // k, k, grid_w // k, k, dim)
        return blocks.mean(dim=(2, 4)).reshape(b, (grid_h // k) * (grid_w // k), dim)

    return {
        "native": values,
        "pool2": pooled(2),
        "pool4": pooled(4),
        "global": values.mean(dim=1, keepdim=True),
    }


def gate(bank: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Scale each token by a scalar sigmoid of a learned affine map."""
    score = torch.sigmoid(bank @ weight + bias)  # (B, N)
    return bank * score.unsqueeze(-1)


class CrossAttentionLayer(nn.Module):
    """Pre-norm multi-head cross-attention with a residual on the queries."""

    def __init__(self, dim: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError("n_heads must divide the working dim")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.norm = nn.LayerNorm(dim, dtype=dtype)
        self.query_proj = nn.Linear(dim, dim, dtype=dtype)
        self.key_proj = nn.Linear(dim, dim, dtype=dtype)
        self.value_proj = nn.Linear(dim, dim, dtype=dtype)
        self.out_proj = nn.Linear(dim, dim, dtype=dtype)
        for lin in (self.query_proj, self.key_proj, self.value_proj, self.out_proj):
            _uniform_(lin.weight, dim)
            _uniform_(lin.bias, dim)

    def forward(self, queries: Tensor, bank: Tensor) -> tuple[Tensor, Tensor]:
        """(B, Q, d), (B, N, d) -> refined queries and (B, heads, Q, N) weights."""
        b, n_q, dim = queries.shape
        n_k = bank.shape[1]
        q = self.query_proj(self.norm(queries))
        k = self.key_proj(bank)
        v = self.value_proj(bank)
        q = q.view(b, n_q, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n_k, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n_k, self.n_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n_q, dim)
        return queries + self.out_proj(mixed), attn


class ScaleBlock(nn.Module):
    """Gate plus learnable queries and their cross-attention stack."""

    def __init__(self, dim: int, n_queries: int, n_heads: int, n_layers: int, dtype: torch.dtype):
        super().__init__()
        self.gate_weight = nn.Parameter(_uniform_(torch.empty(dim, dtype=dtype), dim))
        self.gate_bias = nn.Parameter(torch.zeros((), dtype=dtype))
        self.queries = nn.Parameter(_uniform_(torch.empty(n_queries, dim, dtype=dtype), dim))
        self.layers = nn.ModuleList(
            CrossAttentionLayer(dim, n_heads, dtype) for _ in range(n_layers)
        )

    def forward(self, bank: Tensor) -> tuple[Tensor, list[Tensor]]:
        gated = gate(bank, self.gate_weight, self.gate_bias)
        queries = self.queries.unsqueeze(0).expand(bank.shape[0], -1, -1)
        maps = []
        for layer in self.layers:
            queries, attn = layer(queries, gated)
            maps.append(attn)
        return queries, maps


class MultiScaleQueryProjector(nn.Module):
    SCALES = ("native", "pool2", "pool4", "global")

    def __init__(
        self,
        feat_dim: int,
        proj_dim: int,
        llm_dim: int,
        queries_per_scale: tuple[int, int, int, int] = (12, 8, 8, 4),
        n_heads: int = 8,
        n_layers: int = 2,
        n_pad_tokens: int = 4,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.n_pad_tokens = n_pad_tokens
        self.input_proj = nn.Parameter(
            _uniform_(torch.empty(feat_dim, proj_dim, dtype=dtype), feat_dim)
        )
        self.scales = nn.ModuleList(
            ScaleBlock(proj_dim, n_q, n_heads, n_layers, dtype)
            for n_q in queries_per_scale
        )
        # Bias-free so the appended zero pad tokens stay exactly zero.
        self.output_proj = nn.Parameter(
            _uniform_(torch.empty(proj_dim, llm_dim, dtype=dtype), proj_dim)
        )

    @property
    def n_tokens(self) -> int:
        return sum(block.queries.shape[0] for block in self.scales) + self.n_pad_tokens

    def project_features(self, grid: FeatureGrid) -> Tensor:
        if grid.values.shape[-1] != self.input_proj.shape[0]:
            raise ShapeMismatch(
                f"feature dim {grid.values.shape[-1]} vs projection "
                f"{self.input_proj.shape[0]}"
            )
        return grid.values @ self.input_proj

    def forward(
        self, grid: FeatureGrid, return_attention: bool = False
    ) -> ProjectedImageTokens | tuple[ProjectedImageTokens, dict[str, list[Tensor]]]:
        features = self.project_features(grid)
        banks = multiscale_pool(features, grid.grid_h, grid.grid_w)
        outputs = []
        attention: dict[str, list[Tensor]] = {}
        for name, block in zip(self.SCALES, self.scales):
            refined, maps = block(banks[name])
            outputs.append(refined)
            attention[name] = maps
        tokens = torch.cat(outputs, dim=1)
        b = tokens.shape[0]
        pad = torch.zeros(
            b, self.n_pad_tokens, tokens.shape[-1], dtype=tokens.dtype, device=tokens.device
        )
        tokens = torch.cat([tokens, pad], dim=1) @ self.output_proj
        pad_mask = torch.zeros(b, tokens.shape[1], dtype=torch.bool, device=tokens.device)
        pad_mask[:, tokens.shape[1] - self.n_pad_tokens:] = True
        result = ProjectedImageTokens(values=tokens, pad_mask=pad_mask)
        return (result, attention) if return_attention else result


class MLPProjector(nn.Module):
    """Ablation stand-in: mean-pool the grid to 6x6 and apply a per-token MLP."""

    def __init__(self, feat_dim: int, proj_dim: int, llm_dim: int, n_tokens: int = 36,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        side = int(math.isqrt(n_tokens))
        if side * side != n_tokens:
            raise ValueError("n_tokens must be a perfect square")
        self.side = side
        self.fc1 = nn.Linear(feat_dim, proj_dim, dtype=dtype)
        self.fc2 = nn.Linear(proj_dim, llm_dim, dtype=dtype)
        _uniform_(self.fc1.weight, feat_dim)
        _uniform_(self.fc1.bias, feat_dim)
        _uniform_(self.fc2.weight, proj_dim)
        _uniform_(self.fc2.bias, proj_dim)

    @property
    def n_tokens(self) -> int:
        return self.side * self.side

    def forward(self, grid: FeatureGrid) -> ProjectedImageTokens:
        b, _, c = grid.values.shape
        spatial = grid.values.view(b, grid.grid_h, grid.grid_w, c).permute(0, 3, 1, 2)
        pooled = torch.nn.functional.adaptive_avg_pool2d(spatial, self.side)
        tokens = pooled.flatten(2).transpose(1, 2)  # (B, side*side, C)
        tokens = self.fc2(torch.nn.functional.gelu(self.fc1(tokens)))
        pad_mask = torch.zeros(b, tokens.shape[1], dtype=torch.bool, device=tokens.device)
        return ProjectedImageTokens(values=tokens, pad_mask=pad_mask)
