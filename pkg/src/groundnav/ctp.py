"""Calibrated text projector: <SEG> hidden states to segmentation prompts.

Each <SEG> hidden state is linearly reduced into the visual dimension, then
expanded by a widen-by-2 layer-normalized MLP into ``k_bank`` sub-embeddings
and shifted by a learnable bias bank. The learned temperature (stored as the
exponential of an unconstrained parameter, so it stays positive) belongs to
the contrastive alignment path, not the decoder path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ShapeMismatch


@dataclass
class SegTokenStates:
    """Batch of <SEG> hidden states with a validity mask over padded slots."""

    values: Tensor  # (B, M, H_llm)
    valid: Tensor   # (B, M) bool


@dataclass
class CalibratedPromptBank:
    """Prompt embeddings for the pixel decoder, k_bank rows per <SEG> token."""

    values: Tensor  # (B, M * k_bank, d_vis)
    valid: Tensor   # (B, M) bool
    k_bank: int

    def grouped(self) -> Tensor:
        """Lossless view (B, M, k_bank, d_vis)."""
        b, mk, d = self.values.shape
        return self.values.view(b, mk // self.k_bank, self.k_bank, d)


def _uniform_(tensor: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


class CalibratedTextProjector(nn.Module):
    def __init__(
        self,
        llm_dim: int,
        vis_dim: int,
        k_bank: int = 4,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if k_bank < 1:
            raise ValueError("k_bank must be >= 1")
        self.k_bank = k_bank
        self.vis_dim = vis_dim
        self.vis_proj = nn.Parameter(
            _uniform_(torch.empty(llm_dim, vis_dim, dtype=dtype), llm_dim)
        )
        self.norm1 = nn.LayerNorm(vis_dim, dtype=dtype)
        self.expand = nn.Linear(vis_dim, 2 * vis_dim, dtype=dtype)
        self.norm2 = nn.LayerNorm(2 * vis_dim, dtype=dtype)
        self.contract = nn.Linear(2 * vis_dim, k_bank * vis_dim, dtype=dtype)
        _uniform_(self.expand.weight, vis_dim)
        _uniform_(self.expand.bias, vis_dim)
        _uniform_(self.contract.weight, 2 * vis_dim)
        _uniform_(self.contract.bias, 2 * vis_dim)
        # Zero start: the shared prior grows as needed instead of washing out
        # per-token differences between prompt embeddings early in training.
        self.bias_bank = nn.Parameter(torch.zeros(k_bank, vis_dim, dtype=dtype))
        self.log_logit_scale = nn.Parameter(torch.zeros((), dtype=dtype))

    @property
    def logit_scale(self) -> Tensor:
        return self.log_logit_scale.exp()

    def project(self, states: Tensor) -> Tensor:
        """(B, M, H_llm) -> (B, M, d_vis), exact per-token matrix product."""
        if states.shape[-1] != self.vis_proj.shape[0]:
            raise ShapeMismatch(
                f"hidden dim {states.shape[-1]} vs projection {self.vis_proj.shape[0]}"
            )
        return states @ self.vis_proj

    def calibrate(self, reduced: Tensor) -> Tensor:
        """(B, M, d_vis) -> (B, M * k_bank, d_vis) with the bias bank added."""
        b, m, d = reduced.shape
        hidden = self.expand(self.norm1(reduced))
        expanded = self.contract(self.norm2(torch.nn.functional.gelu(hidden)))
        banks = expanded.view(b, m, self.k_bank, d) + self.bias_bank
        return banks.reshape(b, m * self.k_bank, d)

    def forward(self, seg_states: SegTokenStates) -> CalibratedPromptBank:
        reduced = self.project(seg_states.values)
        return CalibratedPromptBank(
            values=self.calibrate(reduced),
            valid=seg_states.valid,
            k_bank=self.k_bank,
        )
