"""Training objectives: masked conversation CE, span CE, Dice/BCE, total."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import torch
from torch import Tensor

from .config import LossWeights
from .errors import DegenerateBatch, NonFiniteLoss

# Span labels over token positions.
SPAN_NONE = 0
SPAN_ASSESSMENT = 1
SPAN_PHRASE = 2
SPAN_SEG = 3
SPAN_DISTANCE = 4

DICE_SMOOTHING = 1.0


@dataclass
class TokenBatch:
    """Teacher-forcing token batch.

    ``answer_mask`` marks loss-bearing target positions (the answer tokens,
    including the end-of-answer token); prompt and question positions stay
    False. ``span_labels`` carries SPAN_* codes, with SPAN_DISTANCE set exactly
    on the tokens inside a <distance>...</distance> block.
    """

    input_ids: Tensor                    # (B, S) int64
    answer_mask: Tensor                  # (B, S) bool
    span_labels: Tensor                  # (B, S) int64
    seg_positions: list[list[int]] = field(default_factory=list)


@dataclass
class MaskPair:
    pred_logits: Tensor                  # (H, W)
    gt_mask: Tensor                      # (H, W), {0, 1}
    pairing: int = 0


class SpanCE(NamedTuple):
    loss: Tensor
    n_positions: int

    @property
    def empty(self) -> bool:
        return self.n_positions == 0


def _target_positions(batch: TokenBatch) -> Tensor:
    # Position 0 has no preceding context to predict it from.
    mask = batch.answer_mask.clone()
    mask[:, 0] = False
    return mask


def masked_ce(logits: Tensor, batch: TokenBatch, per_sample: bool = False) -> Tensor:
    """Next-token cross entropy over answer positions only.

    The prediction for target position ``i`` is read from ``logits[:, i-1]``.
    Default reduction pools all answer tokens of the batch into one mean;
    ``per_sample=True`` averages per sample first, then over the batch.
    """
    mask = _target_positions(batch)
    if not bool(mask.any()):
        raise DegenerateBatch("answer_mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    token_logp = logp[:, :-1].gather(-1, batch.input_ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    nll = -token_logp  # (B, S-1); target position i corresponds to column i-1
    m = mask[:, 1:]
    if per_sample:
        counts = m.sum(dim=1)
        rows = counts > 0
        per = (nll * m).sum(dim=1)[rows] / counts[rows]
        return per.mean()
    return nll[m].mean()


def span_ce(logits: Tensor, batch: TokenBatch, span: int) -> SpanCE:
    """Cross entropy restricted to positions carrying one span label."""
    mask = _target_positions(batch) & (batch.span_labels == span)
    n = int(mask.sum())
    if n == 0:
        return SpanCE(torch.zeros((), dtype=logits.dtype, device=logits.device), 0)
    logp = torch.log_softmax(logits, dim=-1)
    token_logp = logp[:, :-1].gather(-1, batch.input_ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    return SpanCE((-token_logp[mask[:, 1:]]).mean(), n)


def dice_loss(pairs: Sequence[MaskPair]) -> Tensor:
    """Mean soft Dice loss over mask pairs (smoothing 1.0)."""
    if not pairs:
        raise ValueError("dice_loss needs at least one mask pair")
    terms = []
    for pair in pairs:
        if pair.pred_logits.shape != pair.gt_mask.shape:
            raise ValueError(
                f"pred {tuple(pair.pred_logits.shape)} vs gt {tuple(pair.gt_mask.shape)}"
            )
        p = torch.sigmoid(pair.pred_logits)
        g = pair.gt_mask.to(p.dtype)
        num = 2.0 * (p * g).sum() + DICE_SMOOTHING
        den = p.sum() + g.sum() + DICE_SMOOTHING
        terms.append(1.0 - num / den)
    return torch.stack(terms).mean()


def bce_seg(pairs: Sequence[MaskPair]) -> Tensor:
    """Per-pixel BCE on logits, averaged per mask then over pairs."""
    if not pairs:
        raise ValueError("bce_seg needs at least one mask pair")
    terms = []
    for pair in pairs:
        g = pair.gt_mask.to(pair.pred_logits.dtype)
        terms.append(
            torch.nn.functional.binary_cross_entropy_with_logits(
                pair.pred_logits, g, reduction="mean"
            )
        )
    return torch.stack(terms).mean()


@dataclass
class LossBreakdown:
    """Per-step loss record; dist_span_ce is diagnostic only."""

    ce: float
    dice: float
    bce: float
    nce: float
    dist_span_ce: float
    total: float

    def to_dict(self) -> dict:
        return {
            "ce": self.ce,
            "dice": self.dice,
            "bce": self.bce,
            "nce": self.nce,
            "dist_span_ce": self.dist_span_ce,
            "total": self.total,
        }


def total_loss(
    ce,
    dice,
    bce,
    nce,
    weights: LossWeights,
    dist_span_ce=0.0,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the loss components.

    Accepts tensors or floats; returns the differentiable total plus a float
    breakdown for logging. Raises :class:`NonFiniteLoss` if any component or
    the total is NaN/inf.
    """
    parts = {"ce": ce, "dice": dice, "bce": bce, "nce": nce}
    values = {}
    for name, value in parts.items():
        scalar = float(value.detach() if isinstance(value, Tensor) else value)
        if not torch.isfinite(torch.tensor(scalar)):
            raise NonFiniteLoss(f"component {name} is {scalar}")
        values[name] = scalar
    total = (
        weights.ce * ce + weights.dice * dice + weights.bce * bce + weights.nce * nce
    )
    total_value = float(total.detach() if isinstance(total, Tensor) else total)
    if not torch.isfinite(torch.tensor(total_value)):
        raise NonFiniteLoss(f"total is {total_value}")
    breakdown = LossBreakdown(
        ce=values["ce"],
        dice=values["dice"],
        bce=values["bce"],
        nce=values["nce"],
        dist_span_ce=float(
            dist_span_ce.detach() if isinstance(dist_span_ce, Tensor) else dist_span_ce
        ),
        total=total_value,
    )
    return total if isinstance(total, Tensor) else torch.tensor(total), breakdown
