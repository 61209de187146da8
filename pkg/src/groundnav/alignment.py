"""Region alignment loss: attention-pooled positives and InfoNCE.

Each <SEG> hidden state cross-attends into the frozen pixel-encoder features
of its own image; the top-K attended value vectors are renormalized, mixed and
projected into the prompt space as the positive region embedding. Anchors are
the normalized means of each token's calibrated sub-embeddings. Negatives
combine the positives of every other (image, token) pair in the batch with
the hardest non-attended region tokens of the same image. All comparisons use
L2-normalized vectors and temperature tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .ctp import CalibratedPromptBank, CalibratedTextProjector, SegTokenStates
from .errors import DegenerateBatch
from .msqp import FeatureGrid


@dataclass
class RegionAttention:
    pi: Tensor       # (L,) softmax attention over all region tokens
    indices: Tensor  # (K,) selected top-K token indices, ties to lowest index
    alpha: Tensor    # (K,) pi renormalized over the selection


def _uniform_(tensor: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


def _normalize(x: Tensor) -> Tensor:
    return torch.nn.functional.normalize(x, dim=-1, eps=1e-12)


class RegionAligner(nn.Module):
    """Projection parameters of the alignment path (d_k = d_vis)."""

    def __init__(self, llm_dim: int, feat_dim: int, vis_dim: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.d_k = vis_dim
        self.query_proj = nn.Parameter(_uniform_(torch.empty(llm_dim, vis_dim, dtype=dtype), llm_dim))
        self.key_proj = nn.Parameter(_uniform_(torch.empty(feat_dim, vis_dim, dtype=dtype), feat_dim))
        self.value_proj = nn.Parameter(_uniform_(torch.empty(feat_dim, vis_dim, dtype=dtype), feat_dim))
        self.out_proj = nn.Parameter(_uniform_(torch.empty(vis_dim, vis_dim, dtype=dtype), vis_dim))


def topk_lowest_index(scores: Tensor, k: int) -> Tensor:
    """Indices of the k largest entries; ties resolve to the lowest index."""
    k = min(k, scores.shape[0])
    return torch.argsort(-scores, stable=True)[:k]


def attend_region(aligner: RegionAligner, t: Tensor, region_feats: Tensor, k_pos: int) -> RegionAttention:
    """Attention of one <SEG> state (H,) over one image's features (L, C)."""
    q = t @ aligner.query_proj                      # (d_k,)
    keys = region_feats @ aligner.key_proj          # (L, d_k)
    pi = torch.softmax(keys @ q / math.sqrt(aligner.d_k), dim=0)
    indices = topk_lowest_index(pi, k_pos)
    selected = pi[indices]
    return RegionAttention(pi=pi, indices=indices, alpha=selected / selected.sum())


def positive_embedding(aligner: RegionAligner, attn: RegionAttention, values: Tensor) -> Tensor:
    """Mixture of selected value vectors, projected into the prompt space."""
    mixed = (attn.alpha.unsqueeze(-1) * values[attn.indices]).sum(dim=0)
    return mixed @ aligner.out_proj


def info_nce(
    anchors: Tensor,
    positives: Tensor,
    negative_pools: list[Tensor],
    tau: float,
    logit_scale: Tensor | float = 1.0,
) -> Tensor:
    """Mean InfoNCE over anchors; all inputs must be unit-norm.

    ``negative_pools[i]`` holds the normalized negatives of anchor ``i`` and
    may be empty, in which case the anchor contributes zero loss.
    """
    if anchors.shape[0] == 0:
        raise DegenerateBatch("no valid anchors")
    losses = []
    for i in range(anchors.shape[0]):
        pos_logit = (anchors[i] * positives[i]).sum() * logit_scale / tau
        pool = negative_pools[i]
        if pool.shape[0] == 0:
            losses.append(pos_logit - pos_logit)  # exactly zero, keeps the graph
            continue
        neg_logits = pool @ anchors[i] * logit_scale / tau
        all_logits = torch.cat([pos_logit.view(1), neg_logits])
        losses.append(torch.logsumexp(all_logits, dim=0) - pos_logit)
    return torch.stack(losses).mean()


def build_negatives(
    aligner: RegionAligner,
    anchors: Tensor,          # (N, d_vis) normalized, one per valid (b, m)
    positives: Tensor,        # (N, d_vis) normalized
    owners: list[int],        # image index per anchor
    attentions: list[RegionAttention],
    region_values: Tensor,    # (B, L, d_k) value vectors per image
    k_neg: int,
) -> list[Tensor]:
    """Per-anchor negative pools: other pairs' positives plus hard regions."""
    n = anchors.shape[0]
    pools = []
    for i in range(n):
        parts = []
        if n > 1:
            keep = [j for j in range(n) if j != i]
            parts.append(positives[keep])
        if k_neg > 0:
            b = owners[i]
            length = region_values.shape[1]
            selected = set(attentions[i].indices.tolist())
            remaining = [j for j in range(length) if j not in selected]
            if remaining:
                candidates = _normalize(region_values[b, remaining] @ aligner.out_proj)
                sims = candidates @ anchors[i]
                hard = topk_lowest_index(sims, k_neg)
                parts.append(candidates[hard])
        if parts:
            pools.append(torch.cat(parts, dim=0))
        else:
            pools.append(anchors.new_zeros((0, anchors.shape[-1])))
    return pools


def region_alignment_loss(
    aligner: RegionAligner,
    ctp: CalibratedTextProjector,
    seg_states: SegTokenStates,
    grid: FeatureGrid,
    prompt_bank: CalibratedPromptBank,
    tau: float,
    k_pos: int,
    k_neg: int,
    use_logit_scale: bool = False,
) -> Tensor:
    """Full alignment objective for a batch.

    Gradients flow into the aligner and the text projector but never into the
    pixel-encoder features, which are treated as frozen.
    """
    region_feats = grid.values.detach()
    values = region_feats @ aligner.value_proj  # (B, L, d_k)

    grouped = prompt_bank.grouped()             # (B, M, K, d_vis)
    anchor_rows = []
    positive_rows = []
    owners: list[int] = []
    attentions: list[RegionAttention] = []
    for b in range(seg_states.values.shape[0]):
        for m in range(seg_states.values.shape[1]):
            if not bool(seg_states.valid[b, m]):
                continue
            attn = attend_region(aligner, seg_states.values[b, m], region_feats[b], k_pos)
            positive_rows.append(_normalize(positive_embedding(aligner, attn, values[b])))
            anchor_rows.append(_normalize(grouped[b, m].mean(dim=0)))
            owners.append(b)
            attentions.append(attn)
    if not anchor_rows:
        raise DegenerateBatch("batch carries no valid <SEG> anchors")

    anchors = torch.stack(anchor_rows)
    positives = torch.stack(positive_rows)
    pools = build_negatives(aligner, anchors, positives, owners, attentions, values, k_neg)
    scale = ctp.logit_scale if use_logit_scale else 1.0
    return info_nce(anchors, positives, pools, tau, logit_scale=scale)
