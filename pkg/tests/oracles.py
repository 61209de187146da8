"""Independent explicit-loop oracles used to verify the vectorized paths.

Everything here is written with plain Python loops over numpy scalars so it
stays structurally independent of the implementations under test.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_loop(scores: np.ndarray) -> np.ndarray:
    shift = max(float(s) for s in scores)
    exps = [math.exp(float(s) - shift) for s in scores]
    total = sum(exps)
    return np.array([e / total for e in exps])


def single_head_attention_loop(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """q (Q, d), k/v (N, d) -> (Q, d), softmax over N per query."""
    n_q, d = q.shape
    out = np.zeros((n_q, v.shape[1]), dtype=np.float64)
    for i in range(n_q):
        scores = np.array([float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(k.shape[0])])
        weights = softmax_loop(scores)
        for j in range(k.shape[0]):
            out[i] += weights[j] * v[j]
    return out


def mean_pool_loop(grid: np.ndarray, k: int) -> np.ndarray:
    """grid (H, W, d) -> (H//k, W//k, d) block means."""
    h, w, d = grid.shape
    out = np.zeros((h // k, w // k, d), dtype=np.float64)
    for i in range(h // k):
        for j in range(w // k):
            acc = np.zeros(d)
            for di in range(k):
                for dj in range(k):
                    acc += grid[i * k + di, j * k + dj]
            out[i, j] = acc / (k * k)
    return out


def nn_resize_loop(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = mask.shape
    out = np.zeros((out_h, out_w), dtype=mask.dtype)
    for i in range(out_h):
        for j in range(out_w):
            si = min(int(math.floor((i + 0.5) * in_h / out_h)), in_h - 1)
            sj = min(int(math.floor((j + 0.5) * in_w / out_w)), in_w - 1)
            out[i, j] = mask[si, sj]
    return out


def min_depth_loop(mask: np.ndarray, depth: np.ndarray) -> dict[int, float]:
    out: dict[int, float] = {}
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            d = float(depth[i, j])
            if not math.isfinite(d) or d <= 0:
                continue
            cid = int(mask[i, j])
            if cid not in out or d < out[cid]:
                out[cid] = d
    return out


def masked_ce_loop(logits: np.ndarray, input_ids: np.ndarray, answer_mask: np.ndarray) -> float:
    """Teacher-forced NLL pooled over masked target positions (position >= 1)."""
    total, count = 0.0, 0
    b, s, v = logits.shape
    for row in range(b):
        for pos in range(1, s):
            if not answer_mask[row, pos]:
                continue
            scores = logits[row, pos - 1]
            weights = softmax_loop(scores)
            total += -math.log(weights[int(input_ids[row, pos])])
            count += 1
    return total / count


def dice_loop(pred_logits: list[np.ndarray], gt_masks: list[np.ndarray], eps: float = 1.0) -> float:
    losses = []
    for pred, gt in zip(pred_logits, gt_masks):
        num = eps
        den = eps
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = 1.0 / (1.0 + math.exp(-float(pred[i, j])))
                g = float(gt[i, j])
                num += 2.0 * p * g
                den += p + g
        losses.append(1.0 - num / den)
    return sum(losses) / len(losses)


def bce_loop(pred_logits: list[np.ndarray], gt_masks: list[np.ndarray]) -> float:
    losses = []
    for pred, gt in zip(pred_logits, gt_masks):
        total = 0.0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                z = float(pred[i, j])
                g = float(gt[i, j])
                # log(1 + exp(-|z|)) trick for stability
                total += max(z, 0.0) - z * g + math.log1p(math.exp(-abs(z)))
        losses.append(total / pred.size)
    return sum(losses) / len(losses)


def info_nce_loop(
    anchors: np.ndarray, positives: np.ndarray, pools: list[np.ndarray], tau: float
) -> float:
    losses = []
    for i in range(anchors.shape[0]):
        a = float(np.dot(anchors[i], positives[i])) / tau
        exps = math.exp(a)
        denom = exps
        for neg in pools[i]:
            denom += math.exp(float(np.dot(anchors[i], neg)) / tau)
        losses.append(-math.log(exps / denom))
    return sum(losses) / len(losses)


def normalize_loop(x: np.ndarray) -> np.ndarray:
    norm = math.sqrt(sum(float(v) ** 2 for v in x))
    return x / max(norm, 1e-12)


def topk_lowest_index_loop(scores: np.ndarray, k: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    return order[:min(k, len(scores))]


def region_alignment_loop(
    seg_states: np.ndarray,   # (B, M, H)
    valid: np.ndarray,        # (B, M) bool
    region_feats: np.ndarray, # (B, L, C)
    grouped_bank: np.ndarray, # (B, M, K, d_vis)
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_o: np.ndarray,
    tau: float,
    k_pos: int,
    k_neg: int,
    logit_scale: float = 1.0,
) -> float:
    """Full-pipeline oracle for the region alignment loss."""
    d_k = w_q.shape[1]
    anchors, positives, owners, selections = [], [], [], []
    n_batches, n_tokens = seg_states.shape[0], seg_states.shape[1]
    for b in range(n_batches):
        for m in range(n_tokens):
            if not valid[b, m]:
                continue
            q = seg_states[b, m] @ w_q
            keys = region_feats[b] @ w_k
            values = region_feats[b] @ w_v
            pi = softmax_loop(keys @ q / math.sqrt(d_k))
            sel = topk_lowest_index_loop(pi, k_pos)
            alpha = np.array([pi[i] for i in sel])
            alpha = alpha / alpha.sum()
            pooled = np.zeros(d_k)
            for w, i in zip(alpha, sel):
                pooled += w * values[i]
            positives.append(normalize_loop(pooled @ w_o))
            anchors.append(normalize_loop(grouped_bank[b, m].mean(axis=0)))
            owners.append(b)
            selections.append(set(sel))
    pools = []
    for i in range(len(anchors)):
        pool = [positives[j] for j in range(len(anchors)) if j != i]
        if k_neg > 0:
            b = owners[i]
            values = region_feats[b] @ w_v
            remaining = [j for j in range(region_feats.shape[1]) if j not in selections[i]]
            cands = [normalize_loop(values[j] @ w_o) for j in remaining]
            sims = np.array([float(np.dot(c, anchors[i])) for c in cands])
            for idx in topk_lowest_index_loop(sims, k_neg):
                pool.append(cands[idx])
        pools.append(np.array(pool) if pool else np.zeros((0, w_o.shape[1])))
    scaled = [np.array(p) * 1.0 for p in pools]
    losses = []
    for i in range(len(anchors)):
        a = logit_scale * float(np.dot(anchors[i], positives[i])) / tau
        denom = math.exp(a)
        for neg in scaled[i]:
            denom += math.exp(logit_scale * float(np.dot(anchors[i], neg)) / tau)
        losses.append(-math.log(math.exp(a) / denom))
    return sum(losses) / len(losses)


def depth_acc_loop(pairs: list[tuple[float, float]]) -> float:
    hits = 0
    for pred, gt in pairs:
        if 0.5 * gt <= pred <= 2.0 * gt:
            hits += 1
    return 100.0 * hits / len(pairs)


def abs_rel_loop(pairs: list[tuple[float, float]]) -> float:
    total = 0.0
    for pred, gt in pairs:
        total += abs(pred - gt) / gt
    return 100.0 * total / len(pairs)


def iou_loop(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    union = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x = bool(a[i, j])
            y = bool(b[i, j])
            inter += x and y
            union += x or y
    return inter / union if union else 1.0
