"""Segmentation, depth and hallucination metrics over parsed outputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curation import SceneAnnotation
from .errors import EmptyInput, ShapeMismatch
from .grammar import IGNORE, StructuredResponse, normalize_name


@dataclass
class DepthPair:
    d_pred: float
    d_gt: float  # must be positive


@dataclass
class MetricsReport:
    depth_acc: float
    abs_rel: float
    miou: float
    recall: float
    ap50: float
    chair_i: float
    cover: float
    n_samples: int
    n_depth_pairs: int

    def to_dict(self) -> dict:
        return {
            "depth_acc": self.depth_acc,
            "abs_rel": self.abs_rel,
            "miou": self.miou,
            "recall": self.recall,
            "ap50": self.ap50,
            "chair_i": self.chair_i,
            "cover": self.cover,
            "n_samples": self.n_samples,
            "n_depth_pairs": self.n_depth_pairs,
        }


def depth_accuracy(pairs: Sequence[DepthPair]) -> float:
    """Percent of predictions inside the inclusive [0.5x, 2x] band."""
    if not pairs:
        raise EmptyInput("no depth pairs")
    hits = sum(1 for p in pairs if 0.5 * p.d_gt <= p.d_pred <= 2.0 * p.d_gt)
    return 100.0 * hits / len(pairs)


def abs_rel(pairs: Sequence[DepthPair]) -> float:
    """Percent mean absolute error relative to ground truth."""
    if not pairs:
        raise EmptyInput("no depth pairs")
    return 100.0 * sum(abs(p.d_pred - p.d_gt) / p.d_gt for p in pairs) / len(pairs)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


@dataclass
class ImagePredictions:
    """Predicted masks of one image, in response order."""

    labels: list[int | None]          # resolved class id per mask, None if unresolved
    masks: list[np.ndarray]
    scores: list[float]               # mean in-mask probability, ranking key for AP


@dataclass
class ImageGroundTruth:
    labels: list[int]
    masks: list[np.ndarray]


def _best_same_label_iou(
    gt_label: int, gt_mask: np.ndarray, pred: ImagePredictions
) -> float:
    best = 0.0
    for label, mask in zip(pred.labels, pred.masks):
        if label == gt_label:
            best = max(best, mask_iou(gt_mask, mask))
    return best


def segmentation_metrics(
    predictions: Sequence[ImagePredictions],
    ground_truths: Sequence[ImageGroundTruth],
) -> tuple[float, float, float]:
    """(mIoU, Recall, AP50), all in percent.

    mIoU: per image, the mean over ground-truth masks of the best same-label
    prediction IoU (0 when unmatched), averaged over images. Recall: fraction
    of all ground-truth masks with a same-label prediction of IoU >= 0.5.
    AP50: predictions ranked by score across the dataset, matched greedily
    one-to-one to same-label ground truth at IoU >= 0.5; AP is the mean of
    precision-at-each-true-positive with the full ground-truth count as
    denominator (no interpolation).
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("prediction/ground-truth length mismatch")

    per_image_iou = []
    n_gt_total = 0
    n_gt_recalled = 0
    for pred, gt in zip(predictions, ground_truths):
        ious = []
        for label, mask in zip(gt.labels, gt.masks):
            best = _best_same_label_iou(label, mask, pred)
            ious.append(best)
            n_gt_total += 1
            if best >= 0.5:
                n_gt_recalled += 1
        if ious:
            per_image_iou.append(float(np.mean(ious)))
    miou = 100.0 * float(np.mean(per_image_iou)) if per_image_iou else 0.0
    recall = 100.0 * n_gt_recalled / n_gt_total if n_gt_total else 0.0

    # AP50 with deterministic ranking: score desc, then image and mask order.
    ranked = []
    for img_idx, pred in enumerate(predictions):
        for k, (label, mask, score) in enumerate(zip(pred.labels, pred.masks, pred.scores)):
            ranked.append((-score, img_idx, k, label, mask))
    ranked.sort(key=lambda r: (r[0], r[1], r[2]))

    matched: set[tuple[int, int]] = set()
    tp_flags = []
    for _, img_idx, _, label, mask in ranked:
        gt = ground_truths[img_idx]
        best_iou, best_j = 0.0, None
        for j, (gt_label, gt_mask) in enumerate(zip(gt.labels, gt.masks)):
            if gt_label != label or (img_idx, j) in matched:
                continue
            iou = mask_iou(gt_mask, mask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j is not None and best_iou >= 0.5:
            matched.add((img_idx, best_j))
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    if n_gt_total == 0 or not tp_flags:
        ap50 = 0.0
    else:
        precision_sum = 0.0
        n_tp = 0
        for rank, flag in enumerate(tp_flags, start=1):
            if flag:
                n_tp += 1
                precision_sum += n_tp / rank
        ap50 = 100.0 * precision_sum / n_gt_total
    return miou, recall, ap50


def hallucination_metrics(
    responses: Sequence[StructuredResponse],
    annotations: Sequence[SceneAnnotation],
    lexicon: dict[str, int],
) -> tuple[float, float]:
    """(CHAIR_i, Cover) in percent over the whole corpus.

    A mention counts as a hallucination when its phrase resolves (via the
    lexicon, case/whitespace-normalized) to no class present in its scene;
    unresolvable phrases count as hallucinations. Cover is the fraction of
    present ground-truth classes mentioned at least once.
    """
    n_mentions = 0
    n_hallucinated = 0
    n_present_total = 0
    n_present_mentioned = 0
    for response, annotation in zip(responses, annotations):
        present = {
            cid
            for cid in annotation.present_classes
            if annotation.ontology.accessibility[cid] != IGNORE
        }
        mentioned_ids = set()
        for phrase in response.phrases:
            n_mentions += 1
            cid = lexicon.get(normalize_name(phrase.phrase))
            if cid is None or cid not in present:
                n_hallucinated += 1
            else:
                mentioned_ids.add(cid)
        n_present_total += len(present)
        n_present_mentioned += len(present & mentioned_ids)
    chair_i = 100.0 * n_hallucinated / n_mentions if n_mentions else 0.0
    cover = 100.0 * n_present_mentioned / n_present_total if n_present_total else 0.0
    return chair_i, cover


@dataclass
class DistancePairing:
    pairs: list[DepthPair] = field(default_factory=list)
    n_skipped: int = 0


def parse_distances_for_eval(
    response: StructuredResponse, annotation: SceneAnnotation
) -> DistancePairing:
    """Pair predicted distances with ground-truth per-class minimum depths.

    Entries that resolve to no present class (or to a class without a valid
    ground-truth depth) are skipped and counted, not scored.
    """
    result = DistancePairing()
    by_name = {
        normalize_name(annotation.ontology.class_names[cid]): cid
        for cid in annotation.present_classes
        if annotation.ontology.accessibility[cid] != IGNORE
    }
    for entry in response.distances:
        cid = by_name.get(normalize_name(entry.object_name))
        gt = annotation.class_min_depth.get(cid) if cid is not None else None
        if gt is None or gt <= 0:
            result.n_skipped += 1
            continue
        result.pairs.append(DepthPair(d_pred=entry.distance_m, d_gt=gt))
    return result
