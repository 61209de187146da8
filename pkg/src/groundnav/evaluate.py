"""Generate responses, parse them, and score the full metric suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import grammar, metrics
from .config import ModelConfig
from .curation import VQASample
from .errors import EmptyInput
from .metrics import (
    DepthPair,
    ImageGroundTruth,
    ImagePredictions,
    MetricsReport,
    StructuredResponse,
)
from .model import GroundedNavModel
from .synthetic import PreparedSample
from .tokenizer import ResponseTokenizer


@dataclass
class EvalOutcome:
    report: MetricsReport
    n_parse_failures: int
    n_depth_skipped: int
    rows: list[dict] = field(default_factory=list)

    @property
    def parse_failure_rate(self) -> float:
        total = self.report.n_samples
        return self.n_parse_failures / total if total else 0.0


def _gt_for(sample: VQASample) -> ImageGroundTruth:
    return ImageGroundTruth(
        labels=[o.class_id for o in sample.objects],
        masks=[m.astype(bool) for m in sample.masks],
    )


def _predict_one(
    model: GroundedNavModel,
    tokenizer: ResponseTokenizer,
    config: ModelConfig,
    prepared: PreparedSample,
    lexicon: dict[str, int],
    max_new: int,
) -> tuple[StructuredResponse | None, ImagePredictions]:
    dtype = getattr(torch, config.dtype)
    prompt_ids = [tokenizer.BOS] + tokenizer.encode(prepared.sample.question + "\n")
    image = torch.from_numpy(prepared.image.transpose(2, 0, 1)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        grid = model.encode_image(image)
        image_tokens = model.project_image(grid)
        out_ids, hidden = model.generate(
            torch.tensor(prompt_ids, dtype=torch.int64),
            image_tokens,
            max_new=max_new,
            eos_id=tokenizer.EOS,
        )
    generated_ids = out_ids.tolist()
    text = tokenizer.decode(generated_ids[len(prompt_ids):])
    try:
        response = grammar.parse_response(text)
    except grammar.MalformedResponse:
        return None, ImagePredictions(labels=[], masks=[], scores=[])

    seg_positions = grammar.extract_seg_positions(generated_ids, tokenizer.seg_token_id)
    if not seg_positions:
        return response, ImagePredictions(labels=[], masks=[], scores=[])
    with torch.no_grad():
        seg_states = model.seg_hidden_states(hidden.unsqueeze(0), [seg_positions])
        prompt_bank = model.ctp(seg_states)
        mask_logits = model.decode_masks(prompt_bank, grid, image_tokens)[0]
    labels: list[int | None] = []
    masks = []
    scores = []
    for k, phrase in enumerate(response.phrases):
        labels.append(lexicon.get(grammar.normalize_name(phrase.phrase)))
        logits = mask_logits[k]
        binary = (logits > 0).numpy()
        probs = torch.sigmoid(logits).numpy()
        score = float(probs[binary].mean()) if binary.any() else 0.0
        masks.append(binary)
        scores.append(score)
    return response, ImagePredictions(labels=labels, masks=masks, scores=scores)


def evaluate_samples(
    model: GroundedNavModel | None,
    tokenizer: ResponseTokenizer,
    config: ModelConfig,
    prepared: list[PreparedSample],
    lexicon: dict[str, int],
    self_eval: bool = False,
    max_new: int = 320,
    overlay_dir: str | Path | None = None,
) -> EvalOutcome:
    """Score predictions against ground truth.

    With ``self_eval`` the ground-truth answers and masks stand in for the
    model's predictions, which exercises the metric pipeline end to end and
    should score perfectly up to the 0.1 m distance discretization.
    """
    predictions: list[ImagePredictions] = []
    ground_truths: list[ImageGroundTruth] = []
    responses: list[StructuredResponse] = []
    annotations = []
    depth_pairs: list[DepthPair] = []
    n_parse_failures = 0
    n_depth_skipped = 0
    rows = []

    for item in prepared:
        sample = item.sample
        ground_truths.append(_gt_for(sample))
        if self_eval:
            response = grammar.parse_response(sample.answer)
            pred = ImagePredictions(
                labels=[o.class_id for o in sample.objects],
                masks=[m.astype(bool) for m in sample.masks],
                scores=[1.0] * len(sample.masks),
            )
        else:
            if model is None:
                raise ValueError("model required unless self_eval")
            response, pred = _predict_one(model, tokenizer, config, item, lexicon, max_new)
        predictions.append(pred)
        row = {"sample_id": sample.sample_id, "parse_ok": response is not None}
        if response is None:
            n_parse_failures += 1
        else:
            responses.append(response)
            annotations.append(sample.annotation)
            pairing = metrics.parse_distances_for_eval(response, sample.annotation)
            depth_pairs.extend(pairing.pairs)
            n_depth_skipped += pairing.n_skipped
            row["n_phrases"] = len(response.phrases)
            row["n_distances"] = len(response.distances)
        rows.append(row)
        if overlay_dir is not None:
            _dump_overlay(Path(overlay_dir), item, pred)

    miou, recall, ap50 = metrics.segmentation_metrics(predictions, ground_truths)
    chair_i, cover = metrics.hallucination_metrics(responses, annotations, lexicon)
    try:
        depth_acc = metrics.depth_accuracy(depth_pairs)
        rel = metrics.abs_rel(depth_pairs)
    except EmptyInput:
        depth_acc, rel = 0.0, 0.0
    report = MetricsReport(
        depth_acc=depth_acc,
        abs_rel=rel,
        miou=miou,
        recall=recall,
        ap50=ap50,
        chair_i=chair_i,
        cover=cover,
        n_samples=len(prepared),
        n_depth_pairs=len(depth_pairs),
    )
    return EvalOutcome(
        report=report,
        n_parse_failures=n_parse_failures,
        n_depth_skipped=n_depth_skipped,
        rows=rows,
    )


def _dump_overlay(out_dir: Path, item: PreparedSample, pred: ImagePredictions) -> None:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    base = (item.image * 255).astype(np.float64) * 0.6
    tint = np.zeros_like(base)
    colors = ((255, 64, 64), (64, 255, 64), (64, 64, 255), (255, 255, 64), (255, 64, 255))
    for k, mask in enumerate(pred.masks):
        color = np.array(colors[k % len(colors)], dtype=np.float64)
        tint[mask] += 0.4 * color
    overlay = np.clip(base + tint, 0, 255).astype(np.uint8)
    Image.fromarray(overlay).save(out_dir / f"{item.sample.sample_id}_overlay.png")
