"""Joint training loop and the single-batch overfit harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from . import grammar
from .checkpoint import (
    Checkpoint,
    restore_model_state,
    restore_optimizer_state,
    save_checkpoint,
)
from .alignment import region_alignment_loss
from .config import ModelConfig
from .errors import NonFiniteLoss
from .losses import (
    SPAN_DISTANCE,
    LossBreakdown,
    MaskPair,
    TokenBatch,
    bce_seg,
    dice_loss,
    masked_ce,
    span_ce,
    total_loss,
)
from .model import GroundedNavModel
from .synthetic import PreparedSample
from .tokenizer import ResponseTokenizer, build_token_batch


@dataclass
class PreparedBatch:
    images: Tensor               # (B, 3, H, W)
    tokens: TokenBatch
    gt_masks: list[Tensor]       # per sample (M_b, H, W) float {0,1}


def prepare_batch(
    prepared: list[PreparedSample],
    tokenizer: ResponseTokenizer,
    config: ModelConfig,
) -> PreparedBatch:
    dtype = getattr(torch, config.dtype)
    images = torch.stack(
        [torch.from_numpy(p.image.transpose(2, 0, 1)).to(dtype) for p in prepared]
    )
    tokens = build_token_batch(
        [p.sample for p in prepared],
        tokenizer,
        config.max_seq_len,
        include_distance=config.use_distance,
    )
    gt_masks = [
        torch.stack([torch.from_numpy(m.astype(np.float64)).to(dtype) for m in p.sample.masks])
        for p in prepared
    ]
    return PreparedBatch(images=images, tokens=tokens, gt_masks=gt_masks)


class Trainer:
    """Single-process trainer over the full pipeline.

    The pixel encoder stays frozen; the optimizer owns every other parameter
    group (projector, LM unless frozen, text projector, decoder, aligner).
    """

    def __init__(
        self,
        config: ModelConfig,
        tokenizer: ResponseTokenizer | None = None,
        model: GroundedNavModel | None = None,
    ):
        self.config = config
        self.tokenizer = tokenizer or ResponseTokenizer.build()
        if self.tokenizer.vocab_size > config.vocab_size:
            raise ValueError(
                f"tokenizer needs {self.tokenizer.vocab_size} ids, config has {config.vocab_size}"
            )
        self.model = model or GroundedNavModel(config)
        self.optimizer = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=config.lr,
            weight_decay=config.weight_decay,
        )
        self.step = 0
        self._accum = 0

    # ------------------------------------------------------------------
    def compute_losses(self, batch: PreparedBatch) -> tuple[Tensor, LossBreakdown]:
        model = self.model
        config = self.config
        grid = model.encode_image(batch.images)
        image_tokens = model.project_image(grid)
        logits, hidden = model.lm_forward(batch.tokens.input_ids, image_tokens)

        ce = masked_ce(logits, batch.tokens, per_sample=config.per_sample_ce)
        dist = span_ce(logits, batch.tokens, SPAN_DISTANCE)

        seg_states = model.seg_hidden_states(hidden, batch.tokens.seg_positions)
        zero = logits.new_zeros(())
        dice = bce = nce = zero
        if int(seg_states.valid.sum()) > 0:
            prompt_bank = model.ctp(seg_states)
            mask_logits = model.decode_masks(prompt_bank, grid, image_tokens)
            pairs = []
            for b, (pred, gt) in enumerate(zip(mask_logits, batch.gt_masks)):
                if pred.shape[0] != gt.shape[0]:
                    raise ValueError(
                        f"sample {b}: {pred.shape[0]} predicted masks vs {gt.shape[0]} ground truth"
                    )
                pairs.extend(
                    MaskPair(pred_logits=pred[m], gt_mask=gt[m], pairing=m)
                    for m in range(pred.shape[0])
                )
            dice = dice_loss(pairs)
            bce = bce_seg(pairs)
            if config.use_nce:
                nce = region_alignment_loss(
                    model.align,
                    model.ctp,
                    seg_states,
                    grid,
                    prompt_bank,
                    tau=config.tau,
                    k_pos=config.k_pos,
                    k_neg=config.k_neg,
                    use_logit_scale=config.use_logit_scale,
                )
        return total_loss(ce, dice, bce, nce, config.weights, dist_span_ce=dist.loss)

    def train_step(self, batch: PreparedBatch) -> LossBreakdown:
        """One forward/backward; applies the update every grad_accum calls."""
        try:
            total, breakdown = self.compute_losses(batch)
        except NonFiniteLoss:
            self.optimizer.zero_grad(set_to_none=True)
            self._accum = 0
            raise
        (total / self.config.grad_accum).backward()
        self._accum += 1
        if self._accum >= self.config.grad_accum:
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
            self._accum = 0
        self.step += 1
        return breakdown

    # ------------------------------------------------------------------
    def steps_per_epoch(self, n_samples: int) -> int:
        return max(1, math.ceil(n_samples / self.config.batch_size))

    def run(
        self,
        prepared: list[PreparedSample],
        epochs: int | None = None,
        max_steps: int | None = None,
        log_fn: Callable[[dict], None] | None = None,
    ) -> None:
        """Train for ``epochs`` (or until ``max_steps``), resumable at any step.

        The sample order of epoch ``e`` is a permutation derived from
        (seed, e), so a resumed run replays the identical schedule.
        """
        config = self.config
        spe = self.steps_per_epoch(len(prepared))
        if max_steps is None:
            max_steps = (config.epochs if epochs is None else epochs) * spe
        while self.step < max_steps:
            epoch = self.step // spe
            order = np.random.default_rng([config.seed, epoch]).permutation(len(prepared))
            for index_in_epoch in range(self.step % spe, spe):
                if self.step >= max_steps:
                    break
                sel = order[
                    index_in_epoch * config.batch_size:(index_in_epoch + 1) * config.batch_size
                ]
                batch = prepare_batch([prepared[i] for i in sel], self.tokenizer, config)
                breakdown = self.train_step(batch)
                if log_fn is not None:
                    log_fn({"step": self.step, "epoch": epoch, **breakdown.to_dict()})

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer, step=self.step, epoch=0)

    @classmethod
    def restore(cls, checkpoint: Checkpoint, tokenizer: ResponseTokenizer | None = None) -> "Trainer":
        trainer = cls(checkpoint.config, tokenizer=tokenizer)
        restore_model_state(trainer.model, checkpoint)
        restore_optimizer_state(trainer.model, trainer.optimizer, checkpoint)
        trainer.step = checkpoint.step
        return trainer


# ---------------------------------------------------------------------------
# Teacher-forced diagnostics and the overfit harness
# ---------------------------------------------------------------------------

def token_accuracy(logits: Tensor, tokens: TokenBatch) -> float:
    """Greedy next-token accuracy over answer positions."""
    mask = tokens.answer_mask.clone()
    mask[:, 0] = False
    pred = logits[:, :-1].argmax(dim=-1)
    hits = (pred == tokens.input_ids[:, 1:]) & mask[:, 1:]
    return float(hits.sum()) / float(mask.sum())


def predicted_mask_iou(trainer: Trainer, batch: PreparedBatch) -> float:
    """Mean IoU of thresholded predicted masks against ground truth."""
    model = trainer.model
    with torch.no_grad():
        grid = model.encode_image(batch.images)
        image_tokens = model.project_image(grid)
        _, hidden = model.lm_forward(batch.tokens.input_ids, image_tokens)
        seg_states = model.seg_hidden_states(hidden, batch.tokens.seg_positions)
        prompt_bank = model.ctp(seg_states)
        mask_logits = model.decode_masks(prompt_bank, grid, image_tokens)
    ious = []
    for pred, gt in zip(mask_logits, batch.gt_masks):
        for m in range(pred.shape[0]):
            p = pred[m] > 0
            g = gt[m] > 0.5
            union = (p | g).sum()
            ious.append(float((p & g).sum()) / float(union) if union > 0 else 1.0)
    return float(np.mean(ious)) if ious else 0.0


def distance_span_ids(ids: list[int], tokenizer: ResponseTokenizer) -> list[int]:
    open_id = tokenizer.tag_ids[grammar.TAG_DISTANCE_OPEN]
    close_id = tokenizer.tag_ids[grammar.TAG_DISTANCE_CLOSE]
    if open_id not in ids or close_id not in ids:
        return []
    start = ids.index(open_id)
    end = ids.index(close_id, start + 1)
    return ids[start:end + 1]


def distance_exactly_reproduced(trainer: Trainer, prepared: list[PreparedSample]) -> bool:
    """Greedy generation reproduces every sample's <distance> span verbatim."""
    model = trainer.model
    tokenizer = trainer.tokenizer
    config = trainer.config
    dtype = getattr(torch, config.dtype)
    for p in prepared:
        prompt_ids = [tokenizer.BOS] + tokenizer.encode(p.sample.question + "\n")
        target_ids = tokenizer.encode(p.sample.answer) + [tokenizer.EOS]
        image = torch.from_numpy(p.image.transpose(2, 0, 1)).to(dtype).unsqueeze(0)
        with torch.no_grad():
            grid = model.encode_image(image)
            image_tokens = model.project_image(grid)
            out_ids, _ = model.generate(
                torch.tensor(prompt_ids, dtype=torch.int64),
                image_tokens,
                max_new=len(target_ids) + 8,
                eos_id=tokenizer.EOS,
            )
        generated = out_ids.tolist()[len(prompt_ids):]
        if distance_span_ids(generated, tokenizer) != distance_span_ids(target_ids, tokenizer):
            return False
    return True


@dataclass
class OverfitReport:
    steps: int
    token_acc: float
    mean_mask_iou: float
    distance_exact: bool
    initial_total: float
    final_total: float
    history: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.token_acc >= 0.99 and self.mean_mask_iou >= 0.9 and self.distance_exact


def overfit_harness(
    config: ModelConfig,
    prepared: list[PreparedSample],
    max_steps: int = 500,
    check_every: int = 25,
) -> OverfitReport:
    """Memorize a fixed batch; checks accuracy/IoU/distance reproduction."""
    trainer = Trainer(config)
    batch = prepare_batch(prepared, trainer.tokenizer, config)
    history: list[float] = []
    token_acc = 0.0
    mean_iou = 0.0
    distance_ok = False
    steps_done = 0
    for step in range(1, max_steps + 1):
        breakdown = trainer.train_step(batch)
        history.append(breakdown.total)
        steps_done = step
        if step % check_every == 0 or step == max_steps:
            with torch.no_grad():
                grid = trainer.model.encode_image(batch.images)
                image_tokens = trainer.model.project_image(grid)
                logits, _ = trainer.model.lm_forward(batch.tokens.input_ids, image_tokens)
            token_acc = token_accuracy(logits, batch.tokens)
            mean_iou = predicted_mask_iou(trainer, batch)
            if token_acc >= 0.99 and mean_iou >= 0.9:
                distance_ok = distance_exactly_reproduced(trainer, prepared)
                if distance_ok:
                    break
    return OverfitReport(
        steps=steps_done,
        token_acc=token_acc,
        mean_mask_iou=mean_iou,
        distance_exact=distance_ok,
        initial_total=history[0],
        final_total=history[-1],
        history=history,
    )
