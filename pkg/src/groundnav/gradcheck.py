"""Central finite-difference verification of every analytic gradient path.

Each check builds a tiny double-precision instance, takes autograd gradients
of a scalar readout, and compares them element by element against central
differences with step 1e-5. Relative error uses max(|analytic|, |numeric|,
1e-6) as the denominator so structurally-zero gradients do not divide by
zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from .alignment import RegionAligner, region_alignment_loss
from .ctp import CalibratedTextProjector, SegTokenStates
from .losses import MaskPair, TokenBatch, bce_seg, dice_loss, masked_ce
from .model import MaskDecoder
from .msqp import FeatureGrid, MultiScaleQueryProjector, ProjectedImageTokens

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    n_params: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def analytic_gradients(
    scalar_fn: Callable[[], Tensor], params: list[tuple[str, Tensor]]
) -> dict[str, Tensor]:
    for _, p in params:
        if p.grad is not None:
            p.grad = None
    scalar_fn().backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }


def finite_difference_gradients(
    scalar_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    step: float = FD_STEP,
) -> dict[str, Tensor]:
    grads = {}
    with torch.no_grad():
        for name, p in params:
            grad = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                upper = float(scalar_fn())
                flat[i] = original - step
                lower = float(scalar_fn())
                flat[i] = original
                gflat[i] = (upper - lower) / (2.0 * step)
            grads[name] = grad
    return grads


def max_relative_error(
    analytic: dict[str, Tensor], numeric: dict[str, Tensor]
) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = torch.maximum(
            torch.maximum(a.abs(), n.abs()), torch.full_like(a, 1e-6)
        )
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def _run_check(
    name: str,
    scalar_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    corrupt: str | None,
) -> CheckResult:
    start = time.monotonic()
    analytic = analytic_gradients(scalar_fn, params)
    if corrupt == name:
        first = next(iter(analytic))
        analytic[first] = analytic[first] + 1e-2
    numeric = finite_difference_gradients(scalar_fn, params)
    err = max_relative_error(analytic, numeric)
    n_params = sum(p.numel() for _, p in params)
    return CheckResult(name=name, n_params=n_params, max_rel_err=err, seconds=time.monotonic() - start)


def _named(module: torch.nn.Module, prefix: str) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


def check_msqp(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    msqp = MultiScaleQueryProjector(
        feat_dim=8, proj_dim=16, llm_dim=16, n_heads=8, dtype=torch.float64
    )
    grid = FeatureGrid(values=torch.randn(1, 64, 8, dtype=torch.float64), grid_h=8, grid_w=8)
    return _run_check(
        "msqp", lambda: msqp(grid).values.sum(), _named(msqp, "msqp"), corrupt
    )


def check_ctp(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    ctp = CalibratedTextProjector(llm_dim=8, vis_dim=6, k_bank=3, dtype=torch.float64)
    states = SegTokenStates(
        values=torch.randn(1, 2, 8, dtype=torch.float64),
        valid=torch.ones(1, 2, dtype=torch.bool),
    )
    return _run_check("ctp", lambda: ctp(states).values.sum(), _named(ctp, "ctp"), corrupt)


def check_region_alignment(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    llm_dim, feat_dim, vis_dim = 8, 6, 4
    aligner = RegionAligner(llm_dim, feat_dim, vis_dim, dtype=torch.float64)
    ctp = CalibratedTextProjector(llm_dim, vis_dim, k_bank=2, dtype=torch.float64)
    states = SegTokenStates(
        values=torch.randn(2, 2, llm_dim, dtype=torch.float64),
        valid=torch.ones(2, 2, dtype=torch.bool),
    )
    grid = FeatureGrid(values=torch.randn(2, 16, feat_dim, dtype=torch.float64), grid_h=4, grid_w=4)

    def loss() -> Tensor:
        bank = ctp(states)
        return region_alignment_loss(
            aligner, ctp, states, grid, bank,
            tau=0.07, k_pos=4, k_neg=2, use_logit_scale=True,
        )

    params = _named(aligner, "align") + _named(ctp, "ctp")
    return _run_check("region_alignment", loss, params, corrupt)


def check_masked_ce(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    logits = torch.randn(2, 7, 11, dtype=torch.float64, requires_grad=True)
    input_ids = torch.randint(0, 11, (2, 7))
    answer_mask = torch.zeros(2, 7, dtype=torch.bool)
    answer_mask[:, 3:] = True
    batch = TokenBatch(
        input_ids=input_ids,
        answer_mask=answer_mask,
        span_labels=torch.zeros(2, 7, dtype=torch.int64),
    )
    return _run_check(
        "masked_ce", lambda: masked_ce(logits, batch), [("logits", logits)], corrupt
    )


def check_dice(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    preds = torch.randn(2, 6, 6, dtype=torch.float64, requires_grad=True)
    gts = (torch.rand(2, 6, 6) > 0.5).double()
    pairs = lambda: [MaskPair(preds[i], gts[i]) for i in range(2)]  # noqa: E731
    return _run_check("dice", lambda: dice_loss(pairs()), [("pred_logits", preds)], corrupt)


def check_bce(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    preds = torch.randn(2, 6, 6, dtype=torch.float64, requires_grad=True)
    gts = (torch.rand(2, 6, 6) > 0.5).double()
    pairs = lambda: [MaskPair(preds[i], gts[i]) for i in range(2)]  # noqa: E731
    return _run_check("bce", lambda: bce_seg(pairs()), [("pred_logits", preds)], corrupt)


def check_decoder(seed: int, corrupt: str | None) -> CheckResult:
    torch.manual_seed(seed)
    feat_dim, vis_dim, llm_dim, image_size = 6, 4, 8, 8
    decoder = MaskDecoder(feat_dim, vis_dim, llm_dim, image_size, dtype=torch.float64)
    ctp = CalibratedTextProjector(llm_dim, vis_dim, k_bank=2, dtype=torch.float64)
    states = SegTokenStates(
        values=torch.randn(1, 2, llm_dim, dtype=torch.float64),
        valid=torch.ones(1, 2, dtype=torch.bool),
    )
    grid = FeatureGrid(values=torch.randn(1, 16, feat_dim, dtype=torch.float64), grid_h=4, grid_w=4)
    image_tokens = ProjectedImageTokens(
        values=torch.randn(1, 36, llm_dim, dtype=torch.float64),
        pad_mask=torch.zeros(1, 36, dtype=torch.bool),
    )
    gts = [(torch.rand(image_size, image_size) > 0.5).double() for _ in range(2)]

    def loss() -> Tensor:
        bank = ctp(states)
        mask_logits = decoder(bank, grid, image_tokens)[0]
        pairs = [MaskPair(mask_logits[m], gts[m]) for m in range(2)]
        return dice_loss(pairs) + bce_seg(pairs)

    params = _named(decoder, "decoder") + _named(ctp, "ctp")
    return _run_check("decoder", loss, params, corrupt)


ALL_CHECKS = {
    "msqp": check_msqp,
    "ctp": check_ctp,
    "region_alignment": check_region_alignment,
    "masked_ce": check_masked_ce,
    "dice": check_dice,
    "bce": check_bce,
    "decoder": check_decoder,
}


def run_all_checks(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    return [fn(seed, corrupt) for fn in ALL_CHECKS.values()]
