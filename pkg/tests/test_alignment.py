import math

import numpy as np
import pytest
import torch

from groundnav.alignment import (
    RegionAligner,
    attend_region,
    build_negatives,
    info_nce,
    positive_embedding,
    region_alignment_loss,
    topk_lowest_index,
)
from groundnav.ctp import CalibratedTextProjector, SegTokenStates
from groundnav.errors import DegenerateBatch
from groundnav.msqp import FeatureGrid

from .oracles import (
    info_nce_loop,
    normalize_loop,
    region_alignment_loop,
    softmax_loop,
)

torch.set_num_threads(1)


def _aligner(h=8, c=6, d=4, seed=0):
    torch.manual_seed(seed)
    return RegionAligner(h, c, d, dtype=torch.float64)


def _norm(x):
    return torch.nn.functional.normalize(x, dim=-1, eps=1e-12)


class TestTopK:
    def test_ties_resolve_to_lowest_index(self):
        scores = torch.tensor([1.0, 3.0, 3.0, 2.0, 3.0], dtype=torch.float64)
        assert topk_lowest_index(scores, 3).tolist() == [1, 2, 4]

    def test_k_larger_than_length(self):
        scores = torch.tensor([2.0, 1.0], dtype=torch.float64)
        assert topk_lowest_index(scores, 5).tolist() == [0, 1]


class TestAttendRegion:
    def test_uniform_attention_when_dots_equal(self):
        aligner = _aligner()
        t = torch.zeros(8, dtype=torch.float64)  # zero query -> equal scores
        feats = torch.randn(5, 6, dtype=torch.float64)
        attn = attend_region(aligner, t, feats, k_pos=5)
        assert torch.allclose(attn.pi, torch.full((5,), 0.2, dtype=torch.float64), atol=1e-12)

    def test_full_attention_when_k_equals_l(self):
        aligner = _aligner(seed=1)
        torch.manual_seed(2)
        t = torch.randn(8, dtype=torch.float64)
        feats = torch.randn(6, 6, dtype=torch.float64)
        attn = attend_region(aligner, t, feats, k_pos=6)
        assert sorted(attn.indices.tolist()) == list(range(6))
        assert torch.allclose(attn.alpha, attn.pi[attn.indices], atol=1e-12)

    def test_pi_matches_softmax_loop(self):
        aligner = _aligner(seed=3)
        torch.manual_seed(4)
        t = torch.randn(8, dtype=torch.float64)
        feats = torch.randn(6, 6, dtype=torch.float64)
        attn = attend_region(aligner, t, feats, k_pos=3)
        q = t.numpy() @ aligner.query_proj.detach().numpy()
        keys = feats.numpy() @ aligner.key_proj.detach().numpy()
        scores = keys @ q / math.sqrt(aligner.d_k)
        assert np.abs(attn.pi.detach().numpy() - softmax_loop(scores)).max() < 1e-9
        assert float(attn.pi.sum()) == pytest.approx(1.0, abs=1e-6)
        assert float(attn.alpha.sum()) == pytest.approx(1.0, abs=1e-6)


class TestPositiveEmbedding:
    def test_k1_selects_argmax(self):
        aligner = _aligner(seed=5)
        torch.manual_seed(6)
        t = torch.randn(8, dtype=torch.float64)
        feats = torch.randn(7, 6, dtype=torch.float64)
        values = feats @ aligner.value_proj
        attn = attend_region(aligner, t, feats, k_pos=1)
        out = positive_embedding(aligner, attn, values)
        best = int(attn.pi.argmax())
        expected = values[best] @ aligner.out_proj
        assert torch.allclose(out, expected, atol=1e-12)

    def test_uniform_full_attention_is_mean(self):
        aligner = _aligner(seed=7)
        t = torch.zeros(8, dtype=torch.float64)
        feats = torch.randn(5, 6, dtype=torch.float64)
        values = feats @ aligner.value_proj
        attn = attend_region(aligner, t, feats, k_pos=5)
        out = positive_embedding(aligner, attn, values)
        assert torch.allclose(out, values.mean(dim=0) @ aligner.out_proj, atol=1e-12)

    def test_two_term_mixture(self):
        aligner = _aligner(seed=8)
        torch.manual_seed(9)
        t = torch.randn(8, dtype=torch.float64)
        feats = torch.randn(6, 6, dtype=torch.float64)
        values = feats @ aligner.value_proj
        attn = attend_region(aligner, t, feats, k_pos=2)
        out = positive_embedding(aligner, attn, values)
        i, j = attn.indices.tolist()
        a, b = attn.alpha.tolist()
        expected = (a * values[i] + b * values[j]) @ aligner.out_proj
        assert torch.allclose(out, expected, atol=1e-9)


class TestBuildNegatives:
    def _setup(self, b, m, L, k_neg, seed=0):
        aligner = _aligner(seed=seed)
        torch.manual_seed(seed + 100)
        anchors = _norm(torch.randn(b * m, 4, dtype=torch.float64))
        positives = _norm(torch.randn(b * m, 4, dtype=torch.float64))
        owners = [i // m for i in range(b * m)]
        feats = torch.randn(b, L, 6, dtype=torch.float64)
        values = feats @ aligner.value_proj
        attentions = []
        for i in range(b * m):
            t = torch.randn(8, dtype=torch.float64)
            attentions.append(attend_region(aligner, t, feats[owners[i]], k_pos=2))
        return aligner, anchors, positives, owners, attentions, values

    def test_single_anchor_no_hard_negatives(self):
        aligner, anchors, positives, owners, attentions, values = self._setup(1, 1, 4, 0)
        pools = build_negatives(aligner, anchors, positives, owners, attentions, values, 0)
        assert len(pools) == 1 and pools[0].shape[0] == 0

    def test_two_images_one_cross_negative(self):
        aligner, anchors, positives, owners, attentions, values = self._setup(2, 1, 4, 0)
        pools = build_negatives(aligner, anchors, positives, owners, attentions, values, 0)
        assert all(pool.shape[0] == 1 for pool in pools)
        assert torch.allclose(pools[0][0], positives[1])

    def test_pool_size_rule(self):
        b, m, k_neg = 2, 2, 8
        aligner, anchors, positives, owners, attentions, values = self._setup(b, m, 64, k_neg, seed=3)
        pools = build_negatives(aligner, anchors, positives, owners, attentions, values, k_neg)
        for pool in pools:
            assert pool.shape[0] == (b * m - 1) + k_neg

    def test_negatives_are_normalized(self):
        aligner, anchors, positives, owners, attentions, values = self._setup(2, 2, 16, 4, seed=4)
        pools = build_negatives(aligner, anchors, positives, owners, attentions, values, 4)
        for pool in pools:
            norms = pool.norm(dim=-1)
            assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


class TestInfoNCE:
    def test_empty_pool_gives_zero(self):
        anchors = _norm(torch.randn(1, 4, dtype=torch.float64))
        loss = info_nce(anchors, anchors.clone(), [torch.zeros(0, 4, dtype=torch.float64)], tau=0.07)
        assert float(loss) == 0.0

    def test_equal_logit_negative_gives_ln2(self):
        anchor = _norm(torch.randn(1, 4, dtype=torch.float64))
        positive = anchor.clone()
        negative = anchor.clone()  # same similarity as the positive
        loss = info_nce(anchor, positive, [negative], tau=0.07)
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_matches_triple_loop_oracle(self):
        torch.manual_seed(11)
        anchors = _norm(torch.randn(4, 5, dtype=torch.float64))
        positives = _norm(torch.randn(4, 5, dtype=torch.float64))
        pools = [_norm(torch.randn(3, 5, dtype=torch.float64)) for _ in range(4)]
        loss = info_nce(anchors, positives, pools, tau=0.07)
        expected = info_nce_loop(
            anchors.numpy(), positives.numpy(), [p.numpy() for p in pools], 0.07
        )
        assert float(loss) == pytest.approx(expected, abs=1e-9)

    def test_loss_increases_with_negative_logit(self):
        torch.manual_seed(12)
        anchor = _norm(torch.randn(1, 4, dtype=torch.float64))
        positive = _norm(torch.randn(1, 4, dtype=torch.float64))
        base = -anchor.clone()  # similarity -1
        low = info_nce(anchor, positive, [base], tau=0.07)
        near = _norm(positive + 0.05 * torch.randn(1, 4, dtype=torch.float64))
        high = info_nce(anchor, positive, [near], tau=0.07)
        assert float(high) > float(low)
        # Worst-case contribution of a similarity -1 negative is tiny.
        zero = info_nce(anchor, positive, [torch.zeros(0, 4, dtype=torch.float64)], tau=0.07)
        s_pos = float((anchor * positive).sum())
        bound = math.exp((-1.0 - s_pos) / 0.07)
        assert float(low) - float(zero) <= bound + 1e-12

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatch):
            info_nce(torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64), [], tau=0.07)


def _full_setup(b=2, m=2, L=16, h=8, c=6, d=4, k_bank=2, seed=0, valid=None):
    torch.manual_seed(seed)
    aligner = RegionAligner(h, c, d, dtype=torch.float64)
    ctp = CalibratedTextProjector(h, d, k_bank=k_bank, dtype=torch.float64)
    states = SegTokenStates(
        values=torch.randn(b, m, h, dtype=torch.float64),
        valid=torch.ones(b, m, dtype=torch.bool) if valid is None else valid,
    )
    side = int(math.isqrt(L))
    grid = FeatureGrid(values=torch.randn(b, L, c, dtype=torch.float64), grid_h=side, grid_w=L // side)
    return aligner, ctp, states, grid


class TestRegionAlignmentLoss:
    def test_identical_anchor_positive_no_negatives_zero(self):
        aligner, ctp, states, grid = _full_setup(b=1, m=1, seed=1)
        bank = ctp(states)
        loss = region_alignment_loss(
            aligner, ctp, states, grid, bank, tau=0.07, k_pos=4, k_neg=0
        )
        assert float(loss) == 0.0

    def test_matches_end_to_end_loop_oracle(self):
        aligner, ctp, states, grid = _full_setup(b=2, m=2, L=16, seed=2)
        bank = ctp(states)
        loss = region_alignment_loss(
            aligner, ctp, states, grid, bank, tau=0.07, k_pos=4, k_neg=3
        )
        expected = region_alignment_loop(
            states.values.numpy(),
            states.valid.numpy(),
            grid.values.numpy(),
            bank.grouped().detach().numpy(),
            aligner.query_proj.detach().numpy(),
            aligner.key_proj.detach().numpy(),
            aligner.value_proj.detach().numpy(),
            aligner.out_proj.detach().numpy(),
            tau=0.07,
            k_pos=4,
            k_neg=3,
        )
        assert float(loss) == pytest.approx(expected, abs=1e-8)

    def test_oracle_agreement_on_many_random_instances(self):
        for seed in range(30):
            aligner, ctp, states, grid = _full_setup(
                b=2, m=2, L=16, seed=seed + 50
            )
            bank = ctp(states)
            loss = region_alignment_loss(
                aligner, ctp, states, grid, bank, tau=0.07, k_pos=32, k_neg=2
            )
            expected = region_alignment_loop(
                states.values.numpy(), states.valid.numpy(), grid.values.numpy(),
                bank.grouped().detach().numpy(),
                aligner.query_proj.detach().numpy(), aligner.key_proj.detach().numpy(),
                aligner.value_proj.detach().numpy(), aligner.out_proj.detach().numpy(),
                tau=0.07, k_pos=32, k_neg=2,
            )
            assert float(loss) == pytest.approx(expected, abs=1e-8)

    def test_anchor_rescaling_invariance(self):
        aligner, ctp, states, grid = _full_setup(seed=3)
        bank = ctp(states)
        loss = region_alignment_loss(aligner, ctp, states, grid, bank, tau=0.07, k_pos=4, k_neg=2)
        scaled = type(bank)(values=bank.values * 37.5, valid=bank.valid, k_bank=bank.k_bank)
        loss_scaled = region_alignment_loss(
            aligner, ctp, states, grid, scaled, tau=0.07, k_pos=4, k_neg=2
        )
        assert float(loss) == pytest.approx(float(loss_scaled), abs=1e-10)

    def test_no_gradient_reaches_encoder_features(self):
        aligner, ctp, states, grid = _full_setup(seed=4)
        grid.values.requires_grad_(True)
        bank = ctp(states)
        loss = region_alignment_loss(aligner, ctp, states, grid, bank, tau=0.07, k_pos=4, k_neg=2)
        loss.backward()
        assert grid.values.grad is None
        assert aligner.query_proj.grad is not None
        assert ctp.vis_proj.grad is not None

    def test_padded_anchors_excluded(self):
        valid = torch.tensor([[True, False], [True, True]])
        aligner, ctp, states, grid = _full_setup(seed=5, valid=valid)
        bank = ctp(states)
        loss = region_alignment_loss(aligner, ctp, states, grid, bank, tau=0.07, k_pos=4, k_neg=1)
        expected = region_alignment_loop(
            states.values.numpy(), valid.numpy(), grid.values.numpy(),
            bank.grouped().detach().numpy(),
            aligner.query_proj.detach().numpy(), aligner.key_proj.detach().numpy(),
            aligner.value_proj.detach().numpy(), aligner.out_proj.detach().numpy(),
            tau=0.07, k_pos=4, k_neg=1,
        )
        assert float(loss) == pytest.approx(expected, abs=1e-8)

    def test_all_padded_raises(self):
        valid = torch.zeros(1, 2, dtype=torch.bool)
        aligner, ctp, states, grid = _full_setup(b=1, seed=6, valid=valid)
        bank = ctp(states)
        with pytest.raises(DegenerateBatch):
            region_alignment_loss(aligner, ctp, states, grid, bank, tau=0.07, k_pos=4, k_neg=1)

    def test_k_pos_equals_l_is_full_attention(self):
        aligner, ctp, states, grid = _full_setup(b=1, m=1, L=16, seed=7)
        bank = ctp(states)
        full = region_alignment_loss(aligner, ctp, states, grid, bank, tau=0.07, k_pos=16, k_neg=0)
        clamped = region_alignment_loss(aligner, ctp, states, grid, bank, tau=0.07, k_pos=999, k_neg=0)
        assert float(full) == pytest.approx(float(clamped), abs=1e-12)
