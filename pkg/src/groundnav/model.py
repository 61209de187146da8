"""Desk-scale model: frozen pixel encoder, tiny causal LM, mask decoder.

The assembled model mirrors the full-scale layout: image tokens from the
projector are prepended to the embedded text sequence, the causal LM attends
over both, <SEG> hidden states from the final layer feed the text projector,
and the decoder turns calibrated prompts plus encoder features into one mask
logit grid per token, upsampled to image resolution.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .alignment import RegionAligner
from .config import ModelConfig
from .ctp import CalibratedPromptBank, CalibratedTextProjector, SegTokenStates
from .errors import BadImageShape, EmptyPromptBank, SequenceTooLong
from .msqp import FeatureGrid, MLPProjector, MultiScaleQueryProjector, ProjectedImageTokens


def _uniform_(tensor: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


class PixelEncoder(nn.Module):
    """Small frozen convolutional stand-in for the full-scale pixel encoder."""

    def __init__(self, feat_dim: int, image_size: int, grid_h: int, grid_w: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if image_size % grid_h != 0 or image_size % grid_w != 0:
            raise ValueError("image_size must be divisible by the grid sides")
        self.image_size = image_size
        self.grid_h = grid_h
        self.grid_w = grid_w
        patch = image_size // grid_h
        # 1x1 mixing keeps each grid cell a pure function of its own patch,
        # so class boundaries stay sharp at the feature level.
        self.patchify = nn.Conv2d(3, feat_dim, kernel_size=patch, stride=patch, dtype=dtype)
        self.mix = nn.Conv2d(feat_dim, feat_dim, kernel_size=1, dtype=dtype)
        for conv in (self.patchify, self.mix):
            _uniform_(conv.weight, conv.in_channels * conv.kernel_size[0] ** 2)
            _uniform_(conv.bias, conv.in_channels * conv.kernel_size[0] ** 2)
        self.requires_grad_(False)  # frozen for the whole lifetime

    def forward(self, images: Tensor) -> FeatureGrid:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != self.image_size \
                or images.shape[3] != self.image_size:
            raise BadImageShape(
                f"expected (B, 3, {self.image_size}, {self.image_size}), got {tuple(images.shape)}"
            )
        feats = self.mix(torch.nn.functional.gelu(self.patchify(images)))
        return FeatureGrid(
            values=feats.flatten(2).transpose(1, 2),
            grid_h=self.grid_h,
            grid_w=self.grid_w,
        )


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.norm_attn = nn.LayerNorm(dim, dtype=dtype)
        self.norm_mlp = nn.LayerNorm(dim, dtype=dtype)
        self.query_proj = nn.Linear(dim, dim, dtype=dtype)
        self.key_proj = nn.Linear(dim, dim, dtype=dtype)
        self.value_proj = nn.Linear(dim, dim, dtype=dtype)
        self.out_proj = nn.Linear(dim, dim, dtype=dtype)
        self.mlp_in = nn.Linear(dim, 4 * dim, dtype=dtype)
        self.mlp_out = nn.Linear(4 * dim, dim, dtype=dtype)
        for lin in (self.query_proj, self.key_proj, self.value_proj, self.out_proj, self.mlp_in):
            _uniform_(lin.weight, dim)
            _uniform_(lin.bias, dim)
        _uniform_(self.mlp_out.weight, 4 * dim)
        _uniform_(self.mlp_out.bias, 4 * dim)

    def forward(self, x: Tensor, attn_bias: Tensor) -> Tensor:
        b, s, dim = x.shape
        h = self.norm_attn(x)
        q = self.query_proj(h).view(b, s, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.key_proj(h).view(b, s, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.value_proj(h).view(b, s, self.n_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim) + attn_bias
        mixed = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(b, s, dim)
        x = x + self.out_proj(mixed)
        x = x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(self.norm_mlp(x))))
        return x


class TinyLM(nn.Module):
    """Decoder-only causal LM over the extended vocabulary.

    Image tokens occupy the first positions of the sequence; every text
    position can attend to all of them plus its own causal prefix. The output
    head is weight-tied to the token embedding.
    """

    def __init__(self, vocab_size: int, dim: int, n_layers: int, n_heads: int,
                 max_seq_len: int, n_image_tokens: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.max_seq_len = max_seq_len
        self.n_image_tokens = n_image_tokens
        self.tok_emb = nn.Embedding(vocab_size, dim, dtype=dtype)
        self.pos_emb = nn.Embedding(max_seq_len + n_image_tokens, dim, dtype=dtype)
        _uniform_(self.tok_emb.weight, dim)
        _uniform_(self.pos_emb.weight, dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, dtype) for _ in range(n_layers)
        )
        self.final_norm = nn.LayerNorm(dim, dtype=dtype)
        # Zero-initialized readout behind a learnable gain: logits start
        # uniform and the head only has to learn directions, not magnitudes.
        self.lm_head = nn.Linear(dim, vocab_size, bias=False, dtype=dtype)
        nn.init.zeros_(self.lm_head.weight)
        self.logit_gain = nn.Parameter(torch.tensor(12.0, dtype=dtype))

    def forward(
        self,
        input_ids: Tensor,
        image_tokens: ProjectedImageTokens,
        mask_pad_tokens: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Return (logits, hidden) over the text positions only."""
        b, s = input_ids.shape
        if s > self.max_seq_len:
            raise SequenceTooLong(f"{s} tokens exceeds max_seq_len={self.max_seq_len}")
        n_img = image_tokens.values.shape[1]
        if n_img != self.n_image_tokens:
            raise ValueError(f"expected {self.n_image_tokens} image tokens, got {n_img}")

        full = torch.cat([image_tokens.values, self.tok_emb(input_ids)], dim=1)
        positions = torch.arange(full.shape[1], device=full.device)
        full = full + self.pos_emb(positions)

        total = full.shape[1]
        causal = torch.tril(torch.ones(total, total, dtype=torch.bool, device=full.device))
        bias = torch.zeros(b, 1, total, total, dtype=full.dtype, device=full.device)
        bias.masked_fill_(~causal, float("-inf"))
        if mask_pad_tokens:
            key_pad = torch.zeros(b, total, dtype=torch.bool, device=full.device)
            key_pad[:, :n_img] = image_tokens.pad_mask
            bias.masked_fill_(key_pad[:, None, None, :], float("-inf"))

        x = full
        for block in self.blocks:
            x = block(x, bias)
        hidden = self.final_norm(x[:, n_img:])
        return self.logit_gain * self.lm_head(hidden), hidden


class MaskDecoder(nn.Module):
    """Prompt-conditioned per-pixel mask head.

    Pixel features are projected into the prompt dimension and shifted by a
    summary of the projected image tokens; each calibrated sub-embedding dots
    against the unit-normalized pixel map (scaled by a learnable gain) and the
    k_bank logit grids are averaged into one mask per <SEG> token, bilinearly
    upsampled to image resolution. Normalizing both sides keeps the logit
    scale healthy from the start, so optimization only has to learn
    directions.
    """

    def __init__(self, feat_dim: int, vis_dim: int, llm_dim: int, image_size: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.image_size = image_size
        self.pixel_proj = nn.Linear(feat_dim, vis_dim, dtype=dtype)
        self.summary_proj = nn.Linear(llm_dim, vis_dim, dtype=dtype)
        self.logit_gain = nn.Parameter(torch.tensor(16.0, dtype=dtype))
        _uniform_(self.pixel_proj.weight, feat_dim)
        _uniform_(self.pixel_proj.bias, feat_dim)
        # The image-token summary shifts every mask identically; start it at
        # zero so early mask logits are prompt-driven.
        nn.init.zeros_(self.summary_proj.weight)
        nn.init.zeros_(self.summary_proj.bias)

    def forward(
        self,
        prompt_bank: CalibratedPromptBank,
        grid: FeatureGrid,
        image_tokens: ProjectedImageTokens,
    ) -> list[Tensor]:
        """One (M_b, image, image) logit tensor per batch element."""
        if int(prompt_bank.valid.sum()) == 0:
            raise EmptyPromptBank("prompt bank carries no valid <SEG> tokens")
        pixels = self.pixel_proj(grid.values)  # (B, L, d_vis)
        summary = self.summary_proj(image_tokens.values.mean(dim=1))  # (B, d_vis)
        pixels = torch.nn.functional.normalize(
            pixels + summary.unsqueeze(1), dim=-1, eps=1e-12
        )

        grouped = prompt_bank.grouped()  # (B, M, K, d_vis)
        outputs = []
        for b in range(grouped.shape[0]):
            rows = []
            for m in range(grouped.shape[1]):
                if not bool(prompt_bank.valid[b, m]):
                    continue
                prompts = torch.nn.functional.normalize(grouped[b, m], dim=-1, eps=1e-12)
                logits = self.logit_gain * (pixels[b] @ prompts.T).mean(dim=-1)  # (L,)
                rows.append(logits.view(grid.grid_h, grid.grid_w))
            if rows:
                stack = torch.stack(rows).unsqueeze(1)  # (M_b, 1, h, w)
                up = torch.nn.functional.interpolate(
                    stack, size=(self.image_size, self.image_size),
                    mode="bilinear", align_corners=False,
                )
                outputs.append(up.squeeze(1))
            else:
                outputs.append(
                    pixels.new_zeros((0, self.image_size, self.image_size))
                )
        return outputs


class GroundedNavModel(nn.Module):
    """Full desk-scale pipeline with checkpoint-stable submodule names."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dtype = getattr(torch, config.dtype)
        torch.manual_seed(config.seed)
        self.encoder = PixelEncoder(
            config.feat_dim, config.image_size, config.grid_h, config.grid_w, dtype
        )
        if config.projector == "msqp":
            self.msqp = MultiScaleQueryProjector(
                config.feat_dim,
                config.proj_dim,
                config.hidden_dim,
                queries_per_scale=config.msqp_queries,
                n_heads=config.msqp_heads,
                n_layers=config.msqp_layers,
                n_pad_tokens=config.pad_image_tokens,
                dtype=dtype,
            )
        else:
            self.msqp = MLPProjector(
                config.feat_dim, config.proj_dim, config.hidden_dim,
                n_tokens=config.n_image_tokens, dtype=dtype,
            )
        self.lm = TinyLM(
            config.vocab_size, config.hidden_dim, config.n_layers, config.n_heads,
            config.max_seq_len, config.n_image_tokens, dtype,
        )
        self.ctp = CalibratedTextProjector(
            config.hidden_dim, config.vis_dim, config.k_bank, dtype
        )
        self.decoder = MaskDecoder(
            config.feat_dim, config.vis_dim, config.hidden_dim, config.image_size, dtype
        )
        self.align = RegionAligner(
            config.hidden_dim, config.feat_dim, config.vis_dim, dtype
        )
        if config.freeze_lm:
            self.lm.requires_grad_(False)

    def encode_image(self, images: Tensor) -> FeatureGrid:
        return self.encoder(images)

    def project_image(self, grid: FeatureGrid) -> ProjectedImageTokens:
        return self.msqp(grid)

    def lm_forward(
        self, input_ids: Tensor, image_tokens: ProjectedImageTokens
    ) -> tuple[Tensor, Tensor]:
        return self.lm(input_ids, image_tokens, mask_pad_tokens=self.config.mask_pad_tokens)

    def seg_hidden_states(
        self, hidden: Tensor, seg_positions: list[list[int]]
    ) -> SegTokenStates:
        """Gather final-layer hidden states at the <SEG> positions, padded."""
        b = hidden.shape[0]
        m_max = max((len(p) for p in seg_positions), default=0)
        values = hidden.new_zeros((b, m_max, hidden.shape[-1]))
        valid = torch.zeros(b, m_max, dtype=torch.bool, device=hidden.device)
        for row, positions in enumerate(seg_positions):
            for j, pos in enumerate(positions):
                values[row, j] = hidden[row, pos]
                valid[row, j] = True
        return SegTokenStates(values=values, valid=valid)

    def decode_masks(
        self,
        prompt_bank: CalibratedPromptBank,
        grid: FeatureGrid,
        image_tokens: ProjectedImageTokens,
    ) -> list[Tensor]:
        return self.decoder(prompt_bank, grid, image_tokens)

    @torch.no_grad()
    def generate(
        self,
        prompt_ids: Tensor,
        image_tokens: ProjectedImageTokens,
        max_new: int,
        eos_id: int,
    ) -> tuple[Tensor, Tensor]:
        """Greedy decoding; returns (ids, final hidden states) for one sample.

        ``prompt_ids`` is (S,) for a single sequence; decoding stops at the
        end-of-answer token or after ``max_new`` tokens.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        ids = prompt_ids.view(1, -1)
        hidden = None
        for _ in range(max_new):
            logits, hidden = self.lm_forward(ids, image_tokens)
            next_id = logits[0, -1].argmax().view(1, 1)
            ids = torch.cat([ids, next_id], dim=1)
            if int(next_id) == eos_id:
                break
        # Hidden states for the final sequence (including the last token).
        _, hidden = self.lm_forward(ids, image_tokens)
        return ids[0], hidden[0]

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for name, param in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(param)
        return groups
