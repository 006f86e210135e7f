"""Projector plus a toy decoder LM with expert-routed attention.

Visual tokens are projected into the language embedding space and, inside
every decoder layer, transformed by a separate set of QKV matrices; text
tokens keep the original matrices. Attention output, FFN, and norms are
shared, and the softmax mixes text and visual keys jointly under a causal
mask, so visual content can reach text positions. Rotary phases are driven
by externally assigned position IDs, which is what makes shared frame IDs
a pure relabeling with no embedding-table surgery.

Routing is index-based: each token's projection is computed only with the
matrices of its type. A text-only sequence therefore never touches the
visual matrices (their gradients are exactly zero and the loss is bitwise
invariant to their contents).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import EncoderConfig, VisionEncoder
from .fpid import PositionMode, SequenceLayout, TextSegment, VisualFrame, assign_positions
from .image import ContractError, RasterImage
from .merger import merge_features
from .nninit import init_parameters

PARAM_GROUPS = ("projector", "visual_experts", "decoder_core", "encoder", "embeddings")


@dataclass(frozen=True)
class DecoderConfig:
    d_m: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab: int = 512
    rope_base: float = 10000.0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_m % self.n_heads != 0:
            raise ContractError(f"d_m {self.d_m} not divisible by n_heads {self.n_heads}")
        if (self.d_m // self.n_heads) % 2 != 0:
            raise ContractError("head dim must be even for rotary pairs")


def apply_rotary(x: torch.Tensor, pos_ids: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate (t, n_heads, head_dim) by per-token integer position IDs."""
    hd = x.shape[-1]
    j = torch.arange(hd // 2, dtype=x.dtype)
    inv_freq = base ** (-2.0 * j / hd)
    angles = pos_ids.to(x.dtype)[:, None] * inv_freq[None, :]
    cos = torch.cos(angles)[:, None, :]
    sin = torch.sin(angles)[:, None, :]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return rotated.flatten(-2)


def routed_linear(
    x: torch.Tensor,
    visual_mask: torch.Tensor,
    text_lin: nn.Linear,
    visual_lin: nn.Linear,
) -> torch.Tensor:
    """Apply text_lin to text rows and visual_lin to visual rows.

    Index-based so that an all-text input routes nothing through the visual
    matrices: their contribution is an empty matmul, which keeps the output
    independent of (and the gradient exactly zero in) the visual weights.
    """
    text_idx = (~visual_mask).nonzero(as_tuple=True)[0]
    vis_idx = visual_mask.nonzero(as_tuple=True)[0]
    out = x.new_zeros(x.shape[0], text_lin.out_features)
    out = out.index_copy(0, text_idx, text_lin(x.index_select(0, text_idx)))
    out = out.index_copy(0, vis_idx, visual_lin(x.index_select(0, vis_idx)))
    return out


class ExpertAttention(nn.Module):
    """Causal attention with per-token-type QKV matrices and shared output."""

    def __init__(self, d: int, n_heads: int, rope_base: float):
        super().__init__()
        self.n_heads = n_heads
        self.rope_base = rope_base
        kw = dict(dtype=torch.float64)
        self.text_q = nn.Linear(d, d, **kw)
        self.text_k = nn.Linear(d, d, **kw)
        self.text_v = nn.Linear(d, d, **kw)
        self.vis_q = nn.Linear(d, d, **kw)
        self.vis_k = nn.Linear(d, d, **kw)
        self.vis_v = nn.Linear(d, d, **kw)
        self.out = nn.Linear(d, d, **kw)

    def forward(
        self,
        x: torch.Tensor,
        visual_mask: torch.Tensor,
        pos_ids: torch.Tensor,
        use_experts: bool = True,
    ) -> torch.Tensor:
        t, d = x.shape
        hd = d // self.n_heads
        if use_experts:
            q = routed_linear(x, visual_mask, self.text_q, self.vis_q)
            k = routed_linear(x, visual_mask, self.text_k, self.vis_k)
            v = routed_linear(x, visual_mask, self.text_v, self.vis_v)
        else:
            q, k, v = self.text_q(x), self.text_k(x), self.text_v(x)
        q = apply_rotary(q.view(t, self.n_heads, hd), pos_ids, self.rope_base)
        k = apply_rotary(k.view(t, self.n_heads, hd), pos_ids, self.rope_base)
        v = v.view(t, self.n_heads, hd)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        # Per-head loop keeps the (t, t) score matrix as the peak allocation.
        head_outs = []
        for h in range(self.n_heads):
            scores = q[:, h] @ k[:, h].transpose(0, 1) / hd**0.5
            scores = scores.masked_fill(causal, float("-inf"))
            head_outs.append(torch.softmax(scores, dim=-1) @ v[:, h])
        return self.out(torch.stack(head_outs, dim=1).reshape(t, d))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d, kw = cfg.d_m, dict(dtype=torch.float64)
        self.norm1 = nn.LayerNorm(d, **kw)
        self.attn = ExpertAttention(d, cfg.n_heads, cfg.rope_base)
        self.norm2 = nn.LayerNorm(d, **kw)
        self.fc1 = nn.Linear(d, cfg.ffn_mult * d, **kw)
        self.fc2 = nn.Linear(cfg.ffn_mult * d, d, **kw)

    def forward(self, x, visual_mask, pos_ids, use_experts: bool = True) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), visual_mask, pos_ids, use_experts)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class VisionLanguageModel(nn.Module):
    """Encoder, merger window, projector, and expert-routed decoder."""

    def __init__(
        self,
        enc_cfg: EncoderConfig | None = None,
        dec_cfg: DecoderConfig | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.dec_cfg = dec_cfg or DecoderConfig()
        self.encoder = VisionEncoder(self.enc_cfg)
        self.projector = nn.Linear(self.enc_cfg.d_v, self.dec_cfg.d_m, dtype=torch.float64)
        self.tok_embed = nn.Embedding(self.dec_cfg.vocab, self.dec_cfg.d_m, dtype=torch.float64)
        self.layers = nn.ModuleList(DecoderLayer(self.dec_cfg) for _ in range(self.dec_cfg.n_layers))
        self.final_norm = nn.LayerNorm(self.dec_cfg.d_m, dtype=torch.float64)
        self.lm_head = nn.Linear(self.dec_cfg.d_m, self.dec_cfg.vocab, dtype=torch.float64)
        init_parameters(self, seed)
        self.sync_visual_experts()

    def sync_visual_experts(self) -> None:
        """Copy text QKV into the visual matrices (exact), the expert start state."""
        with torch.no_grad():
            for layer in self.layers:
                a = layer.attn
                for txt, vis in ((a.text_q, a.vis_q), (a.text_k, a.vis_k), (a.text_v, a.vis_v)):
                    vis.weight.copy_(txt.weight)
                    vis.bias.copy_(txt.bias)

    # ---- grouping -------------------------------------------------------

    @staticmethod
    def group_of(param_name: str) -> str:
        if param_name.startswith("projector."):
            return "projector"
        if param_name.startswith("encoder."):
            return "encoder"
        if param_name.startswith("tok_embed."):
            return "embeddings"
        if ".attn.vis_" in param_name:
            return "visual_experts"
        return "decoder_core"

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {g: [] for g in PARAM_GROUPS}
        for name, param in self.named_parameters():
            groups[self.group_of(name)].append((name, param))
        return groups

    # ---- media ----------------------------------------------------------

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.enc_cfg.d_v:
            raise ContractError(
                f"expected (n, {self.enc_cfg.d_v}) visual features, got {tuple(features.shape)}"
            )
        return self.projector(features)

    def encode_media(
        self, views: list[RasterImage | torch.Tensor], window: int
    ) -> list[torch.Tensor]:
        """Each view/frame -> encoder -> window mean-pool -> projector."""
        segments = []
        for view in views:
            grid = self.encoder.encode_view(view)
            pooled = merge_features(grid.features, window)
            segments.append(self.project(pooled.reshape(-1, self.enc_cfg.d_v)))
        return segments

    # ---- sequence -------------------------------------------------------

    def assemble_sequence(
        self,
        text_ids: list[int],
        visual_segments: list[torch.Tensor],
        prefix_ids: tuple[int, ...] = (),
    ) -> tuple[torch.Tensor, SequenceLayout]:
        """Concatenate [prefix text][visual segments][text] into embeddings."""
        entries: list[TextSegment | VisualFrame] = []
        parts: list[torch.Tensor] = []
        if prefix_ids:
            entries.append(TextSegment(len(prefix_ids)))
            parts.append(self.tok_embed(torch.tensor(prefix_ids, dtype=torch.long)))
        for seg in visual_segments:
            if seg.ndim != 2 or seg.shape[1] != self.dec_cfg.d_m or seg.shape[0] < 1:
                raise ContractError(f"bad visual segment shape {tuple(seg.shape)}")
            entries.append(VisualFrame(seg.shape[0]))
            parts.append(seg)
        if text_ids:
            entries.append(TextSegment(len(text_ids)))
            parts.append(self.tok_embed(torch.tensor(text_ids, dtype=torch.long)))
        if not entries:
            raise ContractError("cannot assemble an empty sequence")
        return torch.cat(parts), SequenceLayout(tuple(entries))

    def decoder_forward(
        self,
        text_ids: list[int],
        visual_segments: list[torch.Tensor],
        mode: PositionMode,
        prefix_ids: tuple[int, ...] = (),
    ) -> tuple[torch.Tensor, SequenceLayout]:
        """Logits of shape (total tokens, vocab) plus the assigned layout."""
        emb, layout = self.assemble_sequence(text_ids, visual_segments, prefix_ids)
        layout = assign_positions(layout, mode)
        visual_mask = torch.from_numpy(layout.visual_mask)
        pos_ids = torch.from_numpy(layout.position_ids)
        x = emb
        for layer in self.layers:
            x = layer(x, visual_mask, pos_ids)
        logits = self.lm_head(self.final_norm(x))
        return logits, layout

    def forward_views(
        self,
        views: list[RasterImage | torch.Tensor],
        text_ids: list[int],
        mode: PositionMode,
        window: int,
        prefix_ids: tuple[int, ...] = (),
    ) -> tuple[torch.Tensor, SequenceLayout]:
        segments = self.encode_media(views, window)
        return self.decoder_forward(text_ids, segments, mode, prefix_ids)


def build_targets(
    layout: SequenceLayout, text_ids: list[int], prefix_ids: tuple[int, ...] = ()
) -> torch.Tensor:
    """Per-position token IDs, -1 at visual positions, matching assembly order."""
    chunks = []
    if prefix_ids:
        chunks.append(list(prefix_ids))
    if text_ids:
        chunks.append(list(text_ids))
    targets = torch.full((layout.total_tokens,), -1, dtype=torch.long)
    offset = 0
    chunk_iter = iter(chunks)
    for seg in layout.entries:
        if isinstance(seg, TextSegment):
            chunk = next(chunk_iter)
            if len(chunk) != seg.token_count:
                raise ContractError("text ids do not match layout segments")
            targets[offset : offset + seg.token_count] = torch.tensor(chunk, dtype=torch.long)
        offset += seg.token_count
    return targets


def caption_loss(
    logits: torch.Tensor,
    layout: SequenceLayout,
    text_ids: list[int],
    prefix_ids: tuple[int, ...] = (),
) -> tuple[torch.Tensor, int]:
    """Next-token cross-entropy over positions whose successor is text."""
    targets = build_targets(layout, text_ids, prefix_ids)
    predict_from = (targets[1:] >= 0).nonzero(as_tuple=True)[0]
    if predict_from.numel() == 0:
        raise ContractError("no text targets to score")
    loss = F.cross_entropy(logits[predict_from], targets[predict_from + 1])
    return loss, int(predict_from.numel())


def caption_accuracy(
    logits: torch.Tensor,
    layout: SequenceLayout,
    text_ids: list[int],
    prefix_ids: tuple[int, ...] = (),
) -> tuple[int, int]:
    """(correct, total) next-token argmax hits on text targets."""
    targets = build_targets(layout, text_ids, prefix_ids)
    predict_from = (targets[1:] >= 0).nonzero(as_tuple=True)[0]
    preds = logits[predict_from].argmax(dim=-1)
    correct = int((preds == targets[predict_from + 1]).sum())
    return correct, int(predict_from.numel())
